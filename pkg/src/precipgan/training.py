"""SRCNN and WGAN-GP objectives, the Adam update and the training loop.

Sign convention for the critic: the critic maximizes the Wasserstein estimate
``mean F(real) - mean F(fake)`` while keeping the gradient penalty small, so
the quantity handed to the (minimizing) optimizer is::

    critic_loss = -(mean F(real) - mean F(fake)) + lambda/B * sum_b (||grad F(x_hat_b)|| - 1)^2

The generator minimizes ``-mean F(G(z)) + alpha * MSE(G(z), x)``; the
``mean F(real)`` half of the Wasserstein estimate does not depend on the
generator and is left out.

Randomness is a pure function of ``(seed, epoch)`` for batch order and of
``(seed, step)`` for the interpolation coefficients, so a run resumed from any
epoch checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, denormalize
from .networks import (
    CriticConfig,
    GeneratorConfig,
    NetworkParams,
    build_critic,
    build_generator,
    critic_forward,
    generator_forward,
    infer,
    params_from_record,
    read_record,
    write_record,
)

log = logging.getLogger(__name__)

HISTORY_HEADER = ["step", "mode", "wasserstein", "mse", "gp", "total"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_record: "LossRecord | None" = None):
        super().__init__(msg)
        self.last_record = last_record


@dataclass
class TrainConfig:
    mode: str = "srcnn"
    alpha: float = 10.0
    lambda_gp: float = 10.0
    batch_size: int = 32
    n_critic: int = 5
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    adam_eps: float = 1e-8
    epochs: int = 10
    seed: int = 0
    val_limit: int = 64

    def validate(self) -> None:
        if self.mode not in ("srcnn", "wgan"):
            raise ValueError(f"mode must be srcnn or wgan, got {self.mode!r}")
        if self.alpha < 0 or self.lambda_gp < 0:
            raise ValueError("alpha and lambda_gp must be >= 0")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid optimizer settings")


@dataclass
class LossRecord:
    step: int
    mode: str  # srcnn | critic | generator
    wasserstein: float = float("nan")
    mse: float = float("nan")
    gp: float = float("nan")
    generator_loss: float = float("nan")
    critic_loss: float = float("nan")
    fake_score: float = float("nan")

    @property
    def total(self) -> float:
        return self.critic_loss if self.mode == "critic" else self.generator_loss

    def row(self) -> list[str]:
        return [str(self.step), self.mode] + [repr(float(v)) for v in (self.wasserstein, self.mse, self.gp, self.total)]


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def srcnn_loss(generated: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over batch and pixels."""
    if generated.shape != target.shape:
        raise ValueError(f"srcnn_loss: shape mismatch {generated.shape} vs {target.shape}")
    return ad.mean(ad.square(ad.sub(generated, target)))


def interpolate_samples(real, fake, eps) -> np.ndarray:
    """Per-sample convex combination ``eps_b * real_b + (1 - eps_b) * fake_b``."""
    real = real.data if isinstance(real, Tensor) else np.asarray(real, dtype=np.float64)
    fake = fake.data if isinstance(fake, Tensor) else np.asarray(fake, dtype=np.float64)
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if real.shape != fake.shape:
        raise ValueError(f"interpolate_samples: shape mismatch {real.shape} vs {fake.shape}")
    if eps.shape != (real.shape[0],):
        raise ValueError(f"eps must have shape ({real.shape[0]},), got {eps.shape}")
    if np.any(eps < 0) or np.any(eps > 1) or not np.all(np.isfinite(eps)):
        raise ValueError("eps must lie in [0, 1]")
    e = eps.reshape((-1,) + (1,) * (real.ndim - 1))
    return e * real + (1.0 - e) * fake


def gradient_penalty(critic: NetworkParams, x_hat: np.ndarray, lambda_gp: float) -> Tensor:
    """``lambda * mean_b (||d F / d x_hat_b||_2 - 1)^2`` with the input gradient kept on the graph."""
    xh = Tensor(x_hat, requires_grad=True)
    scores = critic_forward(critic, xh)
    (gx,) = ad.grad(ad.sum(scores), [xh], create_graph=True)
    norms = ad.l2_norm_per_batch(gx)
    if not np.all(np.isfinite(norms.data)):
        raise FloatingPointError("non-finite critic gradient norm in gradient penalty")
    return ad.scale(ad.mean(ad.square(ad.add_scalar(norms, -1.0))), lambda_gp)


def critic_loss_terms(critic: NetworkParams, real, fake, lambda_gp: float, eps) -> tuple[Tensor, float, float]:
    """Returns ``(loss_to_minimize, wasserstein_estimate, gp_term)``."""
    real = real if isinstance(real, Tensor) else Tensor(real)
    fake = ad.detach(fake) if isinstance(fake, Tensor) else Tensor(fake)
    w = ad.sub(ad.mean(critic_forward(critic, real)), ad.mean(critic_forward(critic, fake)))
    x_hat = interpolate_samples(real, fake, eps)
    gp = gradient_penalty(critic, x_hat, lambda_gp) if lambda_gp > 0 else Tensor(0.0)
    loss = ad.add(ad.neg(w), gp)
    return loss, float(w.data), float(gp.data)


def critic_loss(critic: NetworkParams, real, fake, lambda_gp: float, eps) -> Tensor:
    return critic_loss_terms(critic, real, fake, lambda_gp, eps)[0]


def generator_loss_terms(critic: NetworkParams, generated: Tensor, target, alpha: float) -> tuple[Tensor, float, float]:
    """Returns ``(loss, mean_fake_score, mse)``."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    mse = srcnn_loss(generated, target)
    fake_score = ad.mean(critic_forward(critic, generated))
    loss = ad.add(ad.neg(fake_score), ad.scale(mse, alpha))
    return loss, float(fake_score.data), float(mse.data)


def generator_loss(critic: NetworkParams, generated: Tensor, target, alpha: float) -> Tensor:
    return generator_loss_terms(critic, generated, target, alpha)[0]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: NetworkParams, lr: float, beta1: float, beta2: float, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}

    def step(self, params: NetworkParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.tensors.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            upd = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - upd

    def state_record(self, which: str, meta: dict | None = None) -> tuple[dict, dict]:
        cfg = {"which": which, "t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        if meta:
            cfg["meta"] = meta
        tensors = {f"m/{k}": v for k, v in self.m.items()}
        tensors.update({f"v/{k}": v for k, v in self.v.items()})
        return cfg, tensors

    def load_state(self, cfg: dict, tensors: dict) -> None:
        self.t = int(cfg["t"])
        for k in self.m:
            self.m[k] = tensors[f"m/{k}"].copy()
            self.v[k] = tensors[f"v/{k}"].copy()


def _param_grads(loss: Tensor, params: NetworkParams) -> dict[str, np.ndarray]:
    res = ad.backward(loss, params.values(), allow_unused=True)
    return {name: res[t].data for name, t in params.tensors.items()}


# ---------------------------------------------------------------------------
# state and steps
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    generator: NetworkParams
    critic: NetworkParams | None
    opt_g: Adam
    opt_c: Adam | None
    step: int = 0
    epoch: int = 0
    history_rows: int = 0
    best_val: float = float("inf")
    extra: dict = field(default_factory=dict)


def init_state(cfg: TrainConfig, gen_cfg: GeneratorConfig, critic_cfg: CriticConfig | None) -> TrainState:
    cfg.validate()
    gen = build_generator(gen_cfg, cfg.seed)
    opt_g = Adam(gen, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    critic = opt_c = None
    if cfg.mode == "wgan":
        if critic_cfg is None:
            raise ValueError("wgan mode needs a critic config")
        critic = build_critic(critic_cfg, cfg.seed + 1)
        opt_c = Adam(critic, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return TrainState(gen, critic, opt_g, opt_c)


def _check_finite(rec: LossRecord, last: LossRecord | None) -> None:
    vals = [rec.total, rec.mse if rec.mode != "critic" else 0.0]
    if not all(np.isfinite(v) for v in vals):
        raise TrainingDiverged(f"non-finite loss at step {rec.step} ({rec.mode})", last)


def train_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray], cfg: TrainConfig) -> list[LossRecord]:
    """One optimization step on a normalized ``(lr[B,h,w], hr[B,H,W])`` batch.

    srcnn: one MSE update, one record. wgan: ``n_critic`` critic updates
    (one record each) followed by one generator update (one record).
    """
    lr_b, hr_b = batch
    z = Tensor(lr_b[:, None])
    x = Tensor(hr_b[:, None])
    step = state.step
    records: list[LossRecord] = []
    last = None
    if cfg.mode == "srcnn":
        loss = srcnn_loss(generator_forward(state.generator, z), x)
        v = float(loss.data)
        rec = LossRecord(step, "srcnn", mse=v, gp=0.0, generator_loss=v, wasserstein=float("nan"))
        _check_finite(rec, None)
        state.opt_g.step(state.generator, _param_grads(loss, state.generator))
        records.append(rec)
    else:
        rng = np.random.default_rng([cfg.seed, step, 7])
        with ad.no_grad():
            fake = generator_forward(state.generator, z).data
        for i in range(cfg.n_critic):
            eps = rng.uniform(0.0, 1.0, size=len(hr_b))
            loss, w, gp = critic_loss_terms(state.critic, x, fake, cfg.lambda_gp, eps)
            rec = LossRecord(step, "critic", wasserstein=w, gp=gp, critic_loss=float(loss.data))
            _check_finite(rec, last)
            state.opt_c.step(state.critic, _param_grads(loss, state.critic))
            records.append(rec)
            last = rec
        gen = generator_forward(state.generator, z)
        loss, fscore, mse = generator_loss_terms(state.critic, gen, x, cfg.alpha)
        with ad.no_grad():
            real_score = float(ad.mean(critic_forward(state.critic, x)).data)
        rec = LossRecord(
            step, "generator", wasserstein=real_score - fscore, mse=mse, gp=float("nan"),
            generator_loss=float(loss.data), fake_score=fscore,
        )
        _check_finite(rec, last)
        state.opt_g.step(state.generator, _param_grads(loss, state.generator))
        records.append(rec)
    state.step += 1
    return records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> None:
    buf = io.BytesIO()
    g = state.generator
    write_record(buf, "generator", asdict(g.config), {k: v.data for k, v in g.tensors.items()})
    if state.critic is not None:
        c = state.critic
        write_record(buf, "critic", asdict(c.config), {k: v.data for k, v in c.tensors.items()})
    meta = {
        "step": state.step,
        "epoch": state.epoch,
        "history_rows": state.history_rows,
        "best_val": state.best_val if np.isfinite(state.best_val) else None,
    }
    write_record(buf, "optimizer", *state.opt_g.state_record("generator", meta))
    if state.opt_c is not None:
        write_record(buf, "optimizer", *state.opt_c.state_record("critic"))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, cfg: TrainConfig) -> TrainState:
    gen = critic = None
    opt_recs = {}
    with open(path, "rb") as f:
        while (rec := read_record(f)) is not None:
            role, conf, tensors = rec
            if role == "generator":
                gen = params_from_record(role, conf, tensors)
            elif role == "critic":
                critic = params_from_record(role, conf, tensors)
            else:
                opt_recs[conf["which"]] = (conf, tensors)
    if gen is None or "generator" not in opt_recs:
        raise ValueError(f"{path} is not a training checkpoint")
    opt_g = Adam(gen, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_g.load_state(*opt_recs["generator"])
    opt_c = None
    if critic is not None:
        opt_c = Adam(critic, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        opt_c.load_state(*opt_recs["critic"])
    meta = opt_recs["generator"][0]["meta"]
    best = meta.get("best_val")
    return TrainState(
        gen, critic, opt_g, opt_c, step=meta["step"], epoch=meta["epoch"],
        history_rows=meta["history_rows"], best_val=float("inf") if best is None else best,
    )


def latest_checkpoint(checkpoint_dir) -> Path | None:
    cks = sorted(Path(checkpoint_dir).glob("epoch_*.ckpt"))
    return cks[-1] if cks else None


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def validation_rmse(gen: NetworkParams, dataset: Dataset, limit: int | None = None, batch: int = 32) -> float:
    """Mean per-field RMSE in mm/hr of clamped, denormalized generator output."""
    pairs = dataset.pairs[:limit] if limit else dataset.pairs
    if not pairs:
        return float("nan")
    lr, hr = Dataset(pairs, dataset.split).arrays()
    errs = []
    for s in range(0, len(lr), batch):
        pred = denormalize(infer(gen, lr[s : s + batch])).astype(np.float64)
        truth = np.stack([p[1].grid for p in pairs[s : s + batch]]).astype(np.float64)
        errs.extend(np.sqrt(np.mean((pred - truth) ** 2, axis=(1, 2))))
    return float(np.mean(errs))


def _read_history(path: Path, keep_rows: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return rows[:keep_rows]


def _write_history(path: Path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        w.writerows(rows)


def run_training(
    dataset: Dataset,
    cfg: TrainConfig,
    checkpoint_dir,
    gen_cfg: GeneratorConfig | None = None,
    critic_cfg: CriticConfig | None = None,
    val_dataset: Dataset | None = None,
    resume: bool = True,
    stop_after: int | None = None,
) -> tuple[NetworkParams, Path]:
    """Train for ``cfg.epochs`` epochs, checkpointing after each one.

    Writes ``epoch_XXXX.ckpt``, ``loss_history.csv`` and, when a validation
    set is given, ``best.ckpt`` (lowest validation RMSE) plus
    ``validation.csv``. With ``resume`` the latest epoch checkpoint in the
    directory is picked up. ``stop_after`` ends the run after that many
    epochs of this call (to simulate an interruption).
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    lr_all, hr_all = dataset.arrays()
    if gen_cfg is None:
        gen_cfg = GeneratorConfig(scale_factor=hr_all.shape[1] // lr_all.shape[1])
    if gen_cfg.scale_factor * lr_all.shape[1] != hr_all.shape[1]:
        raise ValueError("generator scale factor does not match the dataset")
    if cfg.mode == "wgan" and critic_cfg is None:
        critic_cfg = CriticConfig(input_size=hr_all.shape[1])

    hist_path = out / "loss_history.csv"
    val_path = out / "validation.csv"
    ck = latest_checkpoint(out) if resume else None
    if ck is not None:
        state = load_checkpoint(ck, cfg)
        log.info("resuming from %s (epoch %d, step %d)", ck, state.epoch, state.step)
    else:
        state = init_state(cfg, gen_cfg, critic_cfg)
    rows = _read_history(hist_path, state.history_rows) if ck is not None else []
    _write_history(hist_path, rows)
    if ck is None and val_path.exists():
        val_path.unlink()

    n = len(dataset)
    bs = min(cfg.batch_size, n)
    done = 0
    last: LossRecord | None = None
    while state.epoch < cfg.epochs:
        if stop_after is not None and done >= stop_after:
            break
        order = np.random.default_rng([cfg.seed, state.epoch]).permutation(n)
        epoch_rows = []
        for s in range(0, n - bs + 1, bs):
            idx = order[s : s + bs]
            try:
                recs = train_step(state, (lr_all[idx], hr_all[idx]), cfg)
            except TrainingDiverged as e:
                if e.last_record is None:
                    e.last_record = last
                raise
            last = recs[-1]
            epoch_rows.extend(r.row() for r in recs)
        state.epoch += 1
        rows.extend(epoch_rows)
        state.history_rows = len(rows)
        with open(hist_path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(epoch_rows)
        ck_path = out / f"epoch_{state.epoch:04d}.ckpt"
        if val_dataset is not None and len(val_dataset):
            v = validation_rmse(state.generator, val_dataset, cfg.val_limit)
            with open(val_path, "a") as f:
                f.write(f"{state.epoch},{v!r}\n")
            improved = v < state.best_val
            if improved:
                state.best_val = v
            save_checkpoint(state, ck_path)
            if improved:
                shutil.copyfile(ck_path, out / "best.ckpt")
        else:
            save_checkpoint(state, ck_path)
        log.info("epoch %d done: step %d, last %s", state.epoch, state.step, last)
        done += 1
    return state.generator, hist_path


def config_to_text(**sections) -> str:
    """Flatten dataclass configs into ``section.key=value`` lines."""
    lines = []
    for name, obj in sections.items():
        d = asdict(obj) if obj is not None else {}
        for k, v in d.items():
            lines.append(f"{name}.{k}={json.dumps(v)}")
    return "\n".join(lines) + "\n"
