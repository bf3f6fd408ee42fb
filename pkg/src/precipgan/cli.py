"""Command-line interface: synth, train, infer, evaluate, rank.

Configuration files are plain ``key=value`` lines (``#`` starts a comment).
Command-line flags override file values, and every command writes the fully
resolved configuration to ``resolved_config.txt`` in its output directory.

Exit codes: 0 success, 2 config / malformed input, 3 I/O error, 4 training
diverged, 5 checkpoint or field size mismatch, 6 id mismatch between
directories.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data as dp
from . import evaluation as ev
from .networks import CheckpointError, CriticConfig, GeneratorConfig, load_network, infer
from .training import TrainConfig, TrainingDiverged, run_training

log = logging.getLogger("precipgan")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_SIZE = 5
EXIT_IDS = 6


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# extra synth keys beyond SynthConfig
_SYNTH_EXTRA = {
    "lr_scales": "4,8",
    "artifact_fraction": 0.0,
    "artifact_level": 12.0,
    "artifact_size": 0,
    "artifact_split": "test",
}

# train keys mapped onto generator / critic configs
_NET_KEYS = {
    "gen_channels": ("gen", "channels"),
    "gen_kernel_sizes": ("gen", "kernel_sizes"),
    "upsample_mode": ("gen", "upsample_mode"),
    "gen_leaky_slope": ("gen", "leaky_slope"),
    "critic_widths": ("critic", "widths"),
    "critic_leaky_slope": ("critic", "leaky_slope"),
    "critic_kernel_size": ("critic", "kernel_size"),
}


def read_config(path) -> dict[str, str]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(EXIT_CONFIG, f"cannot read config {path}: {e}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value: str, default):
    try:
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            return [int(x) for x in value.replace(" ", "").split(",") if x]
        return value
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad value {value!r}") from None


def _apply(obj, values: dict[str, str], consumed: set) -> None:
    for f in fields(obj):
        if f.name in values:
            setattr(obj, f.name, _coerce(values[f.name], getattr(obj, f.name)))
            consumed.add(f.name)


def _check_unknown(values: dict, consumed: set) -> None:
    unknown = sorted(set(values) - consumed)
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown config keys: {', '.join(unknown)}")


def _write_resolved(out: Path, sections: dict[str, dict]) -> None:
    lines = []
    for name, d in sections.items():
        for k, v in d.items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}" if name == "" else f"{name}.{k}={v}")
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError(EXIT_CONFIG, "--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot create {out}: {e}") from None
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    values = read_config(args.config)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.n is not None:
        values["n_fields"] = str(args.n)
    cfg = dp.SynthConfig()
    consumed: set = set()
    _apply(cfg, values, consumed)
    extra = dict(_SYNTH_EXTRA)
    for k in extra:
        if k in values:
            extra[k] = _coerce(values[k], extra[k]) if k != "lr_scales" else values[k]
            consumed.add(k)
    _check_unknown(values, consumed)
    try:
        cfg.validate()
        scales = [int(s) for s in str(extra["lr_scales"]).split(",") if s.strip()]
        if extra["artifact_split"] not in dp.SPLITS:
            raise ValueError(f"artifact_split must be one of {', '.join(dp.SPLITS)}")
        if not 0.0 <= extra["artifact_fraction"] <= 1.0:
            raise ValueError("artifact_fraction must lie in [0, 1]")
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    out = _out_dir(args)

    fields_ = dp.synth_generate(cfg)
    idx = dp.split_indices(len(fields_), cfg.val_fraction, cfg.test_fraction)
    if extra["artifact_fraction"] > 0:
        target = list(idx[extra["artifact_split"]])
        rects = dp.pick_artifact_rects(
            len(target), cfg.size, extra["artifact_fraction"], cfg.seed + 1000, extra["artifact_size"] or None
        )
        for j, rect in rects.items():
            i = target[j]
            fields_[i] = dp.inject_artifact(fields_[i], rect, extra["artifact_level"], seed=cfg.seed + i)
    bad = [i for i, f in enumerate(fields_) if not f.artifact and not dp.sample_filter(f)]
    if bad:
        raise CliError(EXIT_CONFIG, f"{len(bad)} generated fields fail the rain-fraction filter")
    try:
        counts = dp.write_corpus(fields_, out, cfg, scales)
    except OSError as e:
        raise CliError(EXIT_IO, f"writing corpus failed: {e}") from None
    _write_resolved(out, {"": {**asdict(cfg), **extra}})
    n_art = sum(f.artifact for f in fields_)
    print(" ".join(f"{k}={v}" for k, v in counts.items()) + f" artifacts={n_art}")
    return 0


def _train_configs(args, values: dict[str, str]):
    tc = TrainConfig()
    gen = GeneratorConfig()
    critic = CriticConfig()
    consumed: set = set()
    _apply(tc, values, consumed)
    for key, (which, attr) in _NET_KEYS.items():
        if key in values:
            target = gen if which == "gen" else critic
            setattr(target, attr, _coerce(values[key], getattr(target, attr)))
            consumed.add(key)
    if "scale" in values:
        gen.scale_factor = _coerce(values["scale"], 4)
        consumed.add("scale")
    _check_unknown(values, consumed)
    return tc, gen, critic


def cmd_train(args) -> int:
    values = read_config(args.config)
    for key, val in (("mode", args.mode), ("scale", args.scale), ("seed", args.seed), ("epochs", args.epochs)):
        if val is not None:
            values[key] = str(val)
    tc, gen, critic = _train_configs(args, values)
    corpus = Path(args.corpus)
    try:
        _, train_f = dp.load_split(corpus, "train")
        val_ids, val_f = dp.load_split(corpus, "validation")
    except (OSError, dp.FieldFormatError) as e:
        raise CliError(EXIT_IO if isinstance(e, OSError) else EXIT_CONFIG, f"bad corpus: {e}") from None
    if not train_f:
        raise CliError(EXIT_CONFIG, "corpus has no training fields")
    size = train_f[0].size
    critic.input_size = size
    try:
        tc.validate()
        gen.validate()
        if tc.mode == "wgan":
            critic.validate()
        train = dp.make_dataset(train_f, gen.scale_factor)
        val = dp.make_dataset(val_f, gen.scale_factor, "validation", val_ids) if val_f else None
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    out = _out_dir(args) / f"{tc.mode}_x{gen.scale_factor}"
    out.mkdir(parents=True, exist_ok=True)
    sections = {"train": asdict(tc), "generator": asdict(gen)}
    if tc.mode == "wgan":
        sections["critic"] = asdict(critic)
    _write_resolved(out, sections)
    try:
        run_training(train, tc, out, gen, critic if tc.mode == "wgan" else None, val)
    except TrainingDiverged as e:
        print(f"training diverged: {e}; last finite record: {e.last_record}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        raise CliError(EXIT_IO, f"training I/O failed: {e}") from None
    print(f"trained {tc.mode} x{gen.scale_factor} for {tc.epochs} epochs -> {out}")
    return 0


def cmd_infer(args) -> int:
    try:
        gen = load_network(args.checkpoint, role="generator")
    except (OSError, CheckpointError) as e:
        raise CliError(EXIT_SIZE, f"cannot load generator from {args.checkpoint}: {e}") from None
    try:
        ids, lr = dp.load_dir(args.lr_dir)
    except (OSError, dp.FieldFormatError) as e:
        raise CliError(EXIT_IO, f"cannot read fields: {e}") from None
    sizes = {f.grid.shape for f in lr}
    if len(sizes) > 1 or any(s[0] != s[1] for s in sizes):
        raise CliError(EXIT_SIZE, f"input fields must be square and equally sized, got {sorted(sizes)}")
    try:
        critic = load_network(args.checkpoint, role="critic")
    except CheckpointError:
        critic = None
    s = gen.config.scale_factor
    if critic is not None and sizes and next(iter(sizes))[0] * s != critic.config.input_size:
        raise CliError(EXIT_SIZE, f"x{s} output of {sorted(sizes)} does not match trained size {critic.config.input_size}")
    out = _out_dir(args)
    batch = 32
    for start in range(0, len(lr), batch):
        chunk = lr[start : start + batch]
        norm = np.stack([dp.normalize(f) for f in chunk])
        hr = dp.denormalize(infer(gen, norm))
        for j, f in enumerate(chunk):
            res = dp.PrecipField(hr[j], f.timestamp, f.pixel_km / s, False)
            try:
                dp.write_field(out / f"{ids[start + j]}.pfld", res)
            except OSError as e:
                raise CliError(EXIT_IO, f"write failed: {e}") from None
    _write_resolved(out, {"": {"checkpoint": args.checkpoint, "lr_dir": args.lr_dir, "scale": s}})
    print(f"inferred {len(lr)} fields at x{s} -> {out}")
    return 0


def _parse_preds(specs: list[str]) -> list[tuple[str, Path]]:
    out = []
    for s in specs or []:
        if "=" not in s:
            raise CliError(EXIT_CONFIG, f"--pred expects NAME=DIR, got {s!r}")
        name, d = s.split("=", 1)
        out.append((name, Path(d)))
    return out


def cmd_evaluate(args) -> int:
    preds = _parse_preds(args.pred)
    try:
        ids, truth = dp.load_dir(args.truth)
        loaded = [(name, *dp.load_dir(d)) for name, d in preds]
    except (OSError, dp.FieldFormatError) as e:
        raise CliError(EXIT_IO, f"cannot read fields: {e}") from None
    for name, pids, _ in loaded:
        if pids != ids:
            raise CliError(EXIT_IDS, f"ids of {name} do not match the truth directory")
    critic = None
    if args.critic:
        try:
            critic = load_network(args.critic, role="critic")
        except (OSError, CheckpointError) as e:
            raise CliError(EXIT_SIZE, f"cannot load critic: {e}") from None
        if truth and critic.config.input_size != truth[0].size:
            raise CliError(EXIT_SIZE, "critic input size does not match the truth fields")
    out = _out_dir(args)
    reports = []
    spectra = {}
    scores = {}
    truth_scores = ev.critic_scores(critic, truth) if critic is not None and truth else None
    if truth_scores is not None:
        scores["HR"] = truth_scores
    if len(truth) >= 2:
        spectra["HR"] = ev.spectrum_aggregate(truth)
    for name, _, flist in loaded:
        grids = []
        for f, t in zip(flist, truth):
            g = f.grid
            if g.shape != t.grid.shape:
                factor = t.grid.shape[0] // g.shape[0]
                if factor * g.shape[0] != t.grid.shape[0]:
                    raise CliError(EXIT_SIZE, f"{name}: field size {g.shape} incompatible with truth {t.grid.shape}")
                g = dp.upsample_nearest(g, factor)
            grids.append(g)
        rep = ev.evaluate_method(name, ids, grids, truth, critic, truth_scores)
        reports.append(rep)
        if len(grids) >= 2:
            spectra[name] = ev.spectrum_aggregate(grids)
        if critic is not None:
            scores[name] = rep.column("critic_score")
    try:
        ev.save_reports(reports, spectra, out)
        if critic is not None:
            ev.write_histogram_csv(scores, out / "critic_scores.csv")
    except OSError as e:
        raise CliError(EXIT_IO, f"write failed: {e}") from None
    _write_resolved(out, {"": {"truth": args.truth, "pred": ";".join(args.pred or []), "critic": args.critic or ""}})
    for rep in reports:
        agg = rep.aggregate()
        print(f"{rep.method}: " + " ".join(f"{k}={v:.4f}" for k, v in agg.items()))
    return 0


def cmd_rank(args) -> int:
    try:
        reports, _ = ev.read_report_csv(args.report)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read report: {e}") from None
    except ev.ReportFormatError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    if args.method:
        if args.method not in reports:
            raise CliError(EXIT_CONFIG, f"method {args.method!r} not in report")
        rep = reports[args.method]
    else:
        with_diff = [r for r in reports.values() if np.any(np.isfinite(r.column("critic_diff")))]
        if not with_diff:
            raise CliError(EXIT_CONFIG, "report has no critic differences")
        rep = next((r for r in with_diff if r.method == "WGAN"), with_diff[0])
    if args.k < 0:
        raise CliError(EXIT_CONFIG, "k must be non-negative")
    neg, pos, flagged = ev.rank_by_critic_difference(rep, args.k)
    if flagged:
        print(f"warning: only {len(neg)} rows with critic differences (k={args.k})", file=sys.stderr)
    for side, rows in (("negative", neg), ("positive", pos)):
        for i, r in enumerate(rows, 1):
            print(f"{side} {i} {r['id']} {r['critic_diff']:+.4f}")
    out = Path(args.out) if args.out else Path(args.report).with_name("ranking.csv")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        ev.write_ranking_csv(neg, pos, out)
    except OSError as e:
        raise CliError(EXIT_IO, f"write failed: {e}") from None
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="key=value configuration file")
    common.add_argument("--out", default=None, help="output directory (file for rank)")

    p = argparse.ArgumentParser(prog="precipgan", description="WGAN-GP precipitation downscaling toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--n", type=int, default=None, help="number of fields (overrides n_fields)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train SRCNN or WGAN")
    t.add_argument("--corpus", required=True)
    t.add_argument("--mode", choices=["srcnn", "wgan"], default=None)
    t.add_argument("--scale", type=int, choices=[2, 4, 8], default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="downscale LR fields with a trained generator")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--lr-dir", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", parents=[common], help="RMSE/CSI/spectra/critic scores against HR truth")
    e.add_argument("--truth", required=True)
    e.add_argument("--pred", action="append", default=[], metavar="NAME=DIR")
    e.add_argument("--critic", default=None, help="checkpoint holding a critic")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rank", parents=[common], help="rank fields by critic difference")
    r.add_argument("--report", required=True)
    r.add_argument("--k", type=int, default=3)
    r.add_argument("--method", default=None)
    r.set_defaults(func=cmd_rank)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
