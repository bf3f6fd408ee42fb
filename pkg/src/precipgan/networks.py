"""Generator and critic networks, initialization, and the RDWN checkpoint format.

RDWN record layout (all little-endian)::

    magic      4 bytes  b"RDWN"
    version    u16      currently 1
    role       u8       0 = generator, 1 = critic, 2 = optimizer state
    config     u32 length + UTF-8 JSON object
    count      u32      number of tensors
    tensors    count x (name_len u16, name UTF-8, rank u8, dims u32 x rank,
                        prod(dims) float64 values, row-major)

A file may hold several records back to back; training checkpoints store the
generator first, so any checkpoint can be opened as a generator directly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"RDWN"
VERSION = 1
ROLES = {"generator": 0, "critic": 1, "optimizer": 2}
_ROLE_NAMES = {v: k for k, v in ROLES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    scale_factor: int = 4
    channels: list = field(default_factory=lambda: [64, 32])
    kernel_sizes: list = field(default_factory=lambda: [9, 5, 5])
    upsample_mode: str = "bilinear"
    leaky_slope: float = 0.2

    def validate(self) -> None:
        if self.scale_factor not in (2, 4, 8):
            raise ValueError(f"scale_factor must be 2, 4 or 8, got {self.scale_factor}")
        if len(self.kernel_sizes) != len(self.channels) + 1 or len(self.kernel_sizes) != 3:
            raise ValueError("generator needs three conv layers: len(kernel_sizes) == len(channels) + 1 == 3")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd and positive, got {self.kernel_sizes}")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel counts must be positive, got {self.channels}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample mode {self.upsample_mode!r}")


@dataclass
class CriticConfig:
    input_size: int = 128
    widths: list = field(default_factory=lambda: [64, 128, 256])
    leaky_slope: float = 0.2
    kernel_size: int = 4

    def validate(self) -> None:
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid critic widths {self.widths}")
        if self.input_size % (2 ** len(self.widths)) != 0:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2**{len(self.widths)}"
            )

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** len(self.widths)


@dataclass
class NetworkParams:
    role: str
    config: GeneratorConfig | CriticConfig
    tensors: dict[str, Tensor]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.role,
            type(self.config)(**json.loads(json.dumps(asdict(self.config)))),
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_record(buf, self.role, asdict(self.config), {k: v.data for k, v in self.tensors.items()})
        return buf.getvalue()


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_generator(cfg: GeneratorConfig, seed: int) -> NetworkParams:
    """Seeded He-normal kernels and zero biases for the three-layer generator."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    chans = [1] + list(cfg.channels) + [1]
    tensors: dict[str, Tensor] = {}
    for i, k in enumerate(cfg.kernel_sizes):
        cin, cout = chans[i], chans[i + 1]
        tensors[f"conv{i + 1}.kernel"] = Tensor(_he(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        tensors[f"conv{i + 1}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
    return NetworkParams("generator", cfg, tensors)


def build_critic(cfg: CriticConfig, seed: int) -> NetworkParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    cin = 1
    k = cfg.kernel_size
    for i, w in enumerate(cfg.widths):
        tensors[f"conv{i + 1}.kernel"] = Tensor(_he(rng, (w, cin, k, k), cin * k * k), requires_grad=True)
        tensors[f"conv{i + 1}.bias"] = Tensor(np.zeros(w), requires_grad=True)
        cin = w
    nfeat = cin * cfg.feature_size**2
    # linear head: unit-gain init (no activation follows)
    tensors["linear.weight"] = Tensor(rng.standard_normal((nfeat, 1)) / np.sqrt(nfeat), requires_grad=True)
    tensors["linear.bias"] = Tensor(np.zeros(1), requires_grad=True)
    return NetworkParams("critic", cfg, tensors)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def generator_forward(params: NetworkParams, lr_batch) -> Tensor:
    """Upsample ``lr_batch[B,1,h,w]`` then conv-lrelu-conv-lrelu-conv."""
    if params.role != "generator":
        raise ValueError(f"expected generator params, got role {params.role!r}")
    cfg: GeneratorConfig = params.config
    x = _as_input(lr_batch)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"generator input must be [B,1,h,w], got {x.shape}")
    h = ad.upsample(x, cfg.scale_factor, cfg.upsample_mode)
    t = params.tensors
    n = len(cfg.kernel_sizes)
    for i, k in enumerate(cfg.kernel_sizes):
        h = ad.conv2d(h, t[f"conv{i + 1}.kernel"], t[f"conv{i + 1}.bias"], stride=1, padding=k // 2)
        if i < n - 1:
            h = ad.leaky_relu(h, cfg.leaky_slope)
    return h


def critic_forward(params: NetworkParams, field_batch) -> Tensor:
    """Scalar score per sample, shape ``[B]``."""
    if params.role != "critic":
        raise ValueError(f"expected critic params, got role {params.role!r}")
    cfg: CriticConfig = params.config
    x = _as_input(field_batch)
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ValueError(f"critic expects [B,1,{cfg.input_size},{cfg.input_size}], got {x.shape}")
    t = params.tensors
    h = x
    pad = (cfg.kernel_size - 2) // 2
    for i in range(len(cfg.widths)):
        h = ad.conv2d(h, t[f"conv{i + 1}.kernel"], t[f"conv{i + 1}.bias"], stride=2, padding=pad)
        h = ad.leaky_relu(h, cfg.leaky_slope)
    b = x.shape[0]
    flat = ad.reshape(h, (b, -1))
    # per-row product and sum rather than gemv: BLAS may round rows differently,
    # and duplicated samples must score identically
    w = ad.broadcast_to(ad.reshape(t["linear.weight"], (1, flat.shape[1])), flat.shape)
    out = ad.sum_to(ad.mul(flat, w), (b, 1))
    out = ad.add(out, ad.broadcast_to(ad.reshape(t["linear.bias"], (1, 1)), out.shape))
    return ad.reshape(out, (b,))


def infer(params: NetworkParams, lr_norm: np.ndarray) -> np.ndarray:
    """Graph-free generator pass on ``[B,h,w]`` normalized input, clamped to [0, 1]."""
    with ad.no_grad():
        out = generator_forward(params, lr_norm[:, None]).data[:, 0]
    return np.clip(out, 0.0, 1.0)


def score(params: NetworkParams, fields_norm: np.ndarray, batch: int = 64) -> np.ndarray:
    """Graph-free critic scores for ``[N,H,W]`` normalized fields."""
    out = []
    with ad.no_grad():
        for s in range(0, len(fields_norm), batch):
            out.append(critic_forward(params, fields_norm[s : s + batch, None]).data)
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_record(f: BinaryIO, role: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    f.write(MAGIC)
    f.write(struct.pack("<HB", VERSION, ROLES[role]))
    f.write(struct.pack("<I", len(cfg)))
    f.write(cfg)
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint record")
    return b


def read_record(f: BinaryIO) -> tuple[str, dict, dict[str, np.ndarray]] | None:
    """Next record from ``f``; ``None`` at a clean end of file."""
    magic = f.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, role = struct.unpack("<HB", _read_exact(f, 3))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if role not in _ROLE_NAMES:
        raise CheckpointError(f"unknown role tag {role}")
    (clen,) = struct.unpack("<I", _read_exact(f, 4))
    config = json.loads(_read_exact(f, clen).decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(f, 1))
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    return _ROLE_NAMES[role], config, tensors


def params_from_record(role: str, config: dict, tensors: dict[str, np.ndarray]) -> NetworkParams:
    if role == "generator":
        cfg = GeneratorConfig(**config)
    elif role == "critic":
        cfg = CriticConfig(**config)
    else:
        raise CheckpointError(f"record role {role!r} is not a network")
    cfg.validate()
    expected = build_generator(cfg, 0) if role == "generator" else build_critic(cfg, 0)
    for name, t in expected.tensors.items():
        if name not in tensors or tensors[name].shape != t.shape:
            raise CheckpointError(f"tensor {name!r} missing or mis-shaped in checkpoint")
    return NetworkParams(role, cfg, {k: Tensor(tensors[k], requires_grad=True) for k in expected.tensors})


def save_network(params: NetworkParams, path) -> None:
    with open(path, "wb") as f:
        f.write(params.to_bytes())


def load_network(path, role: str | None = None) -> NetworkParams:
    """First network record in ``path`` (or the first with the given role)."""
    with open(path, "rb") as f:
        while True:
            rec = read_record(f)
            if rec is None:
                break
            if rec[0] == "optimizer":
                continue
            if role is None or rec[0] == role:
                return params_from_record(*rec)
    raise CheckpointError(f"no {role or 'network'} record in {path}")
