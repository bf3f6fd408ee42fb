"""Precipitation fields: I/O, normalization, pairing, filtering and synthesis.

Field file layout (PFLD, little-endian)::

    magic "PFLD" | version u16 | H u32 | W u32 | timestamp i64 (epoch hours)
    | pixel_km f32 | artifact flag u8 | H*W float32 row-major

A corpus directory holds ``manifest.csv`` (filename,split,artifact) and the
files under ``<split>/hr/`` plus optional ``<split>/lr_x<f>/`` copies.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _accel

THRESHOLD_MM = 20.0
RAIN_MIN_MM = 0.4
RAIN_FRACTION = 0.20

FIELD_MAGIC = b"PFLD"
FIELD_VERSION = 1
_HEADER = struct.Struct("<4sHIIqfB")
_MAX_PIXELS = 1 << 26

SPLITS = ("train", "validation", "test")


class FieldFormatError(ValueError):
    pass


@dataclass
class PrecipField:
    grid: np.ndarray
    timestamp: int = 0
    pixel_km: float = 1.0
    artifact: bool = False

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise ValueError(f"field grid must be 2-D, got shape {self.grid.shape}")

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("field contains non-finite values")
        if np.any(self.grid < 0):
            raise ValueError("field contains negative precipitation")
        if self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError(f"field must be square, got {self.grid.shape}")


def _values(field_or_grid) -> np.ndarray:
    if isinstance(field_or_grid, PrecipField):
        return field_or_grid.grid
    return np.asarray(field_or_grid)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize(field_or_grid) -> np.ndarray:
    """Scale mm/hr to [0, 1] with a 20 mm/hr ceiling: ``min(R / 20, 1)``."""
    r = np.asarray(_values(field_or_grid), dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("normalize: non-finite precipitation values")
    if np.any(r < 0):
        raise ValueError("normalize: negative precipitation values")
    return np.minimum(r / THRESHOLD_MM, 1.0)


def denormalize(grid) -> np.ndarray:
    """Map normalized values back to mm/hr as float32, clamping to [0, 1] first."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    return (g * THRESHOLD_MM).astype(np.float32)


# ---------------------------------------------------------------------------
# resolution changes and filtering
# ---------------------------------------------------------------------------


def downsample(hr: PrecipField, factor: int) -> PrecipField:
    """Block-average ``hr`` over ``factor x factor`` cells."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    h, w = hr.grid.shape
    if h % factor or w % factor:
        raise ValueError(f"grid {h}x{w} not divisible by factor {factor}")
    grid = _accel.block_mean(hr.grid.astype(np.float64), factor)
    return PrecipField(grid, hr.timestamp, hr.pixel_km * factor, hr.artifact)


def upsample_nearest(grid: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)


def sample_filter(hr: PrecipField) -> bool:
    """Keep scenes where strictly more than 20% of pixels have >= 0.4 mm/hr."""
    g = _values(hr)
    wet = np.count_nonzero(g >= RAIN_MIN_MM)
    return wet / g.size > RAIN_FRACTION


# ---------------------------------------------------------------------------
# artifact injection
# ---------------------------------------------------------------------------


def inject_artifact(
    hr: PrecipField, rect: tuple[int, int, int, int], level: float, seed: int, jitter: float = 0.05
) -> PrecipField:
    """Overwrite ``rect = (row, col, h, w)`` with ``level`` plus seeded jitter (mm/hr)."""
    row, col, h, w = rect
    nh, nw = hr.grid.shape
    if min(row, col, h, w) < 0 or row + h > nh or col + w > nw:
        raise ValueError(f"rectangle {rect} outside {nh}x{nw} grid")
    grid = hr.grid.copy()
    if h == 0 or w == 0:
        return replace(hr, grid=grid)
    rng = np.random.default_rng(seed)
    patch = level + jitter * rng.standard_normal((h, w))
    grid[row : row + h, col : col + w] = np.maximum(patch, 0.0)
    return PrecipField(grid, hr.timestamp, hr.pixel_km, True)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    size: int = 128
    n_fields: int = 100
    band_fraction: float = 0.5
    speed_min: float = 0.5
    speed_max: float = 3.0
    # log-std of the multiplicative cellular texture; 0 gives smooth fields
    cell_density: float = 0.9
    spectral_slope: float = 3.0
    event_hours: int = 6
    peak_min: float = 6.0
    peak_max: float = 19.5
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    max_retries: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.size < 8:
            raise ValueError("size must be >= 8")
        if self.n_fields < 0:
            raise ValueError("n_fields must be >= 0")
        if not 0.0 <= self.band_fraction <= 1.0:
            raise ValueError("band_fraction must lie in [0, 1]")
        if self.speed_min < 0 or self.speed_max < self.speed_min:
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.cell_density < 0:
            raise ValueError("cell_density must be >= 0")
        if not 0 < self.peak_min <= self.peak_max < THRESHOLD_MM:
            raise ValueError("need 0 < peak_min <= peak_max < 20")
        if self.event_hours < 1:
            raise ValueError("event_hours must be >= 1")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction > 1:
            raise ValueError("invalid split fractions")


def _wavenumbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.fft.fftfreq(n) * n
    return np.meshgrid(k, k, indexing="ij")


def _powerlaw_noise(rng: np.random.Generator, n: int, slope: float) -> np.ndarray:
    """Unit-variance Gaussian field (spectral coefficients) with power ~ k**-slope."""
    ky, kx = _wavenumbers(n)
    k = np.hypot(kx, ky)
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** (-slope / 2.0)
    spec = np.fft.fft2(rng.standard_normal((n, n))) * amp
    g = np.fft.ifft2(spec).real
    return np.fft.fft2(g / g.std())


def _shifted(spec: np.ndarray, dy: float, dx: float) -> np.ndarray:
    n = spec.shape[0]
    ky, kx = _wavenumbers(n)
    phase = np.exp(-2j * np.pi * (ky * dy + kx * dx) / n)
    return np.fft.ifft2(spec * phase).real


def _envelope(rng: np.random.Generator, n: int, band: bool) -> dict:
    """Random shape parameters for one event's large-scale envelope."""
    if band:
        return {
            "band": True,
            "theta": rng.uniform(0, np.pi),
            "offset": rng.uniform(-0.25, 0.25) * n,
            "width": rng.uniform(0.05, 0.12) * n,
            "length": rng.uniform(0.6, 1.2) * n,
            "along": rng.uniform(-0.2, 0.2) * n,
            "background": rng.uniform(0.15, 0.35),
        }
    k = int(rng.integers(1, 4))
    return {
        "band": False,
        "centers": rng.uniform(0.15, 0.85, size=(k, 2)) * n,
        "sigmas": rng.uniform(0.15, 0.35, size=k) * n,
        "weights": rng.uniform(0.5, 1.0, size=k),
    }


def _evaluate_envelope(env: dict, n: int, dy: float, dx: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    yy = yy - dy
    xx = xx - dx
    if env["band"]:
        c = n / 2.0
        u = (xx - c) * np.cos(env["theta"]) + (yy - c) * np.sin(env["theta"]) - env["along"]
        v = -(xx - c) * np.sin(env["theta"]) + (yy - c) * np.cos(env["theta"]) - env["offset"]
        ridge = np.exp(-0.5 * (v / env["width"]) ** 2) * np.exp(-0.5 * (u / env["length"]) ** 2)
        return ridge + env["background"] * np.exp(-0.5 * (v / (3 * env["width"])) ** 2)
    out = np.zeros((n, n))
    for (cy, cx), s, w in zip(env["centers"], env["sigmas"], env["weights"]):
        out += w * np.exp(-0.5 * ((yy - cy) ** 2 + (xx - cx) ** 2) / s**2)
    return out


def _compose(env_grid: np.ndarray, texture: np.ndarray | None, dry_fraction: float, peak: float) -> np.ndarray:
    raw = env_grid if texture is None else env_grid * texture
    thr = np.quantile(raw, dry_fraction)
    wet = np.maximum(raw - thr, 0.0)
    pos = wet[wet > 0]
    if pos.size == 0:
        return wet
    q = np.quantile(pos, 0.998)
    return wet * (peak / q)


def synth_generate(cfg: SynthConfig) -> list[PrecipField]:
    """Seeded synthetic hourly precipitation fields.

    Fields come in events of up to ``event_hours`` consecutive hours. An event
    is either an elongated Gaussian ridge (band) or a cluster of broad blobs,
    multiplied by a lognormal texture whose log-field has a power-law spectrum
    of the configured slope; the whole pattern advects at a constant velocity
    during the event. Each field is shifted down to create dry areas and
    rescaled so its 99.8th percentile of wet pixels sits below 20 mm/hr.
    Fields failing :func:`sample_filter` are redrawn.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.size
    fields: list[PrecipField] = []
    hour = 0
    while len(fields) < cfg.n_fields:
        band = bool(rng.random() < cfg.band_fraction)
        length = int(rng.integers(1, cfg.event_hours + 1))
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        heading = rng.uniform(0, 2 * np.pi)
        vy, vx = speed * np.sin(heading), speed * np.cos(heading)
        for attempt in range(cfg.max_retries):
            env = _envelope(rng, n, band)
            spec = _powerlaw_noise(rng, n, cfg.spectral_slope) if cfg.cell_density > 0 else None
            dry = rng.uniform(0.1, 0.55)
            peak = rng.uniform(cfg.peak_min, cfg.peak_max)
            event = []
            for t in range(length):
                dy, dx = vy * t, vx * t
                tex = None
                if spec is not None:
                    s = cfg.cell_density
                    tex = np.exp(s * _shifted(spec, dy, dx) - 0.5 * s * s)
                grid = _compose(_evaluate_envelope(env, n, dy, dx), tex, dry, peak)
                event.append(PrecipField(grid, hour + t, 1.0))
            if all(sample_filter(f) for f in event):
                break
        else:
            raise RuntimeError(f"could not satisfy the rain-fraction filter after {cfg.max_retries} retries")
        for f in event[: cfg.n_fields - len(fields)]:
            fields.append(f)
        hour += length + int(rng.integers(1, 12))
    return fields


def split_counts(n: int, val_fraction: float, test_fraction: float) -> dict[str, int]:
    n_val = int(round(n * val_fraction))
    n_test = int(round(n * test_fraction))
    return {"train": n - n_val - n_test, "validation": n_val, "test": n_test}


def split_indices(n: int, val_fraction: float, test_fraction: float) -> dict[str, range]:
    """Contiguous, chronologically ordered train/validation/test ranges."""
    c = split_counts(n, val_fraction, test_fraction)
    a = c["train"]
    b = a + c["validation"]
    return {"train": range(0, a), "validation": range(a, b), "test": range(b, n)}


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    pairs: list[tuple[PrecipField, PrecipField]]
    split: str = "train"
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Normalized ``(lr[N,h,w], hr[N,H,W])`` float64 stacks."""
        if not self.pairs:
            return np.zeros((0, 0, 0)), np.zeros((0, 0, 0))
        lr = np.stack([normalize(p[0]) for p in self.pairs])
        hr = np.stack([normalize(p[1]) for p in self.pairs])
        return lr, hr


def make_dataset(hr_fields: list[PrecipField], factor: int, split: str = "train", ids=None) -> Dataset:
    pairs = [(downsample(f, factor), f) for f in hr_fields]
    ids = list(ids) if ids is not None else [f"{i:06d}" for i in range(len(hr_fields))]
    return Dataset(pairs, split, ids)


# ---------------------------------------------------------------------------
# field files and corpora
# ---------------------------------------------------------------------------


def write_field(path, f: PrecipField) -> None:
    h, w = f.grid.shape
    header = _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, h, w, int(f.timestamp), float(f.pixel_km), int(bool(f.artifact)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.grid, dtype="<f4").tobytes())


def read_field(path) -> PrecipField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FieldFormatError(f"{path}: truncated header")
    magic, version, h, w, ts, px, flag = _HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise FieldFormatError(f"{path}: bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise FieldFormatError(f"{path}: unsupported version {version}")
    if h * w > _MAX_PIXELS:
        raise FieldFormatError(f"{path}: dimensions {h}x{w} exceed limit")
    payload = raw[_HEADER.size :]
    if len(payload) != 4 * h * w:
        raise FieldFormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * h * w}")
    grid = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
    return PrecipField(grid, ts, px, bool(flag))


def write_corpus(fields: list[PrecipField], out_dir, cfg: SynthConfig, lr_scales=(4, 8)) -> dict[str, int]:
    """Write fields and LR copies under ``out_dir`` with a manifest; returns split counts."""
    out = Path(out_dir)
    idx = split_indices(len(fields), cfg.val_fraction, cfg.test_fraction)
    rows = []
    for split, rng_ in idx.items():
        (out / split / "hr").mkdir(parents=True, exist_ok=True)
        for s in lr_scales:
            if cfg.size % s == 0:
                (out / split / f"lr_x{s}").mkdir(parents=True, exist_ok=True)
        for i in rng_:
            name = f"f{i:06d}.pfld"
            f = fields[i]
            write_field(out / split / "hr" / name, f)
            for s in lr_scales:
                if cfg.size % s == 0:
                    write_field(out / split / f"lr_x{s}" / name, downsample(f, s))
            rows.append((name, split, int(f.artifact)))
    write_manifest(out / "manifest.csv", rows)
    return {k: len(v) for k, v in idx.items()}


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["filename", "split", "artifact"])
        wr.writerows(rows)


def read_manifest(path) -> list[tuple[str, str, int]]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or [c.strip() for c in rd.fieldnames] != ["filename", "split", "artifact"]:
            raise FieldFormatError(f"{path}: manifest header must be filename,split,artifact")
        rows = []
        for r in rd:
            if r["split"] not in SPLITS:
                raise FieldFormatError(f"{path}: unknown split {r['split']!r}")
            rows.append((r["filename"], r["split"], int(r["artifact"])))
    return rows


def load_split(corpus_dir, split: str) -> tuple[list[str], list[PrecipField]]:
    """HR fields of one split, in manifest order; ids are filename stems."""
    corpus = Path(corpus_dir)
    ids, fields = [], []
    for name, sp, _ in read_manifest(corpus / "manifest.csv"):
        if sp != split:
            continue
        ids.append(os.path.splitext(name)[0])
        fields.append(read_field(corpus / sp / "hr" / name))
    return ids, fields


def load_dir(path) -> tuple[list[str], list[PrecipField]]:
    """Every ``*.pfld`` file of a directory, sorted by name."""
    files = sorted(Path(path).glob("*.pfld"))
    return [p.stem for p in files], [read_field(p) for p in files]


def pick_artifact_rects(n_fields: int, size: int, fraction: float, seed: int, rect_size: int | None = None):
    """Choose ``ceil(fraction * n)`` field indices and a rectangle for each."""
    rng = np.random.default_rng(seed)
    k = int(math.ceil(fraction * n_fields)) if n_fields else 0
    chosen = sorted(rng.choice(n_fields, size=k, replace=False).tolist()) if k else []
    side = rect_size or max(2, size // 4)
    rects = {}
    for i in chosen:
        r = int(rng.integers(0, size - side + 1))
        c = int(rng.integers(0, size - side + 1))
        rects[i] = (r, c, side, side)
    return rects
