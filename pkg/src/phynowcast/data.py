"""Radar frames, rainy flags, situation splitting, sample windows and synthetic data."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InfeasibleSplitError

DELTA = timedelta(minutes=10)
SITUATION_GAP = timedelta(hours=24)
DEFAULT_RATIOS = (0.72, 0.127, 0.153)
SPLIT_NAMES = ("train", "validation", "test")
TIME_FORMAT = "%Y%m%d%H%M"
INDEX_NAME = "index.csv"
MANIFEST_NAME = "split.json"
METADATA_NAME = "metadata.json"


def dbz_byte_to_mldbz(raw):
    """Map 8-bit radar bytes (0..255 <-> 0..60 dBZ) to MLdBZ floats in [0, 1]."""
    arr = np.asarray(raw)
    if np.any(arr < 0) or np.any(arr > 255):
        raise ValueError("raw values must lie in [0, 255]")
    out = arr / 255.0
    return float(out) if out.ndim == 0 else out


def mldbz_to_byte(values) -> np.ndarray:
    return np.rint(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def dbz_to_mldbz(dbz: float) -> float:
    return dbz / 60.0


@dataclass
class RadarFrame:
    timestamp: datetime
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"frame must be 2-D, got shape {self.values.shape}")
        if self.values.min(initial=0.0) < 0.0 or self.values.max(initial=0.0) > 1.0:
            raise ValueError("frame values must lie in [0, 1] MLdBZ")


def is_rainy(frame) -> bool:
    """More than 7% of the area non-zero, or more than 1% above 24 dBZ."""
    values = frame.values if isinstance(frame, RadarFrame) else np.asarray(frame, dtype=np.float64)
    n = values.size
    wet = np.count_nonzero(values > 0.0) / n
    heavy = np.count_nonzero(values > dbz_to_mldbz(24.0)) / n
    return bool(wet > 0.07 or heavy > 0.01)


@dataclass
class PrecipSituation:
    timestamps: list[datetime]

    @property
    def start(self) -> datetime:
        return self.timestamps[0]

    @property
    def end(self) -> datetime:
        return self.timestamps[-1]


def split_situations(rainy_timestamps, gap: timedelta = SITUATION_GAP) -> list[PrecipSituation]:
    """Greedy scan; a gap of ``gap`` or more between rainy frames starts a new situation."""
    situations: list[PrecipSituation] = []
    prev = None
    for ts in rainy_timestamps:
        if prev is not None and ts <= prev:
            raise ValueError("timestamps must be sorted and unique")
        if prev is None or ts - prev >= gap:
            situations.append(PrecipSituation([]))
        situations[-1].timestamps.append(ts)
        prev = ts
    return situations


@dataclass
class DatasetSplit:
    train: list[PrecipSituation]
    validation: list[PrecipSituation]
    test: list[PrecipSituation]
    seed: int = 0

    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def get(self, name: str) -> list[PrecipSituation]:
        if name not in SPLIT_NAMES:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, name)

    def verify(self) -> None:
        """Each timestamp sits in one situation; distinct situations are 24 h apart."""
        owner: dict[datetime, tuple[str, int]] = {}
        for name in SPLIT_NAMES:
            for idx, sit in enumerate(self.get(name)):
                for ts in sit.timestamps:
                    if ts in owner:
                        raise ValueError(f"timestamp {ts} appears in {owner[ts]} and {(name, idx)}")
                    owner[ts] = (name, idx)
        stamps = sorted(owner)
        for a, b in zip(stamps, stamps[1:]):
            if owner[a] != owner[b] and b - a < SITUATION_GAP:
                raise ValueError(f"situations closer than 24 h at {a} / {b}")


def largest_remainder(n: int, ratios) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def assign_splits(situations, ratios=DEFAULT_RATIOS, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then a contiguous partition sized by largest remainder.

    Splits with a positive ratio that would round to zero situations borrow
    one from the currently largest split.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(situations)
    nonzero = sum(r > 0 for r in ratios)
    if n < nonzero:
        raise InfeasibleSplitError(f"{n} situations cannot fill {nonzero} non-empty splits")
    counts = largest_remainder(n, ratios)
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [situations[i] for i in order]
    a, b = counts[0], counts[0] + counts[1]
    return DatasetSplit(shuffled[:a], shuffled[a:b], shuffled[b:], seed)


@dataclass(frozen=True)
class Sample:
    """Timestamps of one ``tau_in + tau_out`` window; frames live in a store."""

    timestamps: tuple[datetime, ...]
    tau_in: int

    @property
    def inputs(self) -> tuple[datetime, ...]:
        return self.timestamps[: self.tau_in]

    @property
    def targets(self) -> tuple[datetime, ...]:
        return self.timestamps[self.tau_in:]

    @property
    def anchor(self) -> datetime:
        return self.timestamps[self.tau_in - 1]


def make_samples(situation, tau_in: int, tau_out: int, delta: timedelta = DELTA) -> list[Sample]:
    """Every full window with exact ``delta`` spacing inside the situation."""
    stamps = situation.timestamps if isinstance(situation, PrecipSituation) else list(situation)
    length = tau_in + tau_out
    out = []
    run_start = 0
    for i in range(len(stamps)):
        if i > 0 and stamps[i] - stamps[i - 1] != delta:
            run_start = i
        if i - run_start + 1 >= length:
            out.append(Sample(tuple(stamps[i - length + 1: i + 1]), tau_in))
    return out


# -- synthetic data ---------------------------------------------------------


@dataclass
class SynthConfig:
    grid: int = 64
    length: int = 500
    blobs: int = 4
    velocity: tuple[float, float] = (1.0, 0.0)
    diffusion: float = 0.0
    noise: float = 0.0
    sigma_range: tuple[float, float] = (2.5, 5.0)
    amplitude_range: tuple[float, float] = (0.4, 1.0)
    situations: int = 1
    start: datetime = datetime(2020, 1, 1, tzinfo=timezone.utc)
    seed: int = 0

    def validate(self) -> None:
        if self.grid < 4 or self.grid % 4:
            raise ValueError(f"grid must be a positive multiple of 4, got {self.grid}")
        if self.length < 1 or self.blobs < 0 or self.situations < 1:
            raise ValueError("length and situations must be >= 1, blobs >= 0")
        if self.situations > self.length:
            raise ValueError("more situations than frames")
        if self.diffusion < 0 or self.noise < 0:
            raise ValueError("diffusion and noise must be non-negative")


@dataclass
class SynthDataset:
    timestamps: list[datetime]
    frames: np.ndarray  # (T, H, W) uint8
    metadata: dict = field(default_factory=dict)

    def values(self, i: int) -> np.ndarray:
        return dbz_byte_to_mldbz(self.frames[i])


def synth_timestamps(cfg: SynthConfig) -> list[datetime]:
    """10-minute cadence, broken into ``situations`` runs separated by two dry days."""
    bounds = np.linspace(0, cfg.length, cfg.situations + 1).round().astype(int)
    stamps = []
    t = cfg.start
    for s in range(cfg.situations):
        for _ in range(bounds[s], bounds[s + 1]):
            stamps.append(t)
            t = t + DELTA
        t = t + timedelta(days=2)
    return stamps


def synth_advection_dataset(cfg: SynthConfig | None = None, **kwargs) -> SynthDataset:
    """Gaussian blobs translating at a constant velocity (pixels per 10 min).

    Blobs live on a torus larger than the grid by a margin of several widths,
    so they leave and re-enter smoothly.  With diffusion ``D`` the squared
    width grows by ``2 D`` per step and the peak shrinks to conserve mass.
    """
    cfg = cfg or SynthConfig(**kwargs)
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    g = cfg.grid
    margin = math.ceil(4.0 * cfg.sigma_range[1])
    period = g + 2 * margin
    pos0 = rng.uniform(-margin, g + margin, size=(cfg.blobs, 2))
    sigma0 = rng.uniform(*cfg.sigma_range, size=cfg.blobs)
    amp0 = rng.uniform(*cfg.amplitude_range, size=cfg.blobs)
    vel = np.asarray(cfg.velocity, dtype=np.float64)
    xs = np.arange(g, dtype=np.float64)

    frames = np.empty((cfg.length, g, g), dtype=np.uint8)
    for t in range(cfg.length):
        field_ = np.zeros((g, g))
        var = sigma0**2 + 2.0 * cfg.diffusion * t
        amp = amp0 * sigma0**2 / var
        pos = np.mod(pos0 + margin + vel * t, period) - margin
        for b in range(cfg.blobs):
            gx = np.exp(-((xs - pos[b, 0]) ** 2) / (2 * var[b]))
            gy = np.exp(-((xs - pos[b, 1]) ** 2) / (2 * var[b]))
            field_ += amp[b] * np.outer(gx, gy)
        if cfg.noise:
            field_ += rng.normal(0.0, cfg.noise, size=field_.shape)
        frames[t] = mldbz_to_byte(field_)

    metadata = {
        "grid": g,
        "length": cfg.length,
        "velocity": vel.tolist(),
        "diffusion": cfg.diffusion,
        "noise": cfg.noise,
        "blobs": cfg.blobs,
        "situations": cfg.situations,
        "seed": cfg.seed,
        "blob_positions": pos0.tolist(),
        "blob_sigmas": sigma0.tolist(),
        "blob_amplitudes": amp0.tolist(),
    }
    return SynthDataset(synth_timestamps(cfg), frames, metadata)


def persistence_windows(frames: np.ndarray, tau_in: int, tau_out: int) -> np.ndarray:
    """All contiguous ``tau_in + tau_out`` windows of a ``(T, H, W)`` stream."""
    length = tau_in + tau_out
    return np.stack([frames[i:i + length] for i in range(len(frames) - length + 1)])


# -- on-disk layout ---------------------------------------------------------


def format_ts(ts: datetime) -> str:
    return ts.strftime(TIME_FORMAT)


def parse_ts(text: str) -> datetime:
    return datetime.strptime(text, TIME_FORMAT).replace(tzinfo=timezone.utc)


def write_dataset(out_dir, timestamps, frames: np.ndarray, metadata: dict | None = None) -> Path:
    """Write ``YYYYMMDDHHMM.png`` frames plus ``index.csv`` (timestamp, rainy)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / INDEX_NAME, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "rainy"])
        for ts, frame in zip(timestamps, frames):
            Image.fromarray(np.asarray(frame, dtype=np.uint8), mode="L").save(out / f"{format_ts(ts)}.png")
            writer.writerow([format_ts(ts), int(is_rainy(dbz_byte_to_mldbz(frame)))])
    if metadata is not None:
        (out / METADATA_NAME).write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return out


def read_index(data_dir) -> list[tuple[datetime, bool]]:
    path = Path(data_dir) / INDEX_NAME
    if not path.exists():
        raise FileNotFoundError(f"missing index file {path}")
    with open(path, newline="") as fh:
        return [(parse_ts(row["timestamp"]), bool(int(row["rainy"]))) for row in csv.DictReader(fh)]


class FrameStore:
    """Lazily loaded PNG frames keyed by timestamp, as MLdBZ float32 arrays."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self._cache: dict[datetime, np.ndarray] = {}

    def __getitem__(self, ts: datetime) -> np.ndarray:
        if ts not in self._cache:
            with Image.open(self.data_dir / f"{format_ts(ts)}.png") as img:
                raw = np.asarray(img.convert("L"), dtype=np.uint8)
            self._cache[ts] = (raw / 255.0).astype(np.float32)
        return self._cache[ts]

    def sample_array(self, sample: Sample) -> np.ndarray:
        return np.stack([self[ts] for ts in sample.timestamps])

    def stack(self, samples) -> np.ndarray:
        return np.stack([self.sample_array(s) for s in samples])


def write_manifest(path, split: DatasetSplit, ratios) -> Path:
    rows = []
    for name in SPLIT_NAMES:
        for sit in split.get(name):
            rows.append({"split": name, "start": format_ts(sit.start), "end": format_ts(sit.end),
                         "timestamps": [format_ts(t) for t in sit.timestamps]})
    rows.sort(key=lambda r: r["start"])
    doc = {"seed": split.seed, "ratios": list(ratios), "counts": dict(zip(SPLIT_NAMES, split.counts())),
           "situations": rows}
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def read_manifest(path) -> DatasetSplit:
    doc = json.loads(Path(path).read_text())
    parts: dict[str, list] = {name: [] for name in SPLIT_NAMES}
    for row in doc["situations"]:
        parts[row["split"]].append(PrecipSituation([parse_ts(t) for t in row["timestamps"]]))
    split = DatasetSplit(parts["train"], parts["validation"], parts["test"], doc["seed"])
    split.verify()
    return split


def split_samples(situations, tau_in: int, tau_out: int) -> list[Sample]:
    return [s for sit in situations for s in make_samples(sit, tau_in, tau_out)]
