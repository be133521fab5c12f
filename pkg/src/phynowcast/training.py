"""Losses, the optimisation loop and the checkpoint archive."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, TrainingDivergedError
from .evalkit import threshold_truth
from .phydnet import ModelConfig, PhyDNet, PredictionBundle, stack_intensity

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "phynowcast-ckpt/1"
HISTORY_COLUMNS = ("epoch", "split", "image_loss", "icl_loss", "moment_loss", "total")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)

__all__ = [
    "threshold_truth", "icloss", "LossBreakdown", "sample_loss", "dataset_loss",
    "TrainConfig", "train", "save_checkpoint", "load_checkpoint",
]


def icloss(logits: torch.Tensor, truth: torch.Tensor, class_weight: float = 5.0) -> torch.Tensor:
    """Mean per-pixel cross-entropy with the severe-class terms scaled by ``class_weight``.

    ``logits`` is ``(B, 2, H, W)``; ``truth`` is a binary ``(B, H, W)`` or
    ``(B, 1, H, W)`` map.  Unlike a weighted ``CrossEntropyLoss`` the mean is
    taken over pixels, not over summed weights.
    """
    if truth.dim() == logits.dim():
        truth = truth.squeeze(1)
    if logits.shape[0] != truth.shape[0] or logits.shape[2:] != truth.shape[1:] or logits.shape[1] != 2:
        raise DimensionError(f"logits {tuple(logits.shape)} do not match truth {tuple(truth.shape)}")
    target = truth.long()
    nll = F.cross_entropy(logits, target, reduction="none")
    weight = torch.where(target == 1, torch.as_tensor(float(class_weight), dtype=nll.dtype), torch.ones_like(nll))
    return (weight * nll).mean()


@dataclass
class LossBreakdown:
    image_loss: torch.Tensor
    icl_loss: torch.Tensor
    moment_loss: torch.Tensor
    lambda_moment: float = 1.0

    @property
    def total(self) -> torch.Tensor:
        return self.image_loss + self.icl_loss + self.lambda_moment * self.moment_loss

    def as_floats(self) -> dict[str, float]:
        return {"image_loss": float(self.image_loss.detach()), "icl_loss": float(self.icl_loss.detach()),
                "moment_loss": float(self.moment_loss.detach()), "total": float(self.total.detach())}


def sample_loss(predictions: list[PredictionBundle], truths: torch.Tensor, config: ModelConfig,
                moment_loss: torch.Tensor | float = 0.0, lambda_moment: float = 1.0) -> LossBreakdown:
    """Image MSE and ICLoss averaged over lead times, plus the moment penalty.

    ``truths`` is ``(B, tau_out, H, W)``; batch entries are averaged.
    """
    if len(predictions) != truths.shape[1]:
        raise DimensionError(f"{len(predictions)} predictions for {truths.shape[1]} targets")
    pred = stack_intensity(predictions)
    image = F.mse_loss(pred, truths.to(pred.dtype))
    icl = torch.zeros((), dtype=pred.dtype)
    if config.icloss_enabled:
        terms = []
        for j, bundle in enumerate(predictions):
            target = threshold_truth(truths[:, j], config.severe_threshold_dbz)
            terms.append(icloss(bundle.logits, target, config.class_weight))
        icl = torch.stack(terms).mean()
    moment = torch.as_tensor(moment_loss, dtype=pred.dtype)
    return LossBreakdown(image, icl, moment, lambda_moment)


def dataset_loss(breakdowns: list[LossBreakdown]) -> dict[str, float]:
    """Average of per-sample losses (each already averaged over lead times)."""
    if not breakdowns:
        raise ValueError("no samples")
    rows = [b.as_floats() for b in breakdowns]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    lambda_moment: float = 1.0
    teacher_forcing: bool = False
    device: str = "cpu"
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("learning_rate", "epochs", "batch_size", "threads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lambda_moment < 0:
            raise ValueError("lambda_moment must be non-negative")
        if self.device != "cpu":
            raise ValueError("only the cpu device is supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: PhyDNet
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None

    def history_csv(self, path=None) -> str:
        return write_history(self.history, path)


def write_history(history, path=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["epoch"], row["split"]] + [f"{row[c]:.8f}" for c in HISTORY_COLUMNS[2:]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def batch_loss(model: PhyDNet, batch: torch.Tensor, cfg: TrainConfig) -> LossBreakdown:
    tau_in = model.config.tau_in
    targets = batch[:, tau_in:]
    teacher = targets[:, :-1] if cfg.teacher_forcing else None
    preds = model.forecast(batch[:, :tau_in], targets.shape[1], teacher=teacher)
    return sample_loss(preds, targets, model.config, model.phycell.bank.moment_loss(), cfg.lambda_moment)


def _evaluate_loss(model, windows, cfg) -> dict[str, float]:
    model.eval()
    sums: dict[str, float] = {}
    with torch.no_grad():
        for start in range(0, len(windows), cfg.batch_size):
            batch = torch.as_tensor(windows[start:start + cfg.batch_size], dtype=model.dtype)
            row = batch_loss(model, batch, cfg).as_floats()
            for k, v in row.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
    return {k: v / len(windows) for k, v in sums.items()}


def train(model: PhyDNet, train_windows: np.ndarray, config: TrainConfig,
          val_windows: np.ndarray | None = None, out_dir=None, progress=None) -> TrainResult:
    """Adam on the total loss over ``(N, tau_in + tau_out, H, W)`` windows.

    Deterministic for a fixed seed.  Writes ``checkpoint.zip`` and
    ``history.csv`` to ``out_dir`` when given.
    """
    train_windows = np.asarray(train_windows)
    if train_windows.ndim != 4 or len(train_windows) == 0:
        raise ValueError("training split is empty")
    torch.manual_seed(config.seed)
    torch.set_num_threads(config.threads)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    result = TrainResult(model)

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(train_windows))
        sums: dict[str, float] = {}
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            batch = torch.as_tensor(train_windows[idx], dtype=model.dtype)
            losses = batch_loss(model, batch, config)
            total = losses.total
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: {losses.as_floats()}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for k, v in losses.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        row = {"epoch": epoch, "split": "train", **{k: v / len(order) for k, v in sums.items()}}
        result.history.append(row)
        log.info("epoch %d train %s", epoch, row)
        if val_windows is not None and len(val_windows):
            vrow = {"epoch": epoch, "split": "validation", **_evaluate_loss(model, val_windows, config)}
            result.history.append(vrow)
            log.info("epoch %d validation %s", epoch, vrow)
        if progress is not None:
            progress(epoch, result.history)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(out / "checkpoint.zip", model, config)
        write_history(result.history, out / "history.csv")
    return result


# -- checkpoint archive -----------------------------------------------------


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model: PhyDNet, train_config: TrainConfig | None = None) -> Path:
    """Zip archive: ``meta.json`` plus one little-endian float32 blob per parameter."""
    path = Path(path)
    state = model.state_dict()
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "arrays": [{"name": k, "shape": list(v.shape), "dtype": "<f4"} for k, v in state.items()],
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name, tensor in state.items():
            blob = tensor.detach().cpu().numpy().astype("<f4").tobytes()
            _zip_write(zf, f"arrays/{name}", blob)
    return path


def load_checkpoint(path, dtype=torch.float32):
    """Returns ``(model, train_config_or_None)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        state = {}
        for entry in meta["arrays"]:
            flat = np.frombuffer(zf.read(f"arrays/{entry['name']}"), dtype="<f4")
            expected = math.prod(entry["shape"])
            if flat.size != expected:
                raise ValueError(f"array {entry['name']} has {flat.size} values, expected {expected}")
            state[entry["name"]] = torch.from_numpy(flat.reshape(entry["shape"]).copy())
    model = PhyDNet(ModelConfig.from_dict(meta["model_config"])).to(dtype)
    model.load_state_dict(state)
    tc = meta.get("train_config")
    return model, (TrainConfig.from_dict(tc) if tc else None)
