"""Verification metrics, per-lead-time reports and figures."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

DEFAULT_THRESHOLDS = (8.0, 40.0)
METRICS = ("mae", "mse", "ssim", "ks")


def threshold_truth(frame, threshold_dbz: float = 40.0):
    """Binary map of pixels strictly above ``threshold_dbz`` (frame in MLdBZ)."""
    if not 0 < threshold_dbz <= 60:
        raise ValueError(f"threshold must lie in (0, 60] dBZ, got {threshold_dbz}")
    return frame > threshold_dbz / 60.0


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return pred, truth


def contingency(pred, truth, threshold_dbz: float) -> tuple[int, int, int]:
    """(hits, misses, false alarms) of the thresholded masks."""
    pred, truth = _pair(pred, truth)
    p = threshold_truth(pred, threshold_dbz)
    t = threshold_truth(truth, threshold_dbz)
    return int(np.sum(p & t)), int(np.sum(~p & t)), int(np.sum(p & ~t))


def csi(pred, truth, threshold_dbz: float) -> float:
    """Critical success index; 1.0 when neither mask has any pixel."""
    hits, misses, false_alarms = contingency(pred, truth, threshold_dbz)
    total = hits + misses + false_alarms
    return 1.0 if total == 0 else hits / total


def standard_errors(pred, truth) -> tuple[float, float]:
    pred, truth = _pair(pred, truth)
    diff = pred - truth
    return float(np.mean(np.abs(diff))), float(np.mean(diff**2))


def ks_distance(pred, truth) -> float:
    """Sup-norm distance between the empirical CDFs of the pixel intensities."""
    pred, truth = _pair(pred, truth)
    a = np.sort(pred.ravel())
    b = np.sort(truth.ravel())
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = (size - 1) / 2
    g = np.exp(-((np.arange(size) - r) ** 2) / (2 * sigma**2))
    return g / g.sum()


def ssim(pred, truth, *, raw: bool = False, window: int = 11, sigma: float = 1.5,
         data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully contained Gaussian windows.

    The structural term can go negative for anticorrelated frames; the
    default return is clamped into [0, 1], ``raw=True`` gives the mean as is.
    """
    pred, truth = _pair(pred, truth)
    if pred.ndim != 2 or min(pred.shape) < window:
        raise ValueError(f"frame {pred.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    pad = (window - 1) // 2

    def blur(x):
        y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[pad:-pad, pad:-pad] if pad else y

    mu_p, mu_t = blur(pred), blur(truth)
    var_p = blur(pred * pred) - mu_p**2
    var_t = blur(truth * truth) - mu_t**2
    cov = blur(pred * truth) - mu_p * mu_t
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / ((mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2))
    value = float(np.mean(s))
    return value if raw else min(1.0, max(0.0, value))


def frame_metrics(pred, truth, thresholds=DEFAULT_THRESHOLDS) -> dict[str, float]:
    mae, mse = standard_errors(pred, truth)
    row = {"mae": mae, "mse": mse, "ssim": ssim(pred, truth), "ks": ks_distance(pred, truth)}
    for thr in thresholds:
        row[csi_key(thr)] = csi(pred, truth, thr)
    return row


def csi_key(threshold_dbz: float) -> str:
    return f"csi_{threshold_dbz:g}"


# -- reports ----------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-lead rows (lead = 1..tau_out) followed by an ``all`` row.

    Per-frame scores are averaged over samples; the ``all`` row averages
    the per-lead rows.  CSI is per-frame then averaged, not pooled.
    """

    thresholds: tuple[float, ...]
    delta_minutes: int
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return ["lead", "minutes", *METRICS, *(csi_key(t) for t in self.thresholds)]

    def lead(self, i: int) -> dict:
        return self.rows[i - 1]

    @property
    def aggregate(self) -> dict:
        return self.rows[-1]

    def series(self, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows[:-1]])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow([r["lead"], r["minutes"]] + [f"{r[c]:.8f}" for c in self.columns[2:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self) -> str:
        lines = [f"{'lead':>6} {'min':>5} " + " ".join(f"{c:>9}" for c in self.columns[2:])]
        for r in self.rows:
            lines.append(f"{r['lead']:>6} {r['minutes']:>5} " + " ".join(f"{r[c]:9.4f}" for c in self.columns[2:]))
        return "\n".join(lines) + "\n"


def relative_change(report: MetricReport, baseline: MetricReport) -> dict[str, float]:
    """(model - baseline) / baseline per metric on the aggregate rows."""
    out = {}
    for c in report.columns[2:]:
        base = baseline.aggregate[c]
        out[c] = math.nan if base == 0 else (report.aggregate[c] - base) / base
    return out


def relative_change_csv(changes: dict[str, float], path=None) -> str:
    text = "metric,relative_change\n" + "".join(f"{k},{v:.6f}\n" for k, v in changes.items())
    if path is not None:
        Path(path).write_text(text)
    return text


class PersistenceForecaster:
    """Repeats the last observed frame for every lead time."""

    def predict(self, inputs: np.ndarray, tau_out: int) -> np.ndarray:
        last = np.asarray(inputs)[:, -1:]
        return np.repeat(last, tau_out, axis=1)


class ModelForecaster:
    def __init__(self, model, batch_size: int = 16, branch: str | None = None):
        self.model = model
        self.batch_size = batch_size
        self.branch = branch

    def predict(self, inputs: np.ndarray, tau_out: int) -> np.ndarray:
        import torch

        from .phydnet import stack_intensity

        self.model.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(inputs), self.batch_size):
                x = torch.as_tensor(np.asarray(inputs[start:start + self.batch_size]), dtype=self.model.dtype)
                if self.branch is None:
                    pred = stack_intensity(self.model.forecast(x, tau_out))
                else:
                    dec = self.model.decompose_branches(x, tau_out)
                    pred = torch.cat(getattr(dec, self.branch), dim=1)
                out.append(pred.numpy())
        return np.concatenate(out).astype(np.float64)


def evaluate(forecaster, windows: np.ndarray, tau_in: int, tau_out: int | None = None,
             thresholds=DEFAULT_THRESHOLDS, delta_minutes: int = 10) -> MetricReport:
    """Forecast every window ``(N, tau_in + tau_out, H, W)`` and score each lead time."""
    windows = np.asarray(windows)
    if windows.ndim != 4 or len(windows) == 0:
        raise ValueError("evaluation split is empty")
    tau_out = windows.shape[1] - tau_in if tau_out is None else tau_out
    if tau_out < 1 or windows.shape[1] < tau_in + tau_out:
        raise ValueError(f"windows of length {windows.shape[1]} cannot hold {tau_in}+{tau_out} frames")
    preds = np.asarray(forecaster.predict(windows[:, :tau_in], tau_out), dtype=np.float64)
    truths = np.asarray(windows[:, tau_in:tau_in + tau_out], dtype=np.float64)
    report = MetricReport(tuple(thresholds), delta_minutes)
    keys = report.columns[2:]
    for lead in range(tau_out):
        per_sample = [frame_metrics(preds[n, lead], truths[n, lead], thresholds) for n in range(len(preds))]
        row = {"lead": str(lead + 1), "minutes": str((lead + 1) * delta_minutes)}
        row.update({c: float(np.mean([m[c] for m in per_sample])) for c in keys})
        report.rows.append(row)
    agg = {"lead": "all", "minutes": "all"}
    agg.update({c: float(np.mean([r[c] for r in report.rows])) for c in keys})
    report.rows.append(agg)
    return report


# -- figures ----------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_advection(field_, background, out_path, stride: int = 2, scale: float | None = None):
    """Quiver of a latent-resolution velocity field over a pixel-resolution frame.

    ``field_`` is ``(2, H/4, W/4)`` holding ``(u_x, u_y)``, x pointing down
    the rows.  Arrows sit at the centres of the latent cells.
    """
    field_ = np.asarray(field_, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if field_.ndim != 3 or field_.shape[0] != 2:
        raise ValueError(f"field must be (2, H, W), got {field_.shape}")
    if (field_.shape[1] * 4, field_.shape[2] * 4) != background.shape:
        raise ValueError(f"field {field_.shape[1:]} is not background {background.shape} / 4")
    plt = _pyplot()
    rows = np.arange(0, field_.shape[1], stride)
    cols = np.arange(0, field_.shape[2], stride)
    cc, rr = np.meshgrid(cols, rows)
    ux = field_[0][np.ix_(rows, cols)]
    uy = field_[1][np.ix_(rows, cols)]
    if scale is None and not np.any(ux) and not np.any(uy):
        scale = 1.0  # autoscale divides by the max arrow length
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(background, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.quiver(cc * 4 + 1.5, rr * 4 + 1.5, uy, ux, angles="xy", scale_units="xy",
              scale=scale, color="white")
    ax.set_xlim(-0.5, background.shape[1] - 0.5)
    ax.set_ylim(background.shape[0] - 0.5, -0.5)
    ax.set_title("advection field")
    fig.savefig(out_path, dpi=80)
    plt.close(fig)
    return Path(out_path)


def plot_branches(truth, combined, physical, residual, out_path, delta_minutes: int = 10):
    """Rows: ground truth, full forecast, physical branch, residual branch."""
    plt = _pyplot()
    seqs = [("truth", truth), ("PhyDNet", combined), ("PhyCell", physical), ("ConvLSTM", residual)]
    n = len(truth)
    fig, axes = plt.subplots(4, n, figsize=(1.8 * n, 7.5), squeeze=False)
    for r, (name, seq) in enumerate(seqs):
        for c in range(n):
            ax = axes[r, c]
            ax.imshow(np.asarray(seq[c]), cmap="viridis", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(name)
            if r == 0:
                ax.set_title(f"+{(c + 1) * delta_minutes} min")
    fig.tight_layout()
    fig.savefig(out_path, dpi=80)
    plt.close(fig)
    return Path(out_path)


def plot_mae_curve(curves: dict[str, np.ndarray], out_path, delta_minutes: int = 10):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in curves.items():
        leads = (np.arange(len(values)) + 1) * delta_minutes
        ax.plot(leads, values, marker="o", label=name)
    ax.set_xlabel("lead time [min]")
    ax.set_ylabel("MAE [MLdBZ]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=80)
    plt.close(fig)
    return Path(out_path)
