"""Command-line entry point: gen-synth, split, train, eval, predict, plot.

Settings come from an optional TOML file (sections ``model``, ``train``,
``data``, ``eval``) overridden by ``--section.key value`` flags and the
per-command shortcuts.  Exit codes: 0 success, 2 validation error,
3 runtime or training failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .errors import TrainingDivergedError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("phynowcast")

SECTIONS = ("model", "train", "data", "eval")
DATA_DEFAULTS = {
    "grid": 64, "steps": 500, "velocity": [1.0, 0.0], "blobs": 4, "diffusion": 0.0, "noise": 0.0,
    "situations": 10, "seed": 0, "ratios": list(D.DEFAULT_RATIOS), "split_seed": 0,
    "max_train_samples": 0, "max_eval_samples": 0,
}
EVAL_DEFAULTS = {"split": "test", "thresholds": [8.0, 40.0], "batch_size": 16, "sample": 0, "stride": 2}


class ValidationError(Exception):
    pass


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                doc = tomllib.loads(Path(path).read_text())
            except (OSError, tomllib.TOMLDecodeError) as exc:
                raise ValidationError(f"cannot read config {path}: {exc}") from exc
            for section, values in doc.items():
                if section not in SECTIONS or not isinstance(values, dict):
                    raise ValidationError(f"unknown config section {section!r}")
                getattr(cfg, section).update(values)
        for key, value in overrides:
            cfg.set(key, value)
        cfg.validate()
        return cfg

    def set(self, dotted: str, value) -> None:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ValidationError(f"flag --{dotted} is not of the form --section.key")
        getattr(self, section)[key] = value

    def model_config(self):
        from .phydnet import ModelConfig

        return ModelConfig.from_dict(self.model)

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig.from_dict(self.train)

    def synth_config(self) -> D.SynthConfig:
        d = self.data
        return D.SynthConfig(grid=int(d["grid"]), length=int(d["steps"]), blobs=int(d["blobs"]),
                             velocity=tuple(float(v) for v in d["velocity"]),
                             diffusion=float(d["diffusion"]), noise=float(d["noise"]),
                             situations=int(d["situations"]), seed=int(d["seed"]))

    def validate(self) -> None:
        unknown = set(self.data) - set(DATA_DEFAULTS) - {"dir"}
        unknown |= {f"eval.{k}" for k in set(self.eval) - set(EVAL_DEFAULTS)}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        try:
            self.model_config()
            self.train_config()
            vel = self.data["velocity"]
            if len(vel) != 2:
                raise ValueError(f"velocity needs two components, got {vel}")
            self.synth_config().validate()
            if self.eval["split"] not in D.SPLIT_NAMES:
                raise ValueError(f"eval.split must be one of {D.SPLIT_NAMES}")
        except (TypeError, ValueError) as exc:
            raise ValidationError(str(exc)) from exc


def parse_value(text: str):
    """TOML scalar/array syntax, bare comma lists, or a plain string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        pass
    if "," in text:
        return [parse_value(t.strip()) for t in text.split(",")]
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def split_overrides(extra: list[str]) -> list[tuple[str, object]]:
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ValidationError(f"unrecognised argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ValidationError(f"flag {tok} needs a value")
            value = extra[i + 1]
            i += 1
        out.append((key, parse_value(value)))
        i += 1
    return out


# -- helpers ----------------------------------------------------------------


def _manifest(data_dir: Path) -> D.DatasetSplit:
    path = data_dir / D.MANIFEST_NAME
    if not path.exists():
        raise ValidationError(f"missing split manifest {path}; run `split` first")
    try:
        return D.read_manifest(path)
    except ValueError as exc:
        raise ValidationError(f"invalid manifest {path}: {exc}") from exc


def _cap(samples, limit: int):
    if limit and len(samples) > limit:
        idx = np.linspace(0, len(samples) - 1, limit).round().astype(int)
        samples = [samples[i] for i in idx]
    return samples


def _windows(data_dir: Path, split: D.DatasetSplit, name: str, mc, limit: int = 0):
    samples = _cap(D.split_samples(split.get(name), mc.tau_in, mc.tau_out), limit)
    if not samples:
        return samples, np.zeros((0, mc.tau_in + mc.tau_out, 1, 1), dtype=np.float32)
    return samples, D.FrameStore(data_dir).stack(samples)


def _data_dir(args, cfg: RunConfig) -> Path:
    path = Path(args.data or cfg.data.get("dir") or "")
    if not str(path) or not path.is_dir():
        raise ValidationError(f"data directory {path!s} does not exist")
    return path


def _load_model(path):
    from .training import load_checkpoint

    if not Path(path).exists():
        raise ValidationError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _sample_windows(args, cfg, model):
    data_dir = _data_dir(args, cfg)
    split = _manifest(data_dir)
    samples, windows = _windows(data_dir, split, cfg.eval["split"], model.config)
    idx = int(cfg.eval["sample"])
    if not 0 <= idx < len(samples):
        raise ValidationError(f"sample index {idx} out of range (split has {len(samples)} samples)")
    return samples[idx], windows[idx:idx + 1]


# -- commands ---------------------------------------------------------------


def cmd_gen_synth(args, cfg: RunConfig) -> int:
    ds = D.synth_advection_dataset(cfg.synth_config())
    out = D.write_dataset(args.out, ds.timestamps, ds.frames, ds.metadata)
    print(f"wrote {len(ds.timestamps)} frames to {out}")
    return 0


def cmd_split(args, cfg: RunConfig) -> int:
    data_dir = _data_dir(args, cfg)
    try:
        index = D.read_index(data_dir)
    except FileNotFoundError as exc:
        raise ValidationError(str(exc)) from exc
    rainy = [ts for ts, flag in index if flag]
    situations = D.split_situations(rainy)
    ratios = [float(r) for r in cfg.data["ratios"]]
    split = D.assign_splits(situations, ratios, int(cfg.data["split_seed"]))
    split.verify()
    path = D.write_manifest(data_dir / D.MANIFEST_NAME, split, ratios)
    D.read_manifest(path)
    train, val, test = split.counts()
    print(f"{len(situations)} situations -> train {train}, validation {val}, test {test}; manifest {path}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .phydnet import PhyDNet
    from .training import train

    mc, tc = cfg.model_config(), cfg.train_config()
    data_dir = _data_dir(args, cfg)
    split = _manifest(data_dir)
    _, train_w = _windows(data_dir, split, "train", mc, int(cfg.data["max_train_samples"]))
    _, val_w = _windows(data_dir, split, "validation", mc, int(cfg.data["max_eval_samples"]))
    if len(train_w) == 0:
        raise ValidationError("training split has no complete samples")
    model = PhyDNet(mc)
    result = train(model, train_w, tc, val_w if len(val_w) else None, out_dir=args.out)
    print(f"checkpoint {result.checkpoint} ({mc.variant}, k={mc.k}); history {Path(args.out) / 'history.csv'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evalkit import ModelForecaster, PersistenceForecaster, evaluate, relative_change, relative_change_csv

    model, _ = _load_model(args.checkpoint)
    mc = model.config
    data_dir = _data_dir(args, cfg)
    split = _manifest(data_dir)
    _, windows = _windows(data_dir, split, cfg.eval["split"], mc, int(cfg.data["max_eval_samples"]))
    if len(windows) == 0:
        raise ValidationError(f"split {cfg.eval['split']!r} has no complete samples")
    thresholds = tuple(float(t) for t in cfg.eval["thresholds"])
    kw = dict(tau_in=mc.tau_in, tau_out=mc.tau_out, thresholds=thresholds, delta_minutes=mc.delta_minutes)
    report = evaluate(ModelForecaster(model, int(cfg.eval["batch_size"])), windows, **kw)
    if args.baseline:
        base_model, _ = _load_model(args.baseline)
        baseline = evaluate(ModelForecaster(base_model, int(cfg.eval["batch_size"])), windows, **kw)
    else:
        baseline = evaluate(PersistenceForecaster(), windows, **kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    baseline.to_csv(out / "baseline.csv")
    relative_change_csv(relative_change(report, baseline), out / "relative_change.csv")
    (out / "summary.txt").write_text(report.summary())
    print(report.summary(), end="")
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    import torch
    from PIL import Image

    model, _ = _load_model(args.checkpoint)
    sample, window = _sample_windows(args, cfg, model)
    model.eval()
    with torch.no_grad():
        bundles = model.forecast(torch.as_tensor(window[:, :model.config.tau_in]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, b in enumerate(bundles, start=1):
        ts = sample.anchor + i * D.DELTA
        Image.fromarray(D.mldbz_to_byte(b.intensity[0, 0].numpy()), mode="L").save(out / f"{D.format_ts(ts)}.png")
        if b.prob is not None:
            Image.fromarray(D.mldbz_to_byte(b.prob[0, 0].numpy()), mode="L").save(
                out / f"{D.format_ts(ts)}_prob.png")
    print(f"wrote {len(bundles)} forecast frames to {out}")
    return 0


def cmd_plot(args, cfg: RunConfig) -> int:
    import torch

    from . import evalkit as E

    model, _ = _load_model(args.checkpoint)
    if args.kind == "advection" and model.config.variant != "advdiff":
        raise ValidationError("variant has no advection field")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mc = model.config
    model.eval()
    if args.kind == "mae-curve":
        data_dir = _data_dir(args, cfg)
        _, windows = _windows(data_dir, _manifest(data_dir), cfg.eval["split"], mc, int(cfg.data["max_eval_samples"]))
        if len(windows) == 0:
            raise ValidationError("no samples to evaluate")
        curves = {}
        for name, fc in (("PhyDNet", E.ModelForecaster(model)), ("PhyCell branch", E.ModelForecaster(model, branch="physical")),
                         ("persistence", E.PersistenceForecaster())):
            curves[name] = E.evaluate(fc, windows, mc.tau_in, mc.tau_out, delta_minutes=mc.delta_minutes).series("mae")
        path = E.plot_mae_curve(curves, out / "mae_curve.png", mc.delta_minutes)
    else:
        _, window = _sample_windows(args, cfg, model)
        x = torch.as_tensor(window[:, :mc.tau_in])
        with torch.no_grad():
            dec = model.decompose_branches(x)
            if args.kind == "branches":
                path = E.plot_branches(window[0, mc.tau_in:], [b.intensity[0, 0].numpy() for b in dec.combined],
                                       [p[0, 0].numpy() for p in dec.physical], [r[0, 0].numpy() for r in dec.residual],
                                       out / "branches.png", mc.delta_minutes)
            else:
                field_ = model.advection_field(x)[0].numpy()
                path = E.plot_advection(field_, dec.physical[0][0, 0].numpy(), out / "advection.png",
                                        stride=int(cfg.eval["stride"]))
    print(f"wrote {path}")
    return 0


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phynowcast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration")
        return sp

    g = common(sub.add_parser("gen-synth", help="render a synthetic advection dataset"))
    g.add_argument("--out", required=True)
    g.add_argument("--grid", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--velocity", type=str, help="x,y pixels per step")
    g.add_argument("--blobs", type=int)
    g.add_argument("--situations", type=int)
    g.add_argument("--diffusion", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int)

    s = common(sub.add_parser("split", help="split rainy frames into independent situations"))
    s.add_argument("--data")
    s.add_argument("--ratios", type=str, help="train,validation,test")
    s.add_argument("--seed", type=int)

    t = common(sub.add_parser("train", help="train a model and write a checkpoint"))
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=("baseline", "quad", "advdiff"))
    t.add_argument("--k", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)

    e = common(sub.add_parser("eval", help="score a checkpoint on a split"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", choices=D.SPLIT_NAMES)
    e.add_argument("--baseline", help="checkpoint to compare against (default: persistence)")
    e.add_argument("--out", required=True)

    pr = common(sub.add_parser("predict", help="write forecast frames for one sample"))
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data")
    pr.add_argument("--split", choices=D.SPLIT_NAMES)
    pr.add_argument("--sample", type=int)
    pr.add_argument("--out", required=True)

    pl = common(sub.add_parser("plot", help="figures: branch decomposition, advection field, MAE curve"))
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--data")
    pl.add_argument("--kind", required=True, choices=("branches", "advection", "mae-curve"))
    pl.add_argument("--split", choices=D.SPLIT_NAMES)
    pl.add_argument("--sample", type=int)
    pl.add_argument("--out", required=True)
    return p


SHORTCUTS = {
    "gen-synth": {"grid": "data.grid", "steps": "data.steps", "velocity": "data.velocity", "blobs": "data.blobs",
                  "situations": "data.situations", "diffusion": "data.diffusion", "noise": "data.noise",
                  "seed": "data.seed"},
    "split": {"ratios": "data.ratios", "seed": "data.split_seed"},
    "train": {"variant": "model.variant", "k": "model.k", "epochs": "train.epochs", "seed": "train.seed"},
    "eval": {"split": "eval.split"},
    "predict": {"split": "eval.split", "sample": "eval.sample"},
    "plot": {"split": "eval.split", "sample": "eval.sample"},
}

COMMANDS = {"gen-synth": cmd_gen_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = split_overrides(extra)
        for flag, dotted in SHORTCUTS[args.command].items():
            value = getattr(args, flag, None)
            if value is not None:
                overrides.append((dotted, parse_value(value) if isinstance(value, str) else value))
        cfg = RunConfig.load(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (ValidationError, D.InfeasibleSplitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
