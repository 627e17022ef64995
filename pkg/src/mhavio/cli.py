"""Command-line entry point: ``mhavio [--config F] [--seed S] [--out D] <command> ...``.

Every command writes into a fresh staging directory that is renamed onto
``--out`` only when the command succeeds, together with ``config.json``
holding the resolved settings.  Exit codes: 0 success, 1 runtime or IO
error, 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, DimensionError, FormatError, TrainingError

log = logging.getLogger("mhavio")

PREDICTION_COLUMNS = ["window", "tx", "ty", "tz", "yaw", "pitch", "roll"]
VARIANCE_COLUMNS = ["var_tx", "var_ty", "var_tz", "var_yaw", "var_pitch", "var_roll"]
# prior precision used by fit-laplace when neither the config nor --tau sets one
DEFAULT_TAU = 100.0


# -- config plumbing -------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return doc


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(sec)


def _override(d: dict, **kw) -> dict:
    d.update({k: v for k, v in kw.items() if v is not None})
    return d


class Staging:
    """Write into a temp dir beside ``out``; move it into place on success only."""

    def __init__(self, out: str | Path):
        self.out = Path(out)

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            old = self.out.with_name(f".{self.out.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            self.out.rename(old)
            self.tmp.rename(self.out)
            shutil.rmtree(old, ignore_errors=True)
        else:
            self.tmp.rename(self.out)
        return False


def write_resolved(out: Path, command: str, seed: int, resolved: dict) -> None:
    doc = {"command": command, "seed": seed, "version": __version__, **resolved}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out(args, default: str) -> Path:
    return Path(args.out or default)


# -- model I/O ---------------------------------------------------------------------------

def _model_config(cfg: dict, strategy: str | None, seed: int):
    from .model import ModelConfig, paper_model_config, toy_model_config

    sec = _section(cfg, "model")
    preset = sec.pop("preset", "toy")
    strategy = strategy or sec.get("fusion", {}).get("strategy", "mha")
    if sec and preset == "custom":
        mc = ModelConfig.from_dict({**sec, "seed": seed})
        return mc.with_strategy(strategy)
    if preset == "toy":
        return toy_model_config(strategy, seed)
    if preset == "paper":
        mc = paper_model_config(strategy)
        mc.seed = seed
        return mc
    raise ConfigError(f"unknown model preset {preset!r} (toy, paper, custom)")


def _load_model(model_dir: str):
    from .checkpoint import read_checkpoint
    from .model import ModelConfig, VIOModel

    path = Path(model_dir)
    ckpt = path / "params.json" if path.is_dir() else path
    if not ckpt.is_file():
        raise FileNotFoundError(f"model checkpoint not found: {ckpt}")
    params, meta = read_checkpoint(ckpt)
    if "model" not in meta:
        raise FormatError(f"{ckpt}: checkpoint has no model config")
    model = VIOModel(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(params)
    model.eval()
    return model, meta


def _write_predictions(path: Path, mean: np.ndarray, variance: np.ndarray | None) -> None:
    cols = PREDICTION_COLUMNS + (VARIANCE_COLUMNS if variance is not None else [])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for k, row in enumerate(mean):
            vals = [k, *(f"{v:.17g}" for v in row)]
            if variance is not None:
                vals += [f"{v:.17g}" for v in variance[k]]
            w.writerow(vals)


def read_predictions(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:7] != PREDICTION_COLUMNS:
        raise FormatError(f"{path}: unexpected prediction header")
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(rows[0]))
    var = data[:, 7:13] if rows[0][7:] == VARIANCE_COLUMNS else None
    return data[:, 1:7], var


def _read_poses(path: str | Path) -> np.ndarray:
    from .dataset import read_pose_file

    p = Path(path)
    if p.is_dir():
        p = p / "poses.txt"
    if not p.is_file():
        raise FileNotFoundError(f"pose file not found: {p}")
    return read_pose_file(p)


# -- commands ------------------------------------------------------------------------------

def cmd_synth(args, cfg: dict) -> int:
    from .dataset import SynthConfig, config_to_dict, save_dataset, synthesize

    sc = SynthConfig.from_dict(_override(_section(cfg, "synth"), path=args.path, num_windows=args.windows))
    ds = synthesize(sc, args.seed)
    with Staging(_out(args, "synth_out")) as tmp:
        save_dataset(ds, tmp)
        write_resolved(tmp, "synth", args.seed, {"synth": config_to_dict(sc)})
    print(f"windows={len(ds)} path_length_m={ds.path_length():.3f}")
    return 0


def cmd_ingest(args, cfg: dict) -> int:
    from .dataset import DatasetConfig, config_to_dict, load_sequence, save_dataset

    sec = _override(_section(cfg, "ingest"), image_dir=args.images, imu_file=args.imu, pose_file=args.poses)
    dc = DatasetConfig.from_dict(sec)
    if not (dc.image_dir and dc.imu_file and dc.pose_file):
        raise ConfigError("ingest needs --images, --imu and --poses (or the ingest config section)")
    ds = load_sequence(dc.image_dir, dc.imu_file, dc.pose_file, dc)
    with Staging(_out(args, "ingest_out")) as tmp:
        save_dataset(ds, tmp)
        write_resolved(tmp, "ingest", args.seed, {"ingest": config_to_dict(dc)})
    print(f"windows={len(ds)} path_length_m={ds.path_length():.3f}")
    return 0


def cmd_degrade(args, cfg: dict) -> int:
    from .dataset import load_dataset, save_dataset
    from .degrade import build_degraded_suite

    sec = _section(cfg, "degrade")
    suite = args.suite or sec.get("suite", "nominal")
    overrides = sec.get("overrides", {})
    src = load_dataset(args.data)
    ds = build_degraded_suite(src, suite, args.seed, overrides)
    with Staging(_out(args, f"degraded_{suite}")) as tmp:
        save_dataset(ds, tmp, {"suite": suite})
        write_resolved(tmp, "degrade", args.seed,
                       {"degrade": {"source": str(Path(args.data).resolve()), "suite": suite,
                                    "overrides": overrides, "degradations": ds.meta["degradations"]}})
    print(f"suite={suite} windows={len(ds)} injectors={len(ds.meta['degradations'])}")
    return 0


def cmd_train(args, cfg: dict) -> int:
    from .checkpoint import save_params
    from .dataset import load_dataset
    from .model import TrainConfig, train

    ds = load_dataset(args.data)
    mc = _model_config(cfg, args.strategy, args.seed)
    sec = _override(_section(cfg, "train"), epochs=args.epochs, lr=args.lr, seed=args.seed)
    sec.pop("checkpoint_dir", None)
    tc = TrainConfig.from_dict(sec)
    with Staging(_out(args, "train_out")) as tmp:
        if tc.checkpoint_every:
            tc.checkpoint_dir = str(tmp / "checkpoints")
        res = train(ds, tc, mc, log_path=tmp / "train_log.jsonl")
        save_params(tmp / "params.json", res.model.state_dict(),
                    {"model": mc.to_dict(), "beta": tc.beta, "epochs_run": len(res.log)})
        summary = {"initial_loss": res.initial_loss, "final_loss": res.final_loss, "epochs_run": len(res.log),
                   "num_segments": len(res.segments), "num_parameters": res.model.num_parameters()}
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        tc.checkpoint_dir = "checkpoints" if tc.checkpoint_every else None
        write_resolved(tmp, "train", args.seed, {"data": str(Path(args.data).resolve()),
                                                 "model": mc.to_dict(), "train": tc.__dict__})
    print(f"initial_loss={res.initial_loss:.6g} final_loss={res.final_loss:.6g}")
    return 0


def cmd_fit_laplace(args, cfg: dict) -> int:
    from .dataset import load_dataset, segment
    from .laplace import fit_laplace, save_posterior, select_parameters, tune_hyperparams

    model, meta = _load_model(args.model)
    ds = load_dataset(args.data)
    sec = _override(_section(cfg, "laplace"), scope=args.scope, fisher_multiplier=args.fisher_multiplier,
                    tau=args.tau)
    beta = float(sec.get("beta", meta.get("beta", 1000.0)))
    segs = segment(ds, int(sec.get("min_len", 5)), int(sec.get("max_len", 7)), args.seed)
    if not segs:
        raise ContractError("dataset too short to form any segment")
    items = [(ds, list(s)) for s in segs]
    N = float(sec.get("fisher_multiplier") or len(items))
    tau = float(sec.get("tau", DEFAULT_TAU))
    scope = sec.get("scope", "all")
    post = fit_laplace(model, items, N, tau, select_parameters(model, scope),
                       loss_fn=lambda it: model.sample_loss(it, beta))
    scores = None
    grid = sec.get("grid")
    if grid:
        if not args.val:
            raise ConfigError("a hyperparameter grid needs --val DATASET")
        val = load_dataset(args.val)
        T = int(sec.get("samples", 30))
        (N, tau), scores = tune_hyperparams(model, val, val.targets, post, [tuple(g) for g in grid], T, args.seed)
        post = post.with_hyperparams(N, tau)
    with Staging(_out(args, "laplace_out")) as tmp:
        save_posterior(tmp / "posterior.json", post)
        summary = {"fisher_multiplier": N, "tau": tau, "scope": scope, "num_items": len(items),
                   "grid_scores": scores}
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        write_resolved(tmp, "fit-laplace", args.seed,
                       {"model": str(Path(args.model).resolve()), "data": str(Path(args.data).resolve()),
                        "laplace": {**sec, "fisher_multiplier": N, "tau": tau, "scope": scope, "beta": beta}})
    print(f"fisher_multiplier={N:g} tau={tau:g} scope={scope}")
    return 0


def cmd_predict(args, cfg: dict) -> int:
    from .dataset import load_dataset, write_pose_file
    from .evaluation import TrajectoryEstimate, bayesian_trajectory, export_trajectory
    from .laplace import load_posterior, predict_bayesian

    model, _ = _load_model(args.model)
    ds = load_dataset(args.data)
    sec = _override(_section(cfg, "predict"), samples=args.samples)
    chunk = sec.get("chunk_len")
    T = int(sec.get("samples", 30))
    if args.bayesian:
        if not args.posterior:
            raise ConfigError("--bayesian needs --posterior")
        ppath = Path(args.posterior)
        post = load_posterior(ppath / "posterior.json" if ppath.is_dir() else ppath)
        res = predict_bayesian(model, ds, post, T, args.seed,
                               predict_fn=lambda m: m.predict(ds, chunk_len=chunk), keep_samples=True)
        est = bayesian_trajectory(ds.poses[0], res.mean, res.variance, res.samples)
    else:
        rel = model.predict(ds, chunk_len=chunk)
        est = TrajectoryEstimate(ds.relative_to_absolute(rel), relatives=rel)
    with Staging(_out(args, "predict_out")) as tmp:
        _write_predictions(tmp / "predictions.csv", est.relatives, est.variance)
        write_pose_file(tmp / "poses.txt", est.poses)
        export_trajectory(est, ds.poses, tmp / "trajectory.csv")
        write_resolved(tmp, "predict", args.seed,
                       {"model": str(Path(args.model).resolve()), "data": str(Path(args.data).resolve()),
                        "posterior": str(Path(args.posterior).resolve()) if args.posterior else None,
                        "predict": {"bayesian": bool(args.bayesian), "samples": T if args.bayesian else None,
                                    "chunk_len": chunk}})
    msg = f"windows={len(est.relatives)}"
    if est.variance is not None:
        msg += f" mean_variance={float(np.mean(est.variance)):.6g}"
    print(msg)
    return 0


def cmd_eval(args, cfg: dict) -> int:
    from .evaluation import (TrajectoryEstimate, evaluate, export_box_bins, export_report, export_trajectory,
                             summarize_uncertainty)

    sec = _section(cfg, "eval")
    gt = _read_poses(args.gt)
    pred_poses = _read_poses(args.pred)
    rel = var = None
    pred_dir = Path(args.pred) if Path(args.pred).is_dir() else None
    if pred_dir and (pred_dir / "predictions.csv").is_file():
        rel, var = read_predictions(pred_dir / "predictions.csv")
    if len(pred_poses) != len(gt):
        raise ContractError(f"prediction has {len(pred_poses)} poses, ground truth {len(gt)}")
    pred = TrajectoryEstimate(pred_poses, relatives=rel, variance=var)
    report = evaluate(pred, gt)
    bins = int(sec.get("bins", 5))
    with Staging(_out(args, "eval_out")) as tmp:
        export_report(report, tmp / "metrics.json")
        export_report(report, tmp / "metrics.csv")
        traj_src = pred_dir / "trajectory.csv" if pred_dir else None
        if traj_src is not None and traj_src.is_file():
            shutil.copyfile(traj_src, tmp / "trajectory.csv")
        else:
            export_trajectory(pred, gt, tmp / "trajectory.csv")
        if var is not None:
            summary = summarize_uncertainty(pred, gt, bins)
            (tmp / "uncertainty.json").write_text(json.dumps(summary["components"], indent=2) + "\n")
            export_box_bins(summary, tmp / "uncertainty_bins.csv")
        write_resolved(tmp, "eval", args.seed, {"pred": str(Path(args.pred).resolve()),
                                                "gt": str(Path(args.gt).resolve()), "eval": {"bins": bins}})
    if report.empty:
        print("t_rel=n/a r_rel=n/a (ground truth shorter than 100 m)")
    else:
        print(f"t_rel={report.t_rel:.4f}% r_rel={report.r_rel:.4f}deg/100m")
    return 0


def cmd_report(args, cfg: dict) -> int:
    from . import plotting
    from .evaluation import load_report

    src = Path(args.eval)
    report = load_report(src / "metrics.json")
    with Staging(_out(args, "report_out")) as tmp:
        for name in ("metrics.json", "metrics.csv", "trajectory.csv", "uncertainty.json", "uncertainty_bins.csv"):
            if (src / name).is_file():
                shutil.copyfile(src / name, tmp / name)
        figures = []
        if not report.empty:
            figures.append(plotting.plot_errors_per_length(report, tmp / "errors_per_length.png"))
        traj = _read_csv_columns(src / "trajectory.csv")
        if traj and len(traj["frame"]):
            sigma = np.sqrt(traj["var_x"] + traj["var_y"]) if "var_x" in traj else None
            figures.append(plotting.plot_trajectory(np.c_[traj["gt_x"], traj["gt_y"]],
                                                    np.c_[traj["pred_x"], traj["pred_y"]],
                                                    tmp / "trajectory.png", sigma))
        if (src / "uncertainty.json").is_file():
            boxes = [_typed_box(r) for r in _read_csv_rows(src / "uncertainty_bins.csv")]
            summary = {"components": json.loads((src / "uncertainty.json").read_text()), "boxes": boxes}
            figures.append(plotting.plot_uncertainty_boxes(summary, tmp / "uncertainty_boxes.png"))
        if args.train:
            records = [json.loads(line) for line in (Path(args.train) / "train_log.jsonl").read_text().splitlines()
                       if line.strip()]
            if records:
                figures.append(plotting.plot_loss_curve(records, tmp / "loss_curve.png"))
        write_resolved(tmp, "report", args.seed, {"eval": str(src.resolve()),
                                                  "train": str(Path(args.train).resolve()) if args.train else None,
                                                  "figures": [f.name for f in figures]})
    print(f"figures={len(figures)}")
    return 0


def _read_csv_rows(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _read_csv_columns(path: Path) -> dict | None:
    if not path.is_file():
        return None
    rows = _read_csv_rows(path)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in header}


def _typed_box(row: dict) -> dict:
    out = {k: float(v) for k, v in row.items() if k != "component"}
    out["component"] = row["component"]
    out["bin"], out["count"] = int(out["bin"]), int(out["count"])
    return out


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = argparse.ArgumentParser(prog="mhavio", description="Attention-fused visual-inertial odometry toolkit",
                                parents=[common])
    p.add_argument("--version", action="version", version=f"mhavio {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="synthesize a toy dataset")
    s.add_argument("--path", choices=["line", "arc", "figure8"])
    s.add_argument("--windows", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="ingest a KITTI-style sequence")
    s.add_argument("--images")
    s.add_argument("--imu")
    s.add_argument("--poses")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("degrade", parents=[common], help="apply a degradation suite")
    s.add_argument("--data", required=True)
    s.add_argument("--suite", choices=["nominal", "inertial", "vision", "all"])
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", parents=[common], help="train the odometry network")
    s.add_argument("--data", required=True)
    s.add_argument("--strategy", choices=["mha", "concat", "soft"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fit-laplace", parents=[common], help="fit the diagonal Laplace posterior")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--val", help="validation dataset for the hyperparameter grid")
    s.add_argument("--scope", choices=["all", "fusion_head"])
    s.add_argument("--fisher-multiplier", type=float)
    s.add_argument("--tau", type=float)
    s.set_defaults(func=cmd_fit_laplace)

    s = sub.add_parser("predict", parents=[common], help="predict relative poses")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--posterior")
    s.add_argument("--bayesian", action="store_true")
    s.add_argument("--samples", type=int, help="posterior samples T (default 30)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", parents=[common], help="trajectory error metrics")
    s.add_argument("--pred", required=True, help="predict output dir or KITTI pose file")
    s.add_argument("--gt", required=True, help="dataset dir or KITTI pose file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="render figures next to the CSV/JSON data")
    s.add_argument("--eval", required=True, help="eval output dir")
    s.add_argument("--train", help="train output dir (for the loss curve)")
    s.set_defaults(func=cmd_report)
    return p


CONFIG_ERRORS = (ConfigError, ContractError, DimensionError)
RUNTIME_ERRORS = (FormatError, TrainingError, OSError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    seed_given = hasattr(args, "seed")
    for name, default in (("config", None), ("seed", 0), ("out", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if "seed" in cfg and not seed_given:
            args.seed = int(cfg["seed"])
        return args.func(args, cfg)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
