"""``wms3m`` command line: ingest, synth, train, evaluate, predict, whatif, plan, bench.

Exit codes: 0 ok, 2 config/schema, 3 missing artifact, 4 version mismatch, 1 other.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import torch

from . import __version__
from . import config as rc
from .data import (
    ActionBounds, KpiTrace, Schema, SplitPlan, StandardScaler, build_windows, compute_action_bounds,
    fit_scaler, generate_synthetic_trace, ingest_csv, load_sidecar, make_split, save_sidecar,
    trace_to_frame, window_anchors,
)
from .errors import ConfigError, MissingArtifactError, VersionMismatchError, WorldModelError
from .inference import evaluate, predict, predict_standardized, sample_noise
from .model import PAPER_PARAM_COUNT, ModelConfig, WorldModel, load_checkpoint, save_checkpoint
from .planner import PlanConfig, cem_plan, run_scenarios
from .runtime import set_compute_threads
from .training import TrainConfig, train

OUTPUT_ROOT_ENV = "WMS3M_OUTPUT_ROOT"
CHECKPOINT = "checkpoint.json"
SIDECAR = "scaler.json"
RESOLVED = "resolved_config.json"
LOG = "training_log.jsonl"
MANIFEST = "manifest.json"


# --- helpers ---------------------------------------------------------------------


def sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def scaler_fingerprint(scaler: StandardScaler, bounds: ActionBounds | None) -> str:
    doc = {"scaler": scaler.to_dict(), "bounds": bounds.to_dict() if bounds else None}
    return sha256_bytes(json.dumps(doc, sort_keys=True).encode())


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def load_trace(data: dict) -> KpiTrace:
    if data["source"] == "csv":
        return ingest_csv(data["path"], Schema.from_dict(data["schema"]))
    syn = dict(data["synthetic"])
    T, seed = int(syn.pop("T")), int(syn.pop("seed"))
    return generate_synthetic_trace(seed, T, syn)


def input_hash(data: dict) -> str:
    if data["source"] == "csv":
        return sha256_file(data["path"])
    return sha256_bytes(json.dumps(data["synthetic"], sort_keys=True).encode())


def target_mode(data: dict, trace: KpiTrace):
    m = data["target_mode"]
    return trace.F if m in ("full", "F", "multivariate", trace.F) else m


def model_config(cfg: dict, trace: KpiTrace, scaler: StandardScaler) -> ModelConfig:
    return ModelConfig.from_dict({
        **cfg["model"],
        "n_features": trace.F, "window": int(cfg["data"]["window"]), "out_dim": scaler.O,
        "target_index": trace.target_index, "action_index": trace.action_index,
    })


@dataclass
class Run:
    """A trained run directory loaded back into memory."""

    path: Path
    cfg: dict
    model: WorldModel
    scaler: StandardScaler
    bounds: ActionBounds
    trace: KpiTrace
    plan: SplitPlan

    @property
    def L(self) -> int:
        return self.model.cfg.window

    def window(self, anchor: int) -> np.ndarray:
        return self.trace.values[anchor - self.L + 1:anchor + 1]

    def test_anchors(self) -> np.ndarray:
        return window_anchors(self.plan.test, self.L)


def open_run(run_dir: str | Path, overrides: Sequence[str] = ()) -> Run:
    run_dir = Path(run_dir)
    for name in (CHECKPOINT, SIDECAR, RESOLVED):
        if not (run_dir / name).exists():
            raise MissingArtifactError(f"{run_dir / name} not found (train first)")
    cfg = rc.resolve(rc.apply_overrides(json.loads((run_dir / RESOLVED).read_text()), overrides))
    set_compute_threads(cfg["threads"])
    model, meta = load_checkpoint(run_dir / CHECKPOINT)
    scaler, bounds, side = load_sidecar(run_dir / SIDECAR)
    if side.get("format") != "wms3m-scaler" or side.get("version") != 1:
        raise VersionMismatchError(f"{run_dir / SIDECAR}: unsupported scaler sidecar version")
    if meta.get("scaler_fingerprint") != scaler_fingerprint(scaler, bounds):
        raise VersionMismatchError("scaler sidecar does not match the checkpoint (stale artifacts)")
    trace = load_trace(cfg["data"])
    plan = SplitPlan.from_dict(side["split"]) if "split" in side else make_split(
        trace, cfg["data"]["fractions"], model.cfg.window)
    if trace.F != model.cfg.n_features:
        raise VersionMismatchError("trace feature count differs from the checkpoint")
    return Run(run_dir, cfg, model.freeze(), scaler, bounds, trace, plan)


def _thread_overrides(args) -> list[str]:
    return list(args.set) + ([f"threads={int(args.threads)}"] if getattr(args, "threads", None) else [])


def pick_anchor(run: Run, index: int | None) -> int:
    anchors = run.test_anchors()
    if index is None:
        return int(anchors[-1])
    if not run.L - 1 <= index < run.trace.T:
        raise ConfigError(f"anchor row {index} leaves no room for a window of L={run.L}")
    return int(index)


# --- commands ----------------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = rc.load(args.config, args.set)
    trace = load_trace(cfg["data"])
    plan = make_split(trace, cfg["data"]["fractions"], int(cfg["data"]["window"]))
    scaler = fit_scaler(trace, plan, target_mode(cfg["data"], trace))
    bounds = compute_action_bounds(trace, plan, scaler)
    summary = {
        "T": trace.T, "F": trace.F, "features": list(trace.feature_names),
        "target_index": trace.target_index, "action_index": trace.action_index,
        "reward_indices": trace.reward_indices, "dropped_rows": trace.dropped_count,
        "split": plan.to_dict(), "bounds": bounds.to_dict(), "input_sha256": input_hash(cfg["data"]),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "ingest_summary.json", summary)
        save_sidecar(out / SIDECAR, scaler, bounds, {"split": plan.to_dict()})
    emit(summary)
    return 0


def cmd_synth(args) -> int:
    cfg = rc.load(args.config, args.set)
    syn = dict(cfg["data"]["synthetic"])
    T = int(args.T if args.T is not None else syn.pop("T"))
    seed = int(args.seed if args.seed is not None else syn.pop("seed"))
    syn.pop("T", None), syn.pop("seed", None)
    trace = generate_synthetic_trace(seed, T, syn)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    trace_to_frame(trace).to_csv(args.out, index=False, float_format="%.17g")
    emit({"path": str(args.out), "T": trace.T, "features": list(trace.feature_names)})
    return 0


def cmd_train(args) -> int:
    cfg = rc.load(args.config, _thread_overrides(args))
    set_compute_threads(cfg["threads"])
    run_dir = Path(args.out or cfg["output_dir"] or output_root() / "train")
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / RESOLVED, cfg)

    data = cfg["data"]
    L = int(data["window"])
    trace = load_trace(data)
    plan = make_split(trace, data["fractions"], L)
    scaler = fit_scaler(trace, plan, target_mode(data, trace))
    bounds = compute_action_bounds(trace, plan, scaler)
    tcfg = TrainConfig.from_dict(cfg["train"])
    tr = build_windows(trace, plan, scaler, L, "train", tcfg.rollout_steps)
    va = build_windows(trace, plan, scaler, L, "val", tcfg.rollout_steps)
    model = WorldModel(model_config(cfg, trace, scaler))

    with open(run_dir / LOG, "w") as log:
        def on_epoch(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            if not args.quiet:
                print(f"epoch {rec['epoch']:3d}  train {rec['train_total']:.4f}  val {rec['val_loss']:.4f}"
                      f"  lr {rec['lr']:.2e}", file=sys.stderr)

        result = train(model, tr, va, tcfg, on_epoch)

    save_sidecar(run_dir / SIDECAR, scaler, bounds, {"split": plan.to_dict()})
    meta = {"scaler_fingerprint": scaler_fingerprint(scaler, bounds), "best_epoch": result.best_epoch,
            "best_val": result.best_val, "epochs_run": result.epochs_run, "package_version": __version__}
    ckpt_hash = save_checkpoint(run_dir / CHECKPOINT, model, meta)
    manifest = {
        "inputs": {"data": input_hash(data), "config": sha256_file(run_dir / RESOLVED)},
        "outputs": {name: sha256_file(run_dir / name) for name in (CHECKPOINT, SIDECAR, LOG)},
        "package_version": __version__,
    }
    write_json(run_dir / MANIFEST, manifest)
    emit({"run_dir": str(run_dir), "checkpoint_sha256": ckpt_hash, "best_epoch": result.best_epoch,
          "best_val": result.best_val, "epochs_run": result.epochs_run,
          "n_parameters": model.n_parameters(), "bounds": bounds.to_dict()})
    return 0


def cmd_evaluate(args) -> int:
    run = open_run(args.run, args.set)
    out = Path(args.out or run.path)
    out.mkdir(parents=True, exist_ok=True)
    pc = run.cfg["predict"]
    anchors = run.test_anchors()
    cols = list(run.scaler.target_columns)
    windows = np.stack([run.window(a) for a in anchors])
    truth = run.trace.values[anchors + 1][:, cols]
    names = list(run.trace.feature_names)
    ev = evaluate(windows, truth, run.model, run.scaler, int(pc["samples"]), int(pc["seed"]),
                  window_ids=anchors, feature_names=names)
    z = float(pc["z"])
    rows = []
    for a, p, y in zip(anchors, ev.predictions, truth):
        lo, hi = p.interval(z)
        for j, c in enumerate(cols):
            rows.append({"timestamp": int(run.trace.timestamps[a + 1]), "feature": names[c],
                         "truth": y[j], "prediction": p.mean[j], "lower": lo[j], "upper": hi[j]})
    df = pd.DataFrame(rows)
    df.to_csv(out / "predictions.csv", index=False, float_format="%.17g")
    report = ev.report.to_dict()
    report.update({"samples": int(pc["samples"]), "z": z, "split": run.plan.to_dict(),
                   "skill_note": "skill scores are relative to the persistence forecast y(t+1) = y(t)"})
    write_json(out / "metrics.json", report)
    from .plotting import forecast_overlay

    first = df[df.feature == names[cols[0]]]
    forecast_overlay(out / "forecast.png", first.timestamp, first.truth, first.prediction, first.lower,
                     first.upper, label=names[cols[0]])
    emit(report)
    return 0


def cmd_predict(args) -> int:
    run = open_run(args.run, args.set)
    pc = run.cfg["predict"]
    if args.window:
        df = pd.read_csv(args.window)
        missing = [c for c in run.trace.feature_names if c not in df.columns]
        if missing:
            raise ConfigError(f"window file missing column {missing[0]!r}")
        window = df[list(run.trace.feature_names)].to_numpy(dtype=np.float64)
        if window.shape[0] != run.L:
            raise ConfigError(f"window file needs exactly L={run.L} rows, got {window.shape[0]}")
        wid = args.window_id if args.window_id is not None else 0
    else:
        anchor = pick_anchor(run, args.index)
        window = run.window(anchor)
        wid = args.window_id if args.window_id is not None else anchor
    S = int(pc["samples"])
    pred = predict(window, run.model, run.scaler, S, int(pc["seed"]), int(wid))
    doc = {"window_id": int(wid), "targets": [run.trace.feature_names[c] for c in run.scaler.target_columns],
           **pred.to_dict(float(pc["z"]))}
    if args.out:
        write_json(Path(args.out), doc)
    emit(doc)
    return 0


def _plan_overrides(args) -> list[str]:
    sets = list(args.set)
    for flag, key in (("horizon", "plan.horizon"), ("population", "plan.population"),
                      ("iterations", "plan.iterations"), ("elite_frac", "plan.elite_frac"),
                      ("smooth", "plan.smooth")):
        v = getattr(args, flag, None)
        if v is not None:
            sets.append(f"{key}={json.dumps(v)}")
    if getattr(args, "weights", None):
        sets.append(f"plan.weights={args.weights}")
    if getattr(args, "bounds", None):
        sets.append(f"plan.bounds={json.dumps(list(args.bounds))}")
    return sets


def cmd_plan(args) -> int:
    run = open_run(args.run, _plan_overrides(args))
    pcfg = PlanConfig.from_dict(run.cfg["plan"])
    anchor = pick_anchor(run, args.index)
    res = cem_plan(run.window(anchor), run.model, run.scaler, run.bounds, pcfg, run.trace.reward_indices)
    doc = {"anchor": anchor, "K": res.n_elite, "config": pcfg.to_dict(), **res.to_dict()}
    out = Path(args.out or run.path / "plan.json")
    write_json(out, doc)
    emit({k: doc[k] for k in ("anchor", "action", "K", "total_reward", "path", "bounds")})
    return 0


def cmd_whatif(args) -> int:
    run = open_run(args.run, _plan_overrides(args))
    pcfg = PlanConfig.from_dict(run.cfg["plan"])
    anchor = pick_anchor(run, args.index)
    names = list(run.trace.feature_names)
    scenarios = args.scenarios or run.cfg["scenarios"]
    results = run_scenarios(run.window(anchor), run.model, run.scaler, run.bounds, pcfg,
                            run.trace.reward_indices, scenarios, names)
    out = Path(args.out or run.path)
    out.mkdir(parents=True, exist_ok=True)
    steps, summary = [], []
    for r in results:
        for h in range(pcfg.horizon):
            steps.append({"scenario": r.label, "step": h + 1, "action": r.actions[h], "reward": r.rewards[h],
                          **{k: v[h] for k, v in r.kpis.items()}})
        summary.append({"scenario": r.label, "reward": r.total, **{f"avg_{k}": v for k, v in r.averages.items()}})
    pd.DataFrame(steps).to_csv(out / "whatif_steps.csv", index=False, float_format="%.17g")
    pd.DataFrame(summary).to_csv(out / "whatif_summary.csv", index=False, float_format="%.17g")
    write_json(out / "whatif.json", {"anchor": anchor, "config": pcfg.to_dict(),
                                     "scenarios": [r.to_dict() for r in results]})
    from .plotting import whatif_figure

    whatif_figure(out / "whatif.png", results)
    emit(summary)
    return 0


def time_windows(model: WorldModel, windows: np.ndarray, S: int, repeats: int, warmup: int) -> float:
    """Per-window latency of the batched MC predict path (best of ``repeats``)."""
    B = windows.shape[0]
    noise = np.stack([sample_noise(0, i, S, model.cfg.d_latent) for i in range(B)])
    for _ in range(warmup):
        predict_standardized(model, windows, noise)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict_standardized(model, windows, noise)
        best = min(best, time.perf_counter() - t0)
    return best / B


def latency_sweep(mcfg: ModelConfig, lengths: Sequence[int], S: int, batch: int, repeats: int,
                  warmup: int, seed: int = 0) -> list[dict]:
    """Latency against window length at fixed width; weights do not affect the cost."""
    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        m = WorldModel(ModelConfig.from_dict({**mcfg.to_dict(), "window": int(L), "kernel_len": None})).freeze()
        x = rng.standard_normal((batch, int(L), mcfg.n_features))
        rows.append({"L": int(L), "latency_s": time_windows(m, x, S, repeats, warmup)})
    return rows


def fit_r2(x, y, degree: int) -> tuple[np.ndarray | None, float | None]:
    """Least-squares polynomial fit with intercept and its R^2; None when underdetermined."""
    if len(x) <= degree:
        return None, None
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    return coef, (1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0)


def cmd_bench(args) -> int:
    run = open_run(args.run, _thread_overrides(args))
    bc = run.cfg["bench"]
    S = int(run.cfg["predict"]["samples"])
    out = Path(args.out or run.path)
    out.mkdir(parents=True, exist_ok=True)
    anchors = run.test_anchors()[: int(bc["batch"])]
    pc = run.cfg["predict"]
    lat = []
    for a in anchors:
        t0 = time.perf_counter()
        predict(run.window(a), run.model, run.scaler, S, int(pc["seed"]), int(a))
        lat.append(time.perf_counter() - t0)
    lengths = [int(v) for v in (args.lengths or bc["lengths"])]
    sweep = latency_sweep(run.model.cfg, lengths, S, int(bc["batch"]), int(bc["repeats"]), int(bc["warmup"]))
    Ls = np.array([r["L"] for r in sweep], dtype=float)
    ys = np.array([r["latency_s"] for r in sweep])
    lin, r2_lin = fit_r2(Ls, ys, 1)
    quad, r2_quad = fit_r2(Ls, ys, 2)
    paper_like = ModelConfig(n_features=run.model.cfg.n_features, window=run.L, out_dim=run.model.cfg.out_dim,
                             target_index=run.model.cfg.target_index, action_index=run.model.cfg.action_index)
    ref_model = WorldModel(paper_like)
    n_paper = ref_model.n_parameters()
    groups = {k: sum(p.numel() for _, p in v) for k, v in ref_model.param_groups().items()}
    report = {
        "n_parameters": run.model.n_parameters(),
        "n_parameters_reference_config": n_paper,
        "reference_parameter_count": PAPER_PARAM_COUNT,
        "reference_parameter_delta": n_paper - PAPER_PARAM_COUNT,
        "reference_config_groups": groups,
        "latency_mean_s": float(np.mean(lat)),
        "latency_median_s": float(np.median(lat)),
        "reference_latency_s": 0.000647,
        "samples": S,
        "sweep": sweep,
        "fit": {"r2_linear": r2_lin, "r2_quadratic": r2_quad,
                "r2_margin": None if r2_quad is None or r2_lin is None else r2_quad - r2_lin,
                "doubling_ratios": (ys[1:] / ys[:-1]).tolist()},
        "threads": run.cfg["threads"],
    }
    write_json(out / "bench.json", report)
    pd.DataFrame(sweep).to_csv(out / "latency.csv", index=False, float_format="%.17g")
    from .plotting import latency_figure

    latency_figure(out / "latency.png", Ls, ys, {"linear": lin, "quadratic": quad})
    if args.dump_taps:
        dump_taps(run.model, out / "taps.csv")
    emit(report)
    return 0


def dump_taps(model: WorldModel, path: Path) -> Path:
    """Long-format CSV of every layer's mixture taps."""
    rows = []
    with torch.no_grad():
        for li, layer in enumerate(model.backbone.layers):
            k = layer.taps().double().numpy()
            for c in range(k.shape[0]):
                for t in range(k.shape[1]):
                    rows.append((li, c, t, k[c, t]))
    pd.DataFrame(rows, columns=["layer", "channel", "lag", "tap"]).to_csv(path, index=False, float_format="%.17g")
    return path


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wms3m", description="State-space world model for PRB control.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", "-c", help="run config (TOML or JSON)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf, e.g. train.max_epochs=5 (repeatable)")

    def run_arg(sp):
        sp.add_argument("--run", required=True, help="trained run directory")
        sp.add_argument("--out", help="output directory or file (default: the run directory)")
        common(sp, config=False)

    def plan_flags(sp):
        sp.add_argument("--index", type=int, help="anchor row of the context window (default: last test window)")
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--population", type=int)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--elite-frac", dest="elite_frac", type=float)
        sp.add_argument("--smooth", type=float)
        sp.add_argument("--weights", help='JSON map, e.g. {"PRB": 0.5}')
        sp.add_argument("--bounds", type=float, nargs=2, metavar=("LO", "HI"), help="PRB bounds override")

    sp = sub.add_parser("ingest", help="validate a trace, report splits and bounds")
    common(sp)
    sp.add_argument("--out", help="directory for the summary and scaler sidecar")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("synth", help="write a synthetic controlled trace to CSV")
    common(sp)
    sp.add_argument("--T", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model into a run directory")
    common(sp)
    sp.add_argument("--out", help=f"run directory (default: ${OUTPUT_ROOT_ENV}/train)")
    sp.add_argument("--threads", type=int, help="intra-op compute threads (overrides config 'threads')")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="test-split metrics, predictions CSV and overlay figure")
    run_arg(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="MC prediction for one window")
    run_arg(sp)
    sp.add_argument("--index", type=int, help="anchor row in the trace")
    sp.add_argument("--window", help="CSV holding exactly L rows of the feature columns")
    sp.add_argument("--window-id", dest="window_id", type=int)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("plan", help="CEM plan for the next PRB")
    run_arg(sp)
    plan_flags(sp)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("whatif", help="scripted PRB scenarios through the model")
    run_arg(sp)
    plan_flags(sp)
    sp.add_argument("--scenarios", nargs="+", help="subset of hold step_up step_down ramp_high cem")
    sp.set_defaults(func=cmd_whatif)

    sp = sub.add_parser("bench", help="parameter count, latency and L-scaling sweep")
    run_arg(sp)
    sp.add_argument("--lengths", type=int, nargs="+")
    sp.add_argument("--threads", type=int, help="intra-op compute threads (overrides config 'threads')")
    sp.add_argument("--dump-taps", dest="dump_taps", action="store_true", help="also write taps.csv")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except Exception as exc:  # noqa: BLE001
        if isinstance(exc, WorldModelError):
            code = exc.exit_code
        elif isinstance(exc, FileNotFoundError):
            code = 3
        else:
            code = 1
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
