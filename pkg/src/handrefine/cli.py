"""Command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .archive import ArchiveError, load_archive
from .config import ABLATIONS, ConfigError, PipelineConfig, toy_config
from .export import write_obj
from .gradcheck import CHECKS, run_checks
from .metrics import evaluate_samples, position_error
from .pipeline import (build_model, dataset_loss, infer, load_network, make_dataset, save_network,
                       train_toy)
from .synth import dataset_digest, load_dataset, save_dataset

log = logging.getLogger("handrefine")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2


class InputError(ValueError):
    """Malformed user input (exit code 2)."""


# ---------------------------------------------------------------- interchange


def to_interchange(samples, joints_key: str = "joints3d", vertices_key: str = "vertices") -> list[dict]:
    out = []
    for s in samples:
        get = s.get if isinstance(s, dict) else lambda k: getattr(s, k)
        out.append({"joints": np.asarray(get(joints_key), dtype=np.float64).tolist(),
                    "vertices": np.asarray(get(vertices_key), dtype=np.float64).tolist()})
    return out


def write_interchange(path: Path, records: list[dict]) -> None:
    path.write_text(json.dumps(records) + "\n", encoding="utf-8")


def read_interchange(path: str | Path) -> list[dict]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, list):
        raise InputError(f"{path}: expected a JSON array of samples")
    records = []
    for i, rec in enumerate(data):
        if not isinstance(rec, dict) or not {"joints", "vertices"} <= set(rec):
            raise InputError(f"{path}: sample {i} needs 'joints' and 'vertices'")
        arrays = {}
        for key in ("joints", "vertices"):
            try:
                arr = np.asarray(rec[key], dtype=np.float64)
            except (TypeError, ValueError):
                raise InputError(f"{path}: sample {i} {key} is not numeric") from None
            if arr.ndim != 2 or arr.shape[1] != 3:
                raise InputError(f"{path}: sample {i} {key} must be n x 3, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{path}: sample {i} {key} has non-finite values")
            arrays[key] = arr
        records.append(arrays)
    return records


# ---------------------------------------------------------------- commands


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else toy_config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.precision is not None:
        changes["precision"] = args.precision
    return cfg.updated(**changes) if changes else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset_or_synth(args, cfg: PipelineConfig):
    if getattr(args, "dataset", None):
        samples, model, _ = load_dataset(args.dataset)
        return samples, model if model is not None else build_model(cfg)
    model = build_model(cfg)
    return make_dataset(cfg, model), model


def cmd_synth(args) -> int:
    cfg = _config(args)
    if args.n is not None:
        cfg = cfg.updated(n_samples=args.n)
    out = _out(args)
    model = build_model(cfg)
    samples = make_dataset(cfg, model)
    digest = dataset_digest(samples)
    save_dataset(out / "dataset.har", samples, model, {"seed": cfg.seed, "digest": digest})
    write_interchange(out / "gt.json", to_interchange(samples))
    print(f"wrote {len(samples)} samples to {out / 'dataset.har'} (sha256 {digest[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.updated(steps=args.steps)
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)
    out = _out(args)
    samples, model = _load_dataset_or_synth(args, cfg)
    t0 = time.perf_counter()
    state, net = train_toy(cfg, samples, model=model)
    seconds = time.perf_counter() - t0
    save_network(out / "network.har", net, {"steps": state.step})
    report.write_loss_history(out / "loss_history.csv", state.term_history)
    report.plot_loss_curve(out / "loss_curve.png", state.term_history)
    preds = [infer(net, {"joints2d": s.joints2d, "f_global": s.f_global}) for s in samples]
    j_pe = float(np.mean([position_error(p["joints3d_refined"], s.joints3d) for p, s in zip(preds, samples)]))
    summary = {"steps": state.step, "initial_loss": state.loss_history[0] if state.loss_history else None,
               "final_loss": dataset_loss(net, samples), "train_j_pe_mm": j_pe,
               "parameters": net.num_parameters(), "seconds": round(seconds, 3)}
    report.write_json(out / "train_summary.json", summary)
    print(f"trained {state.step} steps: loss {summary['initial_loss']} -> {summary['final_loss']:.6g}, "
          f"J-PE {j_pe:.3f} mm")
    return EXIT_OK


def cmd_infer(args) -> int:
    net = load_network(args.network, args.precision)
    cfg = net.config
    samples, _, _ = load_dataset(args.dataset)
    out = _out(args)
    if samples and samples[0].f_global.shape != (cfg.global_dim,):
        raise InputError(f"dataset global features have length {samples[0].f_global.shape[0]}, "
                         f"network expects {cfg.global_dim}")
    key = "heatmaps" if args.from_heatmaps else "joints2d"
    preds = [infer(net, {key: getattr(s, key), "f_global": s.f_global}) for s in samples]
    write_interchange(out / "pred.json", to_interchange(preds, "joints3d_refined", "vertices_refined"))
    write_interchange(out / "stage1.json", to_interchange(preds, "joints3d", "vertices"))
    print(f"wrote predictions for {len(preds)} samples to {out / 'pred.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = read_interchange(args.pred)
    gts = read_interchange(args.gt)
    if len(preds) != len(gts):
        raise InputError(f"{len(preds)} predictions but {len(gts)} ground-truth samples")
    for i, (p, g) in enumerate(zip(preds, gts)):
        for key in ("joints", "vertices"):
            if p[key].shape != g[key].shape:
                raise InputError(f"sample {i}: {key} shape {p[key].shape} does not match {g[key].shape}")
    out = _out(args)
    rep, curves = evaluate_samples(preds, gts)
    (out / "metrics.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    report.write_pck(out / "pck.csv", curves)
    report.plot_pck(out / "pck.png", curves)
    print(rep.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    names = args.only or None
    if names:
        unknown = sorted(set(names) - set(CHECKS))
        if unknown:
            raise InputError(f"unknown checks {unknown}; available: {list(CHECKS)}")
    out = _out(args)
    results = run_checks(seed, names)
    report.write_gradcheck(out / "gradcheck.csv", results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<18} max rel err {r.report.max_rel_error:.2e} (tol {r.tolerance:g}, {r.seconds:.2f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def _faces_for(args) -> np.ndarray:
    if args.faces_from:
        tensors, _ = load_archive(args.faces_from)
        if "mano/faces" not in tensors:
            raise InputError(f"{args.faces_from}: archive holds no mesh faces")
        return tensors["mano/faces"]
    return build_model(_config(args)).faces


def cmd_export(args) -> int:
    records = read_interchange(args.input)
    faces = _faces_for(args)
    indices = range(len(records)) if args.index is None else [args.index]
    out = _out(args)
    for i in indices:
        if not 0 <= i < len(records):
            raise InputError(f"sample index {i} out of range for {len(records)} samples")
        path = out / f"mesh_{i:04d}.obj"
        write_obj(records[i]["vertices"], faces, path)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = _config(args).updated(steps=args.steps)
    out = _out(args)
    model = build_model(cfg)
    samples = make_dataset(cfg, model)
    rows = []
    for name in args.variants or list(ABLATIONS):
        vcfg = cfg.with_ablation(name)
        t0 = time.perf_counter()
        state, net = train_toy(vcfg, samples, model=model)
        preds = [infer(net, {"joints2d": s.joints2d, "f_global": s.f_global}) for s in samples]
        kind, gcn, attn = ABLATIONS[name]
        rows.append({
            "name": name, "encoder_kind": kind, "use_gcn_layer": gcn, "use_mutual_attention": attn,
            "parameters": net.num_parameters(),
            "initial_loss": state.loss_history[0] if state.loss_history else float("nan"),
            "final_loss": dataset_loss(net, samples),
            "j_pe_mm": float(np.mean([position_error(p["joints3d_refined"], s.joints3d)
                                      for p, s in zip(preds, samples)])),
            "v_pe_mm": float(np.mean([position_error(p["vertices_refined"], s.vertices)
                                      for p, s in zip(preds, samples)])),
            "seconds": round(time.perf_counter() - t0, 3)})
        print(f"{name:<10} params {rows[-1]['parameters']:>8}  loss {rows[-1]['final_loss']:.5g}  "
              f"J-PE {rows[-1]['j_pe_mm']:.3f} mm")
    report.write_ablation(out / "ablation.csv", rows)
    report.write_json(out / "ablation.json", rows)
    report.plot_ablation(out / "ablation.png", rows)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", help="JSON pipeline configuration (default: toy settings)",
                   **(d or {"default": None}))
    p.add_argument("--seed", type=int, help="override the configured seed", **(d or {"default": None}))
    p.add_argument("--precision", choices=("f32", "f64"), help="floating-point precision",
                   **(d or {"default": None}))
    p.add_argument("--out", help="output directory", **(d or {"default": "."}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="handrefine", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_globals(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset (dataset.har, gt.json)")
    p.add_argument("--n", type=int, help="number of samples")

    p = add("train-toy", cmd_train, "train on a synthetic dataset (network.har, loss_history.csv, loss_curve.png)")
    p.add_argument("--dataset", help="dataset archive; generated from the config when omitted")
    p.add_argument("--steps", type=int)
    p.add_argument("--ablation", choices=list(ABLATIONS))

    p = add("infer", cmd_infer, "run a trained network on a dataset (pred.json, stage1.json)")
    p.add_argument("--network", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--from-heatmaps", action="store_true", help="decode 2D joints from the heatmaps")

    p = add("eval", cmd_eval, "score predictions (metrics.json, pck.csv, pck.png)")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference checks of every backward pass (gradcheck.csv)")
    p.add_argument("--only", nargs="*", choices=list(CHECKS), metavar="CHECK")

    p = add("export-obj", cmd_export, "write meshes from an interchange file as OBJ")
    p.add_argument("--input", required=True)
    p.add_argument("--faces-from", help="archive holding mano/faces (default: the configured model)")
    p.add_argument("--index", type=int)

    p = add("ablation", cmd_ablation, "train each ablation variant (ablation.csv, ablation.json, ablation.png)")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--variants", nargs="*", choices=list(ABLATIONS))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ArchiveError, InputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError, IndexError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
