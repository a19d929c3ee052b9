"""Command line: synth, train, eval, roc, gradcheck.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import zipfile
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint
from .data import SynthTreeParams, VolumeFormatError, generate_synthetic_tree, read_volume, write_volume
from .evaluation import EvalCase, evaluate_cases, find_operating_threshold, roc_sweep
from .gradcheck import GRADCHECK_TOL, network_loss_gradcheck, registered_ops, run_suite
from .inference import predict_volume
from .network import VARIANTS, NetworkSpec, ShapePlanError, output_shape, valid_input_dims
from .rng import substream
from .training import NumericalError, TrainConfig, network_from_checkpoint, train

log = logging.getLogger("ugnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ORACLE_KIND = "reference-oracle"
MANIFEST = "manifest.json"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 48x48x48, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return dims


def _parse_grid(text: str) -> list[float]:
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be start:stop:step, got {text!r}")
    if step <= 0 or stop < start:
        raise argparse.ArgumentTypeError("grid needs step > 0 and stop >= start")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(n)]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth


def case_seed(seed: int, index: int) -> int:
    return int(substream(seed, "case", index).integers(0, 2 ** 31 - 1))


def cmd_synth(args) -> int:
    overrides = {}
    if args.params:
        try:
            overrides = json.loads(Path(args.params).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synthesis parameters: {exc}")
        allowed = {f.name for f in fields(SynthTreeParams)} - {"seed", "dims"}
        unknown = set(overrides) - allowed
        if unknown:
            raise ConfigError(f"unsupported synthesis parameters: {sorted(unknown)}")
        for key in ("length_range", "spacing"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
    if args.count < 0:
        raise ConfigError("count must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(args.count):
        try:
            params = SynthTreeParams(dims=args.dims, seed=case_seed(args.seed, i), **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc))
        vol = generate_synthetic_tree(params)
        name = f"case_{i:03d}"
        write_volume(out / f"{name}.segv", vol)
        cases.append({"id": name, "image": f"{name}.segv", "seed": params.seed,
                      "branches": int(len(vol.centreline.branch_ids)),
                      "reference_voxels": int(vol.reference.sum())})
    _write_json(out / MANIFEST, {"seed": args.seed, "count": args.count, "dims": list(args.dims),
                                 "params": {k: v for k, v in asdict(SynthTreeParams(dims=args.dims, **overrides)).items()
                                            if k != "seed"},
                                 "cases": cases})
    print(f"wrote {args.count} cases to {out}")
    return EXIT_OK


def load_cases(directory) -> list:
    """Volumes listed in a case directory's manifest, in manifest order."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    try:
        if manifest.exists():
            names = [c["image"] for c in json.loads(manifest.read_text())["cases"]]
        else:
            names = sorted(p.name for p in directory.glob("*.segv"))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"unreadable case manifest {manifest}: {exc}")
    if not names:
        raise DataError(f"no cases found in {directory}")
    vols = []
    for n in names:
        try:
            vols.append(read_volume(directory / n))
        except (OSError, VolumeFormatError, ValueError) as exc:
            raise DataError(f"cannot read {directory / n}: {exc}")
    return vols


# ---------------------------------------------------------------------------
# train


def load_experiment(path) -> dict:
    """Parse a training config.

    Layout::

        {"seed": 0,
         "data": {"cases": "data/", "train": ["case_000", ...], "valid": ["case_006"]},
         "network": {"variant": "UGnnReg", "output_size": 48},
         "train": {...TrainConfig fields...}}

    ``network`` takes either ``output_size`` (cubic output tile; the input
    is derived) or explicit ``input_dims``.  Without ``train``/``valid``
    lists the split is the first ``n_train`` cases then ``n_valid`` cases
    (defaults: all but one, then one).  Relative paths resolve against the
    config file's directory.
    """
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - {"seed", "data", "network", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "seed" not in cfg or not isinstance(cfg["seed"], int):
        raise ConfigError("config needs an integer 'seed'")
    data = dict(cfg.get("data", {}))
    if "cases" not in data:
        raise ConfigError("config needs data.cases")
    data["cases"] = str((path.parent / data["cases"]).resolve())
    net = dict(cfg.get("network", {}))
    variant = net.pop("variant", None)
    if variant not in VARIANTS:
        raise ConfigError(f"network.variant must be one of {', '.join(VARIANTS)}, got {variant!r}")
    try:
        if "output_size" in net:
            n = valid_input_dims(variant, int(net.pop("output_size")))
            net["input_dims"] = (n, n, n)
        spec = NetworkSpec(variant, **net)
        output_shape(spec)
    except (TypeError, ValueError, ShapePlanError) as exc:
        raise ConfigError(f"invalid network config: {exc}")
    try:
        tc = TrainConfig.from_dict({**cfg.get("train", {}), "seed": cfg["seed"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}")
    return {"seed": cfg["seed"], "data": data, "spec": spec, "train": tc}


def _split(vols, data: dict, tc: TrainConfig):
    by_name = {v.name: v for v in vols}
    if "train" in data or "valid" in data:
        try:
            tr = [by_name[n] for n in data.get("train", [])]
            va = [by_name[n] for n in data.get("valid", [])]
        except KeyError as exc:
            raise DataError(f"case {exc} not found in {data['cases']}")
    else:
        n_valid = tc.n_valid if tc.n_valid is not None else 1
        n_train = tc.n_train if tc.n_train is not None else len(vols) - n_valid
        if n_train < 1 or n_valid < 1 or n_train + n_valid > len(vols):
            raise DataError(f"cannot split {len(vols)} cases into {n_train} train + {n_valid} valid")
        tr, va = vols[:n_train], vols[n_train:n_train + n_valid]
    if not tr or not va:
        raise DataError("training and validation sets must both be non-empty")
    return tr, va


def cmd_train(args) -> int:
    exp = load_experiment(args.config)
    vols = load_cases(exp["data"]["cases"])
    tr, va = _split(vols, exp["data"], exp["train"])
    out = Path(args.out)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(exp["spec"], tr, va, exp["train"], out_dir=out, resume=resume)
    h = result.history
    print(f"trained {len(h)} epochs, stop: {result.stop.value}, best epoch {h.best_epoch}, "
          f"best valid loss {h.best_valid_loss}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / roc


def oracle_checkpoint() -> Checkpoint:
    """Stand-in model whose prediction is the case's own reference mask."""
    return Checkpoint(spec={}, params={}, kind=ORACLE_KIND)


def _probability_maps(ckpt_path, vols, overlap: float) -> tuple[list[EvalCase], str]:
    try:
        ckpt = load_checkpoint(ckpt_path)
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot read checkpoint {ckpt_path}: {exc}")
    cases = []
    net = None if ckpt.kind == ORACLE_KIND else network_from_checkpoint(ckpt, dtype=np.float64, use_best=False)
    for v in vols:
        if v.reference is None or v.centreline is None:
            raise DataError(f"case {v.name} lacks a reference mask or centreline")
        prob = v.reference.astype(np.float64) if net is None else predict_volume(net, v.image, overlap)
        cases.append(EvalCase(prob, v.reference, v.centreline, v.exclusion, v.spacing, v.name))
    return cases, Path(ckpt_path).stem


def cmd_eval(args) -> int:
    cases, model_id = _probability_maps(args.ckpt, load_cases(args.cases), args.overlap)
    op = None
    if args.target_leakage is not None:
        res = find_operating_threshold(cases, args.target_leakage, args.tol)
        op = {"target": res.target, "threshold": res.threshold, "leakage": res.leakage, "reached": res.reached,
              "unreachable": res.unreachable, "iterations": res.iterations, "tol": args.tol}
        threshold = res.threshold
        if not res.reached:
            log.warning("target leakage %s not reached; nearest achievable %s", res.target, res.leakage)
    else:
        threshold = args.threshold
    report = evaluate_cases(cases, threshold, model_id=model_id)
    report.operating_point = op
    report.write(args.out)
    agg = report.aggregate()
    print(f"threshold {threshold:.6g}: " + ", ".join(f"{k} {v['mean']:.4f}" for k, v in agg.items()))
    return EXIT_OK


def cmd_roc(args) -> int:
    cases, _ = _probability_maps(args.ckpt, load_cases(args.cases), args.overlap)
    if any(not 0.0 <= t <= 1.0 for t in args.grid):
        raise ConfigError("grid thresholds must lie in [0, 1]")
    curve = roc_sweep(cases, args.grid, include_half=args.include_half)
    if not curve.is_monotone():
        raise NumericalError("ROC curve is not monotone")
    curve.write(args.out)
    print(f"wrote {len(curve.thresholds)} ROC points to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    if args.inject_fault and args.inject_fault not in registered_ops():
        raise ConfigError(f"unknown op {args.inject_fault!r}; registered: {', '.join(registered_ops())}")
    if args.inject_fault:
        with T.inject_grad_fault(args.inject_fault):
            results = run_suite(args.seed)
    else:
        results = run_suite(args.seed)
    if args.end_to_end:
        results += [network_loss_gradcheck(v, seed=args.seed) for v in ("UGnnReg", "UGnnDyn")]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.op:<24s} max rel err {r.error:.3e}")
    failed = [r.op for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed (tol {GRADCHECK_TOL:g})")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ugnn", description="UNet / UNet-GNN tree segmentation at desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic tree volumes")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--dims", type=_parse_dims, default=(48, 48, 48))
    s.add_argument("--params", help="JSON file with SynthTreeParams overrides")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a network from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="continue from a final.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics at a fixed threshold or leakage level")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--cases", required=True)
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--threshold", type=float)
    g.add_argument("--target-leakage", type=float)
    e.add_argument("--tol", type=float, default=1e-4)
    e.add_argument("--overlap", type=float, default=0.0)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("roc", help="mean completeness and leakage over a threshold grid")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--cases", required=True)
    r.add_argument("--grid", type=_parse_grid, required=True)
    r.add_argument("--include-half", action="store_true", help="add the 0.5 threshold to the grid")
    r.add_argument("--overlap", type=float, default=0.0)
    r.add_argument("--out", default=".")
    r.set_defaults(func=cmd_roc)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", metavar="OP", help="corrupt the gradient of OP (self-test)")
    c.add_argument("--end-to-end", action="store_true", help="also check the full UGnn loss gradients")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VolumeFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
