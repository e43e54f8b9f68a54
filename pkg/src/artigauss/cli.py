"""artigauss command line: generate, fit, eval, reanimate.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric failure, 5 missing ground truth.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_MISSING_GT = 0, 2, 3, 4, 5

log = logging.getLogger("artigauss")


class UsageError(Exception):
    pass


def _load_toml(path: str) -> dict:
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError:
        raise
    except ValueError as e:
        raise UsageError(f"config file {path}: {e}") from e


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ARTIGAUSS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"ARTIGAUSS_SEED must be an integer, got {env!r}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("need at least one positive integer")
    return vals


def _source(text: str) -> int:
    kind, _, idx = text.partition(":")
    if kind != "frame" or not idx.isdigit():
        raise argparse.ArgumentTypeError(f"expected frame:<index>, got {text!r}")
    return int(idx)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    from . import dataio

    try:
        spec = dataio.preset(args.preset, frames=args.frames, points=args.points, noise=args.noise, seed=_seed(args))
    except dataio.InvalidSpec as e:
        raise UsageError(str(e)) from e
    ds = dataio.generate(spec)
    if args.occlusion == "partial":
        ds = dataio.make_partial(ds, seed=_seed(args))
    elif args.occlusion == "camera":
        ds = dataio.make_occluded(ds, seed=_seed(args))
    dataio.save(ds, args.out)
    sizes = [len(f) for f in ds.frames]
    print(f"preset={args.preset} frames={len(sizes)} parts={ds.gt.num_parts} joints={len(ds.gt.joints)} "
          f"points={sum(sizes)} (per frame {min(sizes)}..{max(sizes)}) occlusion={args.occlusion} out={args.out}")
    return EXIT_OK


FIT_KEYS = {
    "m": "m_candidates",
    "iters": "iterations",
    "warmup": "warmup_iterations",
    "emd_start": "emd_start_iteration",
    "finetune_iters": "finetune_iterations",
    "lr": "lr_gaussians",
    "lr_kinematic": "lr_kinematic",
    "mode": "mode",
}


def _fit_config(args):
    from .optimizer import OptimizerConfig

    file_cfg = _load_toml(args.config) if args.config else {}
    fit_section = file_cfg.get("fit", file_cfg)
    unknown = set(fit_section) - set(FIT_KEYS) - {"seed", "flow", "merge_threshold", "profile", "threads"}
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    profile = args.profile or fit_section.get("profile", "desk")
    if profile not in ("desk", "paper"):
        raise UsageError(f"unknown profile {profile!r}")
    base = OptimizerConfig.paper() if profile == "paper" else OptimizerConfig.desk()
    kw = {}
    for flag, field_name in FIT_KEYS.items():
        value = getattr(args, flag)
        if value is None:
            value = fit_section.get(flag)
        if value is not None:
            kw[field_name] = tuple(value) if flag == "m" else value
    seed = args.seed if args.seed is not None else fit_section.get("seed")
    if seed is None:
        seed = _seed(args)
    kw["seed"] = int(seed)
    if "iterations" in kw and "emd_start_iteration" not in kw:
        kw["emd_start_iteration"] = min(base.emd_start_iteration, kw["iterations"])
    try:
        cfg = base.replace(**kw)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from e
    flow = args.flow or fit_section.get("flow", "gt")
    threshold = args.merge_threshold if args.merge_threshold is not None else fit_section.get("merge_threshold", 3e-2)
    return cfg, flow, float(threshold)


def cmd_fit(args) -> int:
    from . import dataio, pipeline
    from .losses import GroundTruthFlow, NearestNeighborFlow

    cfg, flow, threshold = _fit_config(args)
    if flow not in ("gt", "nn", "off"):
        raise UsageError(f"unknown flow oracle {flow!r}")
    ds = dataio.load(args.data)
    if flow == "gt":
        if ds.gt is None:
            raise UsageError("--flow gt needs a dataset with ground truth")
        oracle = GroundTruthFlow(ds.gt.labels, ds.gt.motions())
    elif flow == "nn":
        oracle = NearestNeighborFlow()
    else:
        oracle = None
    result = pipeline.run(ds.frames, cfg, oracle, merge_threshold=threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.fit.set.save(out / "model.json")
    result.kinematics.model.save(out / "kinematic.json")
    last = result.fit.loss_history[-1] if result.fit.loss_history else {}
    print(f"chosen m={result.fit.m} (candidates: "
          + ", ".join(f"m={c.m} cd={c.final_cd:.6g}" for c in result.candidates) + ")")
    print(f"merged parts={result.kinematics.merge.num_parts} root={result.kinematics.model.root} edges="
          + ",".join(f"{e.parent}->{e.child}:{e.screw.kind}" for e in result.kinematics.model.edges))
    if last:
        print("final losses: " + " ".join(f"{k}={last[k]:.6g}" for k in ("total", "mle", "sep", "cd", "emd", "flow")))
    print(f"wrote {out / 'model.json'} and {out / 'kinematic.json'}")
    return EXIT_OK


def _labels_for(model, gset, frames):
    from .kinematics import part_labels

    if gset is not None:
        return part_labels(gset, model.part_of, frames)
    return part_labels(model.gaussians, np.arange(len(model.parts)), frames)


def cmd_eval(args) -> int:
    from . import _jsonio, dataio, pipeline
    from .gaussian_model import GaussianSet
    from .kinematics import KinematicModel

    ds = dataio.load(args.data)
    if ds.gt is None:
        raise dataio.MissingGroundTruth(f"{args.data} has no ground truth")
    gset = GaussianSet.load(args.model)
    model = KinematicModel.load(args.kinematic)
    if gset.num_timesteps != ds.num_frames or model.num_timesteps != ds.num_frames:
        raise UsageError(f"model covers {gset.num_timesteps} steps but the dataset has {ds.num_frames} frames")
    labels = _labels_for(model, gset, ds.frames)
    report = pipeline.evaluate(ds, model, labels, seed=_seed(args))
    print(report.table())
    if args.out:
        _jsonio.write(args.out, report.to_dict())
    return EXIT_OK


def _read_states(path: str, num_edges: int) -> np.ndarray:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"states file {path}: {e}") from e
    if isinstance(raw, dict) and "edges" in raw:
        raw = raw["edges"]
    if isinstance(raw, list):
        raw = {str(i): v for i, v in enumerate(raw)}
    if not isinstance(raw, dict):
        raise UsageError(f"states file {path}: expected an object mapping edge ids to values")
    values = np.zeros(num_edges)
    for key, v in raw.items():
        try:
            e = int(key)
        except ValueError:
            raise UsageError(f"states file {path}: edge id {key!r} is not an integer")
        if not 0 <= e < num_edges:
            raise UsageError(f"states file {path}: unknown edge id {e} (model has {num_edges} edges)")
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not np.isfinite(v):
            raise UsageError(f"states file {path}: value for edge {e} must be a finite number")
        values[e] = float(v)
    return values


def cmd_reanimate(args) -> int:
    from . import dataio
    from .gaussian_model import GaussianSet
    from .kinematics import KinematicModel, reanimate
    from .pipeline import model_motions

    model = KinematicModel.load(args.kinematic)
    values = _read_states(args.states, len(model.edges)) if args.states else np.zeros(len(model.edges))
    ds = dataio.load(args.data)
    step = args.source
    if not 0 <= step < ds.num_frames:
        raise UsageError(f"source frame {step} out of range for {ds.num_frames} frames")
    gset = GaussianSet.load(args.model) if args.model else None
    (labels,) = _labels_for(model, gset, ds.frames)[step:step + 1]
    pts = ds.frames[step]
    if step != 0:  # carry the source frame back to the rest configuration first
        back = np.linalg.inv(model_motions(model)[:, step])
        pts = np.einsum("nij,nj->ni", back[labels, :3, :3], pts) + back[labels, :3, 3]
    moved = reanimate(model, values, pts, labels)
    dataio.export_ply(moved, labels, args.out)
    print(f"reanimated {len(moved)} points from frame {step} with states {values.tolist()} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artigauss", description="Articulated object modeling with dynamic Gaussians.")
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 gives bit-reproducible runs)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--preset", required=True, help="chain2, chain3, chain3-taper, prism2, star4 or cyl-axis")
    g.add_argument("--frames", type=int, default=8, help="number of frames K")
    g.add_argument("--points", type=int, default=512, help="points per frame N")
    g.add_argument("--noise", type=float, default=0.002, help="noise sigma as a fraction of the bounding-box diagonal")
    g.add_argument("--occlusion", choices=("none", "partial", "camera"), default="none", help="missing-data variant")
    g.add_argument("--seed", type=int, default=None, help="random seed (default: $ARTIGAUSS_SEED or 0)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit Gaussians and extract the kinematic model")
    f.add_argument("data", help="dataset directory")
    f.add_argument("--m", type=_int_list, default=None, help="candidate Gaussian counts, e.g. 2,3,4")
    f.add_argument("--iters", type=int, default=None, help="optimization iterations per candidate")
    f.add_argument("--warmup", type=int, default=None, help="likelihood-only warm-up iterations on frame 0")
    f.add_argument("--emd-start", dest="emd_start", type=int, default=None, help="iteration where EMD replaces Chamfer")
    f.add_argument("--finetune-iters", dest="finetune_iters", type=int, default=None, help="joint fine-tuning iterations")
    f.add_argument("--lr", type=float, default=None, help="Gaussian learning rate")
    f.add_argument("--lr-kinematic", dest="lr_kinematic", type=float, default=None, help="joint learning rate")
    f.add_argument("--mode", choices=("full", "partial"), default=None, help="loss variant for missing data")
    f.add_argument("--flow", choices=("gt", "nn", "off"), default=None, help="flow oracle (default gt)")
    f.add_argument("--merge-threshold", dest="merge_threshold", type=float, default=None, help="part merge threshold")
    f.add_argument("--profile", choices=("desk", "paper"), default=None, help="iteration schedule preset")
    f.add_argument("--config", default=None, help="TOML file with defaults for these flags (flags win)")
    f.add_argument("--seed", type=int, default=None, help="random seed (default: $ARTIGAUSS_SEED or 0)")
    f.add_argument("--out", required=True, help="output directory for model.json and kinematic.json")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="evaluate a fitted model against ground truth")
    e.add_argument("data", help="dataset directory")
    e.add_argument("model", help="model.json")
    e.add_argument("kinematic", help="kinematic.json")
    e.add_argument("--seed", type=int, default=None, help="subsampling seed (default: $ARTIGAUSS_SEED or 0)")
    e.add_argument("--out", default=None, help="write metrics.json here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reanimate", help="re-articulate a frame to new joint states and export PLY")
    r.add_argument("kinematic", help="kinematic.json")
    r.add_argument("--data", required=True, help="dataset directory holding the source frame")
    r.add_argument("--model", default=None, help="model.json used for point labels (default: the merged parts)")
    r.add_argument("--states", default=None, help="JSON mapping edge ids to joint values (missing edges stay at rest)")
    r.add_argument("--source", type=_source, default=0, help="source cloud, frame:<index> (default frame:0)")
    r.add_argument("--out", required=True, help="output PLY path")
    r.set_defaults(func=cmd_reanimate)
    return parser


def _configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    log.setLevel(level)
    if not any(getattr(h, "_artigauss", False) for h in log.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        handler._artigauss = True
        log.addHandler(handler)
    log.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose, args.quiet)

    import torch

    from .dataio import FormatError, MissingGroundTruth
    from .optimizer import NonFiniteLoss

    if args.threads < 1:
        print("artigauss: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"artigauss: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MissingGroundTruth as e:
        print(f"artigauss: missing ground truth: {e}", file=sys.stderr)
        return EXIT_MISSING_GT
    except NonFiniteLoss as e:
        print(f"artigauss: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as e:
        print(f"artigauss: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
