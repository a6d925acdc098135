"""Command-line entry point: ``flowmix {train,eval,sample,grid}``.

Exit codes: 0 success, 2 invalid input (config, arguments, files, shapes),
3 numeric failure during training or evaluation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, evaluation, experiment
from .autodiff import no_grad
from .config import load_config, load_dataset_config
from .errors import ContractError, FlowmixError, NumericError
from .evaluation import MAX_BRUTE_FORCE_K
from .mixture import assign_cluster, elbo, exact_log_evidence

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _seed(args, default: int) -> int:
    return default if getattr(args, "seed", None) is None else args.seed


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    out = args.out_dir or cfg.output.dir
    result = experiment.run(cfg, out)
    final = result.metrics[-1] if result.metrics else None
    summary = {"checkpoint": str(Path(out) / cfg.output.checkpoint),
               "metrics": str(Path(out) / cfg.output.metrics),
               "epochs_logged": len(result.metrics)}
    if final is not None:
        summary["final_elbo"] = final.elbo
    print(json.dumps(summary))
    return EXIT_OK


def evaluate(model, data) -> dict:
    """Mean log-evidence and ELBO, plus clustering metrics when labels exist."""
    if data.dim != model.dim:
        raise ContractError(f"checkpoint has D={model.dim} but dataset has D={data.dim}")
    model.eval()
    with no_grad():
        _, terms = elbo(model, data.points, 1.0)
    out = {"n": len(data), "mean_log_evidence": float(exact_log_evidence(model, data.points).mean()),
           "elbo": float(terms.elbo.mean())}
    if data.labels is not None:
        pred = assign_cluster(model, data.points)
        table = evaluation.contingency(data.labels, pred, data.n_classes, model.n_components)
        out["contingency"] = table.to_dict()
        if max(table.counts.shape) <= MAX_BRUTE_FORCE_K:
            acc, mapping = evaluation.cluster_accuracy(data.labels, pred)
            out["cluster_accuracy"] = acc
            out["cluster_to_label"] = {str(k): v for k, v in mapping.items()}
    return out


def cmd_eval(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    dcfg = load_dataset_config(args.dataset_config)
    seed = _seed(args, dcfg.seed)
    data = experiment.load_dataset(dcfg.dataset, experiment.seeds(seed)["data"])
    metrics = evaluate(model, data)
    text = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_sample(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    if args.component == "all":
        comps = None
    else:
        try:
            k = int(args.component)
        except ValueError:
            raise ContractError(f"--component must be 'all' or an integer, got {args.component!r}")
        if not 0 <= k < model.n_components:
            raise ContractError(f"component {k} outside [0, {model.n_components})")
        comps = [k]
    if args.n < 0:
        raise ContractError("--n must be non-negative")
    evaluation.sample_dump(model, args.n, _seed(args, 0), args.out, comps)
    return EXIT_OK


def _grid_paths(out: str, kind: str) -> tuple[Path, Path]:
    base = Path(out)
    if base.suffix in (".csv", ".pgm", ".ppm"):
        base = base.with_suffix("")
    raster = ".pgm" if kind == "density" else ".ppm"
    return base.with_name(base.name + ".csv"), base.with_name(base.name + raster)


def cmd_grid(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    if model.dim != 2:
        raise ContractError(f"grids need a D=2 checkpoint, got D={model.dim}")
    csv_path, raster_path = _grid_paths(args.out, args.kind)
    if args.kind == "density":
        g = evaluation.density_grid(model, args.bounds, args.res)
        g = evaluation.Grid(g.xs, g.ys, np.exp(g.values), g.dx, g.dy)
        evaluation.write_pgm(raster_path, g.values)
    else:
        g = evaluation.partition_grid(model, args.bounds, args.res)
        evaluation.write_ppm(raster_path, g.values)
    g.to_csv(csv_path)
    print(json.dumps({"csv": str(csv_path), "raster": str(raster_path)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="global seed (overrides config seeds)")
    p = argparse.ArgumentParser(prog="flowmix", parents=[common],
                                description="Mixtures of normalizing flows.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train from a TOML config")
    t.add_argument("config")
    t.add_argument("--out-dir", default=None, help="override the config's output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset_config")
    e.add_argument("--out", default=None, help="also write the JSON here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", parents=[common], help="dump samples per component")
    s.add_argument("checkpoint")
    s.add_argument("--component", default="all")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    g = sub.add_parser("grid", parents=[common], help="density or partition grid (D=2)")
    g.add_argument("checkpoint")
    g.add_argument("--kind", choices=["density", "partition"], default="density")
    g.add_argument("--bounds", type=float, nargs="+", default=[-8.0, 8.0],
                   help="lo hi, or xlo xhi ylo yhi")
    g.add_argument("--res", type=int, default=200)
    g.add_argument("--out", required=True, help="output base path; .csv and a raster are written")
    g.set_defaults(func=cmd_grid)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if not hasattr(args, "seed"):
        args.seed = None
    try:
        return args.func(args)
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FlowmixError, IndexError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
