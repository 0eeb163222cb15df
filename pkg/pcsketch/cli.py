import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
from pydantic import ValidationError

# Local imports
from .config import configure_logging, get_settings
from .engine import engine
from .exceptions import DatasetError, SketchError
from .models import Estimator, ExperimentConfig, ExperimentId, NoiseSpec, SketchParams, SparseVector, Variant
from .services.hashing_service import hashing_service
from .services.privacy_service import privacy_service
from .services.sketch_service import sketch_service

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcsketch",
        description="CountSketch and Private CountSketch: calibration, sketching, queries and experiments."
    )
    parser.add_argument("--log-level", default=None, help="Logging level (default: PCS_LOG_LEVEL or INFO).")
    commands = parser.add_subparsers(dest="command", required=True)

    calibrate = commands.add_parser("calibrate", help="Per-cell sigma and zCDP rho for (epsilon, delta, k).")
    calibrate.add_argument("--eps", type=float, required=True)
    calibrate.add_argument("--delta", type=float, required=True)
    calibrate.add_argument("--k", type=int, required=True)

    sketch = commands.add_parser("sketch", help="Sketch a vector given as an index,value CSV and save it.")
    sketch.add_argument("--input", required=True, help="CSV with columns index,value (0-based indices).")
    sketch.add_argument("--d", type=int, required=True)
    sketch.add_argument("--k", type=int, required=True)
    sketch.add_argument("--b", type=int, required=True)
    sketch.add_argument("--seed", type=int, default=0, help="Hash seed.")
    sketch.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.COUNTSKETCH.value)
    sketch.add_argument("--sigma", type=float, default=None, help="Gaussian noise per cell.")
    sketch.add_argument("--eps", type=float, default=None, help="Calibrate noise to this epsilon.")
    sketch.add_argument("--delta", type=float, default=None)
    sketch.add_argument("--out", required=True)

    query = commands.add_parser("query", help="Point estimates from a saved sketch.")
    query.add_argument("--sketch", required=True)
    query.add_argument("--indices", type=int, nargs="+", required=True)
    query.add_argument("--estimator", choices=[e.value for e in Estimator], default=None)

    experiment = commands.add_parser("experiment", help="Run an experiment and write its CSV.")
    experiment.add_argument("id", choices=[e.value for e in ExperimentId])
    experiment.add_argument("--k", type=int, nargs="+", dest="ks", default=None)
    experiment.add_argument("--b", type=int, default=None)
    experiment.add_argument("--kb", type=int, default=None)
    experiment.add_argument("--d", type=int, default=None)
    experiment.add_argument("--t", type=int, default=None)
    experiment.add_argument("--value", type=float, default=None)
    experiment.add_argument("--sigma", type=float, default=None)
    experiment.add_argument("--eps", type=float, default=None, dest="epsilon")
    experiment.add_argument("--delta", type=float, default=None)
    experiment.add_argument("--trials", type=int, default=None)
    experiment.add_argument("--seed", type=int, default=None)
    experiment.add_argument("--workers", type=int, default=None)
    experiment.add_argument("--estimator", choices=[Estimator.MEDIAN.value, Estimator.MEAN.value], default=None)
    experiment.add_argument("--dataset-path", default=None)
    experiment.add_argument("--max-basket", type=int, default=None)
    experiment.add_argument("--countmin-baseline", action="store_true")
    experiment.add_argument("--out", default=None, help="Output CSV (default: PCS_OUT_DIR/<id>.csv).")

    summary = commands.add_parser("summary", help="Print a dataset summary.")
    summary.add_argument("--dataset-path", required=True)
    summary.add_argument("--kind", choices=["cities", "transactions"], required=True)
    summary.add_argument("--max-basket", type=int, default=None)

    serve = commands.add_parser("serve", help="Run the HTTP query service.")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def cmd_calibrate(args) -> int:
    sigma = privacy_service.calibrate_gaussian(args.eps, args.delta, args.k)
    rho = privacy_service.zcdp_of(sigma, args.k)
    print(f"sigma={sigma!r}")
    print(f"rho={rho!r}")
    return 0


def cmd_sketch(args) -> int:
    try:
        frame = pd.read_csv(args.input)
        entries = frame.groupby("index", sort=True)["value"].sum()
    except (KeyError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"{args.input} must be a CSV with columns index,value") from e
    x = SparseVector(dimension=args.d, indices=entries.index.to_numpy(), values=entries.to_numpy())

    variant = Variant(args.variant)
    params = SketchParams(d=args.d, k=args.k, b=args.b, seed=args.seed)
    family = hashing_service.build_hash_family(params)
    sketch = sketch_service.sketch_vector(x, family, variant)
    privacy_service.privatize(sketch, _noise_for(args, variant))
    sketch_service.save_sketch(sketch, args.out)
    print(f"wrote {args.out} ({sketch.noise_applied.kind.value} noise, scale={sketch.noise_applied.scale!r})")
    return 0


def _noise_for(args, variant: Variant) -> NoiseSpec:
    if args.sigma is not None:
        return NoiseSpec.gaussian(args.sigma)
    if args.eps is None:
        return NoiseSpec.none()
    if variant == Variant.COUNTMIN:
        return NoiseSpec.laplace(privacy_service.calibrate_laplace(args.eps, args.k))
    if args.delta is None:
        raise SketchError("--eps needs --delta for Gaussian noise")
    return NoiseSpec.gaussian(privacy_service.calibrate_gaussian(args.eps, args.delta, args.k))


def cmd_query(args) -> int:
    sketch = sketch_service.load_sketch(args.sketch)
    estimates = sketch_service.estimate_all(sketch, args.indices, args.estimator)
    print("index,estimate")
    for index, estimate in zip(args.indices, estimates):
        print(f"{index},{float(estimate)!r}")
    return 0


def cmd_experiment(args) -> int:
    settings = get_settings()
    fields = {
        "experiment": args.id,
        "ks": args.ks, "b": args.b, "kb": args.kb, "d": args.d, "t": args.t, "value": args.value,
        "sigma": args.sigma, "epsilon": args.epsilon, "delta": args.delta,
        "trials": args.trials if args.trials is not None else settings.trials,
        "seed": args.seed if args.seed is not None else settings.seed,
        "workers": args.workers if args.workers is not None else settings.workers,
        "estimator": args.estimator, "dataset_path": args.dataset_path, "max_basket": args.max_basket,
        "countmin_baseline": args.countmin_baseline,
        "out": args.out or str(Path(settings.out_dir) / f"{args.id}.csv"),
    }
    config = ExperimentConfig(**{key: value for key, value in fields.items() if value is not None})
    result = engine.run(config)
    for name, report in result.series.items():
        s = report.summary
        print(f"{name}: median={s.median!r} q90={s.q90!r} q95={s.q95!r} q99={s.q99!r} max={s.max!r}")
    for name, points in result.curves.items():
        print(f"{name}: " + " ".join(f"k={k}:{p:.3e}" for k, p in points))
    print(f"wrote {config.out}")
    return 0


def cmd_summary(args) -> int:
    sys.stdout.write(engine.summarize(args.dataset_path, args.kind, args.max_basket))
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    uvicorn.run("pcsketch.main:app", host=args.host, port=args.port)
    return 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "sketch": cmd_sketch,
    "query": cmd_query,
    "experiment": cmd_experiment,
    "summary": cmd_summary,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (SketchError, ValidationError, OSError) as e:
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception(f"💥 Unexpected failure in '{args.command}': {e}")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
