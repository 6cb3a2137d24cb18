"""Command line entry point.

    eo1 <stage> --out RUN_DIR [--config FILE] [--seed N]

Stages: gen, train-tok, train-mmae, train-forecast, train-invert, eval,
scale, plot. Exit codes: 0 on success, 2 for invalid input or config,
3 when training diverges.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import DivergenceError, IntegrityError, ValidationError
from .pipeline import STAGES, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eo1",
        description="Observation-space world model toolkit on synthetic data.",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        result = run_stage(args.stage, cfg, args.out)
        _summarize(args.stage, result)
        return 0
    except (ValidationError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


def _summarize(stage: str, result) -> None:
    if stage == "gen":
        mods = [m["instrument_id"] for m in result["modalities"]]
        print(f"gen: wrote dataset with modalities {', '.join(mods)}")
    elif stage == "eval":
        fc = result.forecast
        if fc:
            print(
                f"eval: model mse {fc['model_mse']:.6g} "
                f"vs persistence {fc['persistence_mse']:.6g} "
                f"over {fc['transitions']} transitions"
            )
        else:
            print("eval: wrote metrics.json")
    elif stage == "scale":
        df = result.get("data_fit") or {}
        pf = result.get("param_fit") or {}
        print(
            f"scale: data exponent {df.get('exponent', float('nan')):.4f} "
            f"(r2 {df.get('r_squared', float('nan')):.3f}), "
            f"param exponent {pf.get('exponent', float('nan')):.4f} "
            f"(r2 {pf.get('r_squared', float('nan')):.3f})"
        )
    elif stage == "plot":
        print(f"plot: wrote {len(result)} files")
    else:
        print(f"{stage}: done")


if __name__ == "__main__":
    sys.exit(main())
