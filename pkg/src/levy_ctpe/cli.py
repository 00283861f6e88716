"""levy-ctpe command line: simulate | fit | evaluate | reproduce | kernel-dump."""

from __future__ import annotations

import os

# Bitwise reproducibility: BLAS reductions must not depend on the machine's
# thread count.  Parallelism is across repeats (LEVY_CTPE_THREADS) instead.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[_var] = "1"

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import ConfigError, RunConfig, config_from_dict, load_config  # noqa: E402

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NONCONVERGED = 4
EXIT_SOLVER = 5


def _threads() -> int:
    raw = os.environ.get("LEVY_CTPE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError("LEVY_CTPE_THREADS", f"expected an integer, got {raw!r}") from None


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="levy-ctpe", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the seed(s) in the configuration")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    sp = sub.add_parser("simulate", help="generate a trajectory or pair dataset")
    common(sp)
    sp.add_argument("--scale", type=float, default=1.0, help="multiply the trajectory count")

    sp = sub.add_parser("fit", help="recover coefficients from a dataset")
    common(sp)
    sp.add_argument("--data", type=Path, help="dataset CSV (default: dataset.path or simulate)")
    sp.add_argument("--no-tcf", action="store_true", help="pin the tail correction factor to 0")

    sp = sub.add_parser("evaluate", help="solve the value equation")
    common(sp)
    sp.add_argument("--theta", type=Path, help="theta JSON from a fit (default: ground truth)")

    sp = sub.add_parser("reproduce", help="rerun a numerical example at desk scale")
    sp.add_argument("example", help="4.1, 4.2, 4.3, 4.4, 4.5 or study")
    common(sp)
    sp.add_argument("--scale", type=float, help="multiply trajectory and trial counts")
    sp.add_argument("--no-tcf", action="store_true", help="drop the TCF variant from comparisons")

    sp = sub.add_parser("kernel-dump", help="print density, gradients and branch data as JSON")
    sp.add_argument("--y", type=float, required=True)
    sp.add_argument("--t", type=float, required=True)
    sp.add_argument("--d-o", type=float, required=True)
    sp.add_argument("--d-f", type=float, required=True)
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--out", type=Path, help="write JSON here instead of stdout")
    return p


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({}).validate()
    if args.config and cfg.dataset.path and not Path(cfg.dataset.path).is_absolute():
        cfg.dataset.path = str((args.config.parent / cfg.dataset.path).resolve())
    if args.config and cfg.dynamics.theta_file and not Path(cfg.dynamics.theta_file).is_absolute():
        cfg.dynamics.theta_file = str((args.config.parent / cfg.dynamics.theta_file).resolve())
    if getattr(args, "seed", None) is not None:
        cfg.dataset.seed = cfg.fit.seed = cfg.study.seed = args.seed
    if getattr(args, "no_tcf", False):
        cfg.fit.no_tcf = True
    return cfg


def _setup_logging(out: Path | None) -> None:
    logger = logging.getLogger("levy_ctpe")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(fmt)
    logger.addHandler(h)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / "run.log", mode="w")
        fh.setFormatter(fmt)
        logger.addHandler(fh)


def _kernel_dump(args) -> int:
    from .ffpe_kernel import ALL_KINDS, density_integrals

    res = density_integrals(ALL_KINDS, args.y, args.t, args.d_o, args.d_f, args.alpha)
    vals = res.values
    p = max(float(vals[0]) / 3.141592653589793, 1e-300)
    payload = {
        "query": {"y": args.y, "t": args.t, "d_o": args.d_o, "d_f": args.d_f, "alpha": args.alpha},
        "p": p,
        "integrals": {k: float(v) for k, v in zip(ALL_KINDS, vals)},
        "dlnp": {
            "b": args.t * float(vals[1]) / 3.141592653589793 / p,
            "d_o": -args.t * float(vals[2]) / 3.141592653589793 / p,
            "d_f": -args.t * float(vals[3]) / 3.141592653589793 / p,
        },
        "converged": {k: bool(c) for k, c in zip(ALL_KINDS, res.converged)},
        "branch": "scaled" if bool(res.scaled) else "direct",
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        print(text)
    return EXIT_OK


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    from . import experiments as ex
    from .value_pide import SolverError

    try:
        if args.command == "kernel-dump":
            return _kernel_dump(args)
        cfg = _load(args)
        _setup_logging(args.out)
        if args.command == "simulate":
            cfg.dataset.num_traj = ex.scaled_count(cfg.dataset.num_traj, args.scale)
            ex.run_simulate(cfg, args.out)
        elif args.command == "fit":
            if args.data is not None:
                if not args.data.exists():
                    raise ex.DataError(f"dataset not found: {args.data}")
                cfg.dataset.path = str(args.data.resolve())
            metrics = ex.run_fit(cfg, args.out)
            if not metrics["converged"]:
                logging.getLogger("levy_ctpe").warning("moving average did not converge within the step limit")
                return EXIT_NONCONVERGED
        elif args.command == "evaluate":
            if args.theta is not None and not args.theta.exists():
                raise ex.DataError(f"theta file not found: {args.theta}")
            ex.run_evaluate(cfg, args.out, args.theta)
        elif args.command == "reproduce":
            if args.scale is not None:
                cfg.reproduce.scale = args.scale
            if args.seed is not None:
                cfg.reproduce.seed = args.seed
            cfg.validate()
            ex.run_reproduce(args.example, cfg, args.out, _threads())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
