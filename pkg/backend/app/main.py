"""
Command-line entry point for the random partition kernel toolkit.

    python -m app.main gp --dataset mpg-like --kernel rf --m 200
"""

import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from app import __version__
from app.cli.commands import COMMANDS, PARTITION_KERNELS
from app.config import Settings, get_settings
from app.schemas import FastClusterConfig, RunConfig, SamplerSpec, TreeConfig
from core.errors import DataError, ParameterError, ResourceError, SolverError
from utils.helpers import parse_int_list, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_DATA = 3
EXIT_PARAMETER = 4
EXIT_SOLVER = 5
EXIT_RESOURCE = 6


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpk",
        description="Random partition kernels: sampling, GP regression and kernel PCA",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", default="mpg-like", help="Registered dataset name or CSV path")
    common.add_argument("--target", default=None, help="Target column of a CSV dataset")
    common.add_argument("--kernel", default="rf", choices=["rf", "fastcluster", "rbf", "linear", "categorical"])
    common.add_argument("--m", type=int, default=None, help="Partitions per ensemble")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--noise", type=float, default=None, help="GP noise variance")
    common.add_argument("--precond-sigma", type=float, default=None, help="Preconditioner shift (default: noise)")
    common.add_argument("--tol", type=float, default=None, help="CG relative residual tolerance")
    common.add_argument("--max-iter", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--train-fraction", type=float, default=0.8)
    common.add_argument("--out", default=None, help="Output directory")
    common.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    sampler = common.add_argument_group("sampler")
    sampler.add_argument("--mtry", type=int, default=None)
    sampler.add_argument("--min-leaf", type=int, default=5)
    sampler.add_argument("--max-depth", type=int, default=None)
    sampler.add_argument("--no-bootstrap", action="store_true")
    sampler.add_argument("--center-exponent", type=int, default=None, help="Fast Cluster maximum center exponent h")
    sampler.add_argument("--dim-keep-prob", type=float, default=0.5)

    sub.add_parser("sample", parents=[common], help="Draw and save a partition ensemble")
    gp = sub.add_parser("gp", parents=[common], help="GP regression on a train/test split")
    gp.add_argument("--diagnostics", action="store_true", help="Report CG vs PCG iterations and a condition estimate")
    msweep = sub.add_parser("msweep", parents=[common], help="Test metrics against m")
    msweep.add_argument("--m-list", type=parse_int_list, default=None, help="Ascending m values, e.g. 1,10,50,200")
    msweep.add_argument("--n-seeds", type=int, default=5)
    msweep.add_argument("--trials", type=int, default=20, help="Ensembles for the kernel-entry variance")
    scaling = sub.add_parser("scaling", parents=[common], help="KPCA wall-time against N")
    scaling.add_argument("--n-list", type=parse_int_list, default=None, help="Dataset sizes, e.g. 500,1000,2000")
    scaling.add_argument("--k", type=int, default=2)
    kpca = sub.add_parser("kpca", parents=[common], help="Kernel PCA coordinates")
    kpca.add_argument("--k", type=int, default=2)
    kpca.add_argument("--project-test", action="store_true", help="Fit on the train split and project test rows")
    return parser


def config_from_args(args: argparse.Namespace, settings: Settings) -> RunConfig:
    """Resolve CLI flags against settings defaults into a validated RunConfig."""
    default_m = settings.scaling_m if args.command == "scaling" else settings.default_m
    sampler = None
    if args.kernel in PARTITION_KERNELS:
        sampler = SamplerSpec(
            kind=args.kernel,
            seed=args.seed,
            tree=TreeConfig(
                mtry=args.mtry,
                bootstrap=not args.no_bootstrap,
                min_leaf=args.min_leaf,
                max_depth=args.max_depth,
            ),
            fast_cluster=FastClusterConfig(h=args.center_exponent, dim_keep_prob=args.dim_keep_prob),
        )
    return RunConfig(
        command=args.command,
        dataset=args.dataset,
        target=args.target,
        kernel=args.kernel,
        m=args.m if args.m is not None else default_m,
        m_list=getattr(args, "m_list", None) or [],
        n_list=getattr(args, "n_list", None) or [],
        seed=args.seed,
        n_seeds=getattr(args, "n_seeds", 1),
        noise=args.noise if args.noise is not None else settings.jitter,
        precond_sigma=args.precond_sigma,
        tol=args.tol if args.tol is not None else settings.cg_tol,
        max_iter=args.max_iter if args.max_iter is not None else settings.cg_max_iter,
        threads=args.threads if args.threads is not None else settings.threads,
        train_fraction=args.train_fraction,
        k=getattr(args, "k", 2),
        trials=getattr(args, "trials", 20),
        project_test=getattr(args, "project_test", False),
        out=args.out,
        sampler=sampler,
        diagnostics=getattr(args, "diagnostics", False),
        version=__version__,
    )


def run(argv: Optional[List[str]] = None) -> int:
    """Parse, dispatch and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    settings = get_settings()
    setup_logging(args.log_level or settings.log_level)

    try:
        config = config_from_args(args, settings)
        logger.info(f"Running '{config.command}' on {config.dataset} with kernel {config.kernel}")
        COMMANDS[config.command](config, settings)
    except (ValidationError, ParameterError) as e:
        logger.error(f"Invalid parameters: {e}")
        return EXIT_PARAMETER
    except DataError as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except SolverError as e:
        logger.error(f"Solver failure: {e}")
        return EXIT_SOLVER
    except ResourceError as e:
        logger.error(f"Resource limit: {e}")
        return EXIT_RESOURCE
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_UNEXPECTED
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
