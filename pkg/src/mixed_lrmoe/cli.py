"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 fit stopped before converging
(archive still written), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analytics
from .ecm import fit
from .errors import InitializationError, InvalidArgumentError, InvalidConfigurationError
from .formats import (
    SCHEMA_VERSION,
    ModelArchive,
    model_to_dict,
    read_archive,
    read_config,
    read_simspec,
    read_table,
    write_archive,
    write_dataset,
    write_table,
)
from .model import RandomEffectDesign
from .simulation import simulate
from .variational import VariationalPosterior

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 2, 3, 4

logger = logging.getLogger("mixed_lrmoe")


def _cmd_simulate(args) -> int:
    spec = read_simspec(args.spec)
    sim = simulate(spec)
    labels = [[str(k + 1) for k in range(S)] for S in spec.model.design.S]
    write_dataset(args.out, sim.data, labels)
    truth = {
        "schema_version": SCHEMA_VERSION,
        "n": spec.n,
        "seed": spec.seed,
        "model": model_to_dict(spec.model),
        "factor_levels": labels,
        "w": [w.tolist() for w in sim.w],
        "labels": sim.labels.tolist(),
    }
    truth_path = Path(args.truth) if args.truth else Path(str(args.out) + ".truth.json")
    truth_path.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    print(f"wrote {spec.n} rows to {args.out} and ground truth to {truth_path}")
    return EXIT_OK


def _extend_for_new_factors(archive: ModelArchive, design: RandomEffectDesign):
    """Warm-start parameters padded with prior entries for factors the archive lacks."""
    post = archive.posterior
    mus, s2s = [], []
    for l, S in enumerate(design.S):
        extra = S - post.mu[l].size
        mus.append(np.concatenate([post.mu[l], np.zeros(extra)]))
        s2s.append(np.concatenate([post.sigma2[l], np.ones(extra)]))
    return archive.model.replace(design=design), VariationalPosterior(tuple(mus), tuple(s2s))


def _cmd_fit(args) -> int:
    config = read_config(args.config)
    init = None
    if args.init:
        warm = read_archive(args.init)
        table = read_table(args.data, factor_levels=warm.factor_levels, covariates=warm.covariates)
        init = _extend_for_new_factors(warm, table.design)
    else:
        table = read_table(args.data)
    data = table.dataset()
    model, post, report = fit(data, config, init=init, design=table.design)
    archive = ModelArchive(model, post, table.factor_levels, table.covariates, table.responses, config, report)
    write_archive(args.out, archive)

    trace = report.elbo_trace
    print(report.summary())
    if trace:
        print(f"ELBO trace: {len(trace)} values, first {trace[0]:.6f}, last {trace[-1]:.6f}, "
              f"min {min(trace):.6f}, max {max(trace):.6f}")
    for msg in report.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    if not np.isfinite(report.final_elbo):
        return EXIT_NUMERICAL
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def _read_scoring_table(args, archive: ModelArchive, extra=(), require_response=False):
    return read_table(args.data, factor_levels=archive.factor_levels, covariates=archive.covariates,
                      extra_columns=extra, require_response=require_response)


def _cmd_predict(args) -> int:
    archive = read_archive(args.archive)
    table = _read_scoring_table(args, archive)
    model, post = archive.model, archive.posterior
    probs = analytics.class_probs_rows(table.X, table.factor_index, post, model, args.M, args.seed)
    premium = probs @ analytics.class_means(model)
    mean, sd, _ = analytics.effect_moments(post, table.factor_index)

    header = ["row", "premium"] + [f"p{j + 1}" for j in range(model.g)]
    cols = [[str(i + 1) for i in range(table.X.shape[0])], premium] + [probs[:, j] for j in range(model.g)]
    for l in range(model.L):
        name = f"f{l + 1}"
        header += [name, f"mean_{name}", f"var_{name}"]
        cols += [[table.factor_levels[l][k] for k in table.factor_index[:, l]], mean[:, l], sd[:, l] ** 2]
        for c in args.coverage:
            z = analytics.interval_multiplier(c)
            tag = f"{100 * c:g}"
            header += [f"lo{tag}_{name}", f"hi{tag}_{name}"]
            cols += [mean[:, l] - z * sd[:, l], mean[:, l] + z * sd[:, l]]
    write_table(args.out, header, cols)
    print(f"predicted {table.X.shape[0]} rows; {table.n_unseen} row(s) with unseen factor ids used the prior")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    archive = read_archive(args.archive)
    loss_is_response = args.loss_column in archive.responses
    extra = (args.loss_column,) if args.loss_column and not loss_is_response else ()
    table = _read_scoring_table(args, archive, extra, require_response=True)
    model, post = archive.model, archive.posterior
    config = archive.config
    M = args.M or (config.eval_M or config.M if config else 1000)
    seed = args.seed if args.seed is not None else (config.seed if config else 0)
    scores = analytics.evaluate(model, post, table.dataset(), M=M, seed=seed)
    scores["M"], scores["seed"] = M, seed

    if args.loss_column:
        losses = table.Y[:, archive.responses.index(args.loss_column)] if loss_is_response else table.extra[args.loss_column]
        premium = analytics.premium_rows(table.X, table.factor_index, post, model, args.premium_M, seed)
        curve = analytics.ordered_lorenz(premium, losses, n_boot=args.n_boot, seed=seed)
        scores["gini"], scores["gini_se"] = curve.gini, curve.gini_se
        if args.lorenz_out:
            write_table(args.lorenz_out, ["premium_share", "loss_share"], [curve.x, curve.y])
    print(json.dumps(scores, indent=2, sort_keys=True))
    if table.n_unseen:
        print(f"{table.n_unseen} row(s) with unseen factor ids used the prior", file=sys.stderr)
    return EXIT_OK


def _coverage(text: str) -> float:
    c = float(text)
    if not 0.0 < c < 1.0:
        raise argparse.ArgumentTypeError("coverage must lie in (0, 1)")
    return c


def _positive_int(text: str) -> int:
    k = int(text)
    if k < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return k


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixed-lrmoe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset from a simulation spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True, help="dataset CSV")
    p.add_argument("--truth", help="ground-truth JSON (default: <out>.truth.json)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit a model and write an archive")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="archive JSON")
    p.add_argument("--init", help="archive to warm-start from")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="posterior premiums, class probabilities and credible intervals")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--M", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coverage", type=_coverage, nargs="+", default=[0.95])
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="ELBO, approximate log-likelihood, AIC and optional Gini")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--M", type=_positive_int, help="draws for the ELBO (default: the fit's evaluation draws)")
    p.add_argument("--seed", type=int, help="default: the fitting seed")
    p.add_argument("--loss-column", help="column holding realised losses; enables the Lorenz curve")
    p.add_argument("--lorenz-out", help="CSV for the ordered Lorenz curve points")
    p.add_argument("--premium-M", type=_positive_int, default=1000)
    p.add_argument("--n-boot", type=int, default=500)
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with np.errstate(over="ignore", under="ignore"):
            return args.func(args)
    except (InvalidArgumentError, InvalidConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InitializationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
