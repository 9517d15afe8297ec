"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical non-convergence. Every command writes a ``manifest.json`` next to
its outputs recording the command line, the full configuration, the seed,
package versions, timestamps and SHA-256 digests of inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bma import PriorSpec, SamcConfig, run_bma
from .cohort import (
    DoseMatrix,
    collapse_to_vector,
    read_cohort_csv,
    read_matrix_binary,
    read_matrix_csv,
    summarize_matrix,
    write_cohort_csv,
    write_matrix_binary,
    write_matrix_csv,
)
from .config import apply_paper_scale, defaults, dump_config, load_config
from .errors import ConvergenceError, DoseBmaError, ValidationError
from .freqfit import fit_ml
from .harness import (
    SCENARIOS,
    BenchmarkConfig,
    TrueScenario,
    build_matrices,
    classical_error_sweep,
    run_benchmark,
    simulate_disease,
    true_alpha_vector,
    write_csv,
    write_report,
    write_sweep,
)

logger = logging.getLogger("dosebma")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ---------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _floats(s: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _read_matrix(path, kind: str) -> tuple[DoseMatrix, list[str] | None]:
    p = Path(path)
    if p.suffix == ".bin":
        return read_matrix_binary(p, kind), None
    return read_matrix_csv(p, kind)


def _write_matrix(path: Path, matrix: DoseMatrix, ids, binary: bool) -> Path:
    if binary:
        path = path.with_suffix(".bin")
        write_matrix_binary(path, matrix)
    else:
        write_matrix_csv(path, matrix, ids)
    return path


def _config_tree(args) -> dict:
    tree = load_config(args.config) if args.config else defaults()
    if args.paper_scale:
        tree = apply_paper_scale(tree)
    if args.seed is not None:
        tree["run"]["seed"] = args.seed
    if args.threads is not None:
        tree["run"]["threads"] = args.threads
    return tree


def _benchmark_config(tree: dict, scenario: str | None = None) -> BenchmarkConfig:
    d, b, m, p = tree["dose"], tree["benchmark"], tree["mcmc"], tree["priors"]
    return BenchmarkConfig(
        scenario=scenario or d["scenario"],
        n_subjects=d["n_subjects"],
        n_vectors=d["n_vectors"],
        n_resamples=d["n_resamples"],
        slopes=b["slopes"],
        n_groups=b["n_groups"],
        per_group=b["per_group"],
        methods=b["methods"],
        n_samples=b["n_samples"],
        burn_in=b["burn_in"],
        t0=m["t0"],
        sampler=m["sampler"],
        alpha_sd=math.sqrt(p["alpha_variance"]),
        beta_mean=p["beta_prior_mean"],
        baseline_shift=b["baseline_shift"],
        true_alpha=(("age", b["alpha_age"]), ("male", b["alpha_male"]), ("female", b["alpha_female"])),
        male_fraction=d["male_fraction"],
    )


def _samc_config(tree: dict) -> SamcConfig:
    m = tree["mcmc"]
    return SamcConfig(partition=m["partition"], S=m["n_regions"], t0=m["t0"], p_within=m["p_within"],
                      adapt=m["adapt"])


def _priors(tree: dict) -> PriorSpec:
    return PriorSpec(alpha_sd=math.sqrt(tree["priors"]["alpha_variance"]), beta_mean=tree["priors"]["beta_prior_mean"])


class Run:
    """Collects inputs/outputs for the manifest of one command."""

    def __init__(self, args, argv, tree):
        self.args = args
        self.argv = list(argv)
        self.tree = tree
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def write_manifest(self, extra: dict | None = None) -> Path:
        text = dump_config(self.tree)
        manifest = {
            "format": "dosebma-format v1",
            "command": self.args.command,
            "argv": self.argv,
            "config": text,
            "config_digest": hashlib.sha256(text.encode()).hexdigest(),
            "seed": self.tree["run"]["seed"],
            "versions": {"dosebma": __version__, "numpy": np.__version__,
                         "scipy": __import__("scipy").__version__, "python": platform.python_version()},
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "inputs": {str(p): sha256_file(p) for p in self.inputs},
            "outputs": {p.name: sha256_file(p) for p in self.outputs},
        }
        if extra:
            manifest.update(extra)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# -- commands ----------------------------------------------------------------------


def cmd_simulate_doses(run: Run) -> int:
    a, tree = run.args, run.tree
    cfg = _benchmark_config(tree, a.scenario)
    cohort, mats = build_matrices(cfg, tree["run"]["seed"])
    p = run.out / "cohort.csv"
    write_cohort_csv(p, cohort)
    run.outputs.append(p)
    for name in a.kinds:
        run.outputs.append(_write_matrix(run.out / f"doses_{name}.csv", mats[name], cohort.ids, a.binary))
    run.write_manifest({"scenario": SCENARIOS[cfg.scenario], "dose_config": cfg.dose_config().to_dict()})
    return EXIT_OK


def cmd_simulate_disease(run: Run) -> int:
    a, tree = run.args, run.tree
    cohort = read_cohort_csv(a.cohort)
    matrix, _ = _read_matrix(a.doses, "raw-realizations")
    run.inputs += [Path(a.cohort), Path(a.doses)]
    if matrix.N != cohort.N:
        raise ValidationError(f"dose matrix has {matrix.N} rows, cohort has {cohort.N} subjects")
    if not 0 <= a.column < matrix.K:
        raise ValidationError(f"column {a.column} out of range (K = {matrix.K})")
    b = tree["benchmark"]
    alpha = true_alpha_vector(cohort, {"age": b["alpha_age"], "male": b["alpha_male"], "female": b["alpha_female"]},
                              b["baseline_shift"])
    sc = TrueScenario(a.beta, alpha, a.column, SCENARIOS[tree["dose"]["scenario"]])
    diseased = simulate_disease(cohort, matrix.column(a.column), sc, tree["run"]["seed"])
    p = run.out / "cohort_disease.csv"
    write_cohort_csv(p, diseased)
    run.outputs.append(p)
    run.write_manifest()
    return EXIT_OK


def _dose_vector(a, matrix: DoseMatrix):
    if a.column is not None:
        if not 0 <= a.column < matrix.K:
            raise ValidationError(f"column {a.column} out of range (K = {matrix.K})")
        return matrix.column(a.column)
    return collapse_to_vector(matrix, a.stat)


def cmd_fit_conventional(run: Run) -> int:
    a = run.args
    cohort = read_cohort_csv(a.cohort)
    matrix, _ = _read_matrix(a.doses, "raw-realizations")
    run.inputs += [Path(a.cohort), Path(a.doses)]
    fit = fit_ml(cohort, _dose_vector(a, matrix))
    p = run.out / "conventional_fit.csv"
    rows = [("beta_hat", fit.beta_hat), ("ci_low", fit.ci_low), ("ci_high", fit.ci_high),
            ("converged", fit.converged), ("boundary", fit.boundary), ("n_iter", fit.n_iter),
            ("loglik", fit.loglik), ("wald_se", fit.wald_se)]
    rows += [(f"alpha_{n}", float(v)) for n, v in zip(cohort.covariate_names, fit.alpha_hat)]
    write_csv(p, ["quantity", "value"], rows)
    run.outputs.append(p)
    run.write_manifest({"message": fit.message})
    if not fit.converged:
        raise ConvergenceError(f"maximum likelihood did not converge: {fit.message}")
    return EXIT_OK


def cmd_fit_bma(run: Run) -> int:
    a, tree = run.args, run.tree
    cohort = read_cohort_csv(a.cohort)
    kind = {"raw": "raw-realizations", "cm": "conditional-mean", "cmd": "conditional-median"}[a.kind]
    matrix, _ = _read_matrix(a.doses, kind)
    run.inputs += [Path(a.cohort), Path(a.doses)]
    if a.exclude is not None:
        matrix = matrix.without_column(a.exclude)
    m = tree["mcmc"]
    res = run_bma(cohort, matrix, _priors(tree), _samc_config(tree), n_samples=m["n_samples"], burn_in=m["burn_in"],
                  sampler=m["sampler"], seed=tree["run"]["seed"], keep_trace=a.trace)
    p = run.out / "bma_result.csv"
    rows = []
    for name, s in [("beta", res.beta_summary)] + [(f"alpha_{n}", s) for n, s in
                                                     zip(cohort.covariate_names, res.alpha_summary)]:
        rows.append((name, s.mean, s.median, s.ci_low, s.ci_high, s.mcse))
    write_csv(p, ["parameter", "mean", "median", "ci_low", "ci_high", "mcse"], rows)
    w = run.out / "weights.csv"
    labels = matrix.labels
    if "excluded_column" in matrix.provenance:
        from .cohort import column_label
        ex = matrix.provenance["excluded_column"]
        labels = [column_label(k if k < ex else k + 1) for k in range(matrix.K)]
    with open(w, "w", newline="") as fh:
        fh.write("# dosebma-format v1\n")
        for lab, v in zip(labels, res.weights):
            fh.write(f"{lab},{float(v)!r}\n")
    d = run.out / "diagnostics.json"
    diag = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in res.diagnostics.items()}
    d.write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    run.outputs += [p, w, d]
    if a.trace:
        t = run.out / "trace.csv"
        tr = res.trace
        write_csv(t, ["t", "gamma", "beta", *[f"alpha_{n}" for n in cohort.covariate_names], "energy", "log_weight",
                      "region"],
                  ([int(tr["t"][i]), int(tr["gamma"][i]), float(tr["beta"][i]), *map(float, tr["alpha"][i]),
                    float(tr["energy"][i]), float(tr["log_weight"][i]), int(tr["region"][i])]
                   for i in range(tr["beta"].size)))
        run.outputs.append(t)
    run.write_manifest()
    return EXIT_OK


def _scenarios(arg: str | None, tree: dict) -> list[str]:
    s = arg or tree["dose"]["scenario"]
    return ["external", "total"] if s == "both" else [s]


def cmd_benchmark(run: Run) -> int:
    a, tree = run.args, run.tree
    reports = {}
    cfg = None
    for sc in _scenarios(a.scenario, tree):
        cfg = _benchmark_config(tree, sc)
        reports[sc] = run_benchmark(cfg, seed=tree["run"]["seed"], out=run.out, threads=tree["run"]["threads"])
    run.outputs += write_report(reports, cfg, run.out)
    run.write_manifest()
    return EXIT_OK


def cmd_sweep(run: Run) -> int:
    a, tree = run.args, run.tree
    s = tree["sweep"]
    gsd = a.gsd if a.gsd is not None else s["gsd"]
    cfg = _benchmark_config(tree, a.scenario)
    rows = classical_error_sweep(cfg, gsd, s["methods"], tree["run"]["seed"], true_beta=s["true_beta"],
                                 n_sets=s["n_sets"], threads=tree["run"]["threads"])
    p = run.out / "sweep.csv"
    write_sweep(p, rows)
    run.outputs.append(p)
    run.write_manifest()
    return EXIT_OK


def cmd_summarize(run: Run) -> int:
    a = run.args
    rows = []
    for path in a.doses:
        kind = "raw-realizations"
        name = Path(path).stem
        if "cmd" in name or "median" in name:
            kind = "conditional-median"
        elif "cm" in name or "mean" in name:
            kind = "conditional-mean"
        matrix, _ = _read_matrix(path, kind)
        run.inputs.append(Path(path))
        summ = summarize_matrix(matrix)
        for stat, mv, md, lo, hi in summ.rows():
            rows.append([name, stat, mv, md, lo, hi])
    p = run.out / "table1_analog.csv"
    write_csv(p, ["matrix", "statistic", "mean_vector", "median_vector", "ci_low", "ci_high"], rows)
    run.outputs.append(p)
    run.write_manifest()
    return EXIT_OK


COMMANDS = {
    "simulate-doses": cmd_simulate_doses,
    "simulate-disease": cmd_simulate_disease,
    "fit-conventional": cmd_fit_conventional,
    "fit-bma": cmd_fit_bma,
    "benchmark": cmd_benchmark,
    "sweep": cmd_sweep,
    "summarize": cmd_summarize,
}


def build_parser() -> argparse.ArgumentParser:
    def common(suppress: bool) -> argparse.ArgumentParser:
        # subcommand copies must not overwrite values given before the subcommand
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        c = _Parser(add_help=False)
        c.add_argument("--seed", type=int, default=dflt(None), help="master seed (overrides [run] seed)")
        c.add_argument("--config", default=dflt(None), help="INI configuration file")
        c.add_argument("--out", default=dflt("."), help="output directory")
        c.add_argument("--threads", type=int, default=dflt(None), help="worker processes for the harness")
        c.add_argument("--paper-scale", action="store_true", default=dflt(False),
                       help="N = 2376, K = 5000, 30 sets, 40k + 10k MCMC")
        c.add_argument("-v", "--verbose", action="store_true", default=dflt(False))
        return c

    parser = _Parser(prog="dosebma", description=__doc__.splitlines()[0], parents=[common(False)])
    parser.add_argument("--version", action="version", version=f"dosebma {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate-doses", parents=[common(True)], help="synthetic cohort and dose matrices")
    p.add_argument("--scenario", choices=sorted(SCENARIOS), default=None)
    p.add_argument("--kinds", type=lambda s: [x for x in s.split(",") if x], default=["raw", "cm", "cmd"],
                   help="comma list from raw,cm,cmd")
    p.add_argument("--binary", action="store_true", help="write matrices in the binary format")

    p = sub.add_parser("simulate-disease", parents=[common(True)], help="disease status from one dose column")
    p.add_argument("--cohort", required=True)
    p.add_argument("--doses", required=True)
    p.add_argument("--column", type=int, required=True, help="0-based generating column")
    p.add_argument("--beta", type=float, required=True, help="true ERR per Gy")

    p = sub.add_parser("fit-conventional", parents=[common(True)], help="maximum likelihood on one dose vector")
    p.add_argument("--cohort", required=True)
    p.add_argument("--doses", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--stat", choices=["mean", "median"], default="median", help="collapse the matrix by this statistic")
    g.add_argument("--column", type=int, default=None, help="use this single column instead")

    p = sub.add_parser("fit-bma", parents=[common(True)], help="Bayesian model averaging over dose vectors")
    p.add_argument("--cohort", required=True)
    p.add_argument("--doses", required=True)
    p.add_argument("--kind", choices=["raw", "cm", "cmd"], default="raw")
    p.add_argument("--exclude", type=int, default=None, help="drop this 0-based column")
    p.add_argument("--trace", action="store_true", help="also write the post-burn-in trace")

    p = sub.add_parser("benchmark", parents=[common(True)], help="full performance-testing protocol")
    p.add_argument("--scenario", choices=["external", "total", "both"], default=None)

    p = sub.add_parser("sweep", parents=[common(True)], help="classical-error sweep")
    p.add_argument("--scenario", choices=["external", "total"], default=None)
    p.add_argument("--gsd", type=_floats, default=None, help="comma list of GSD levels")

    p = sub.add_parser("summarize", parents=[common(True)], help="summary statistics of dose matrices")
    p.add_argument("doses", nargs="+")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("dosebma: a subcommand is required (see --help)")
        if args.threads is not None and args.threads < 1:
            raise UsageError("dosebma: --threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        tree = _config_tree(args)
        run = Run(args, argv, tree)
        return COMMANDS[args.command](run)
    except ConvergenceError as exc:
        print(f"dosebma: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (DoseBmaError, OSError) as exc:
        print(f"dosebma: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
