"""Command-line front end: threshold tests, first-stage analysis, sequence
export and Monte Carlo experiments over CSV inputs.

Exit codes: 0 success, 2 parse errors, 3 configuration errors, 4 estimation
failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .bootstrap import (
    Multiplier,
    bootstrap_2sls_both,
    bootstrap_ch,
    bootstrap_first_stage,
    bootstrap_gmm_br,
    bootstrap_gmm_mix,
)
from .covariance import VarianceMode
from .data import Dataset, build_grid
from .estimators import (
    LINEAR,
    THRESHOLD,
    fit_first_stage_linear,
    fit_first_stage_threshold,
)
from .exceptions import ConfigError, EstimationError, ParseError
from .montecarlo import (
    CASE_A,
    DgpConfig,
    ExperimentConfig,
    rejection_frequency,
    run_table,
    size_adjusted_power,
)
from .suptests import GMM_BR, GMM_CH, GMM_MIX, TSLS_LR, TSLS_WALD, TestKind

PRETEST = "pretest"

_MULTIPLIERS = {
    "normal": Multiplier.normal,
    "rademacher": Multiplier.rademacher,
    "mammen": Multiplier.mammen,
    "iid": Multiplier.iid_gaussian,
}

_CLI_TESTS = (GMM_CH, GMM_BR, TSLS_LR, TSLS_WALD)


def read_csv_columns(path: str) -> dict[str, np.ndarray]:
    """Strict CSV ingestion: header row, '.' decimals, no missing values."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise ParseError(f"{path}: duplicate column names in header")
        columns: list[list[float]] = [[] for _ in header]
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{row_no}: expected {len(header)} fields, got {len(row)}")
            for col_no, cell in enumerate(row):
                cell = cell.strip()
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}:{row_no}: column {header[col_no]!r}: "
                        f"cannot parse {cell!r} as a number"
                    ) from None
                if not np.isfinite(value):
                    raise ParseError(
                        f"{path}:{row_no}: column {header[col_no]!r}: non-finite value"
                    )
                columns[col_no].append(value)
    if not columns[0]:
        raise ParseError(f"{path}: no data rows")
    return {name: np.asarray(col) for name, col in zip(header, columns)}


def _pick(table: dict[str, np.ndarray], names: list[str], what: str) -> np.ndarray:
    cols = []
    for name in names:
        if name not in table:
            raise ConfigError(f"column {name!r} (for {what}) not found in the input")
        cols.append(table[name])
    return np.column_stack(cols)


def build_dataset_from_args(args, table) -> Dataset:
    used = [args.y, *args.x, *args.z1, *(args.z or []), args.q]
    if len(set(used)) != len(used):
        overlap = sorted({c for c in used if used.count(c) > 1})
        raise ConfigError(f"column used twice in the mapping: {overlap}")
    y = _pick(table, [args.y], "y").ravel()
    x = _pick(table, args.x, "x")
    z1 = _pick(table, args.z1, "z1") if args.z1 else np.empty((len(y), 0))
    if args.intercept:
        z1 = np.column_stack([np.ones(len(y)), z1]) if z1.size else np.ones((len(y), 1))
    if z1.shape[1] == 0:
        raise ConfigError("no exogenous regressors: pass --z1 or keep the intercept")
    z_extra = _pick(table, args.z, "z") if args.z else None
    q = _pick(table, [args.q], "q").ravel()
    z = z1 if z_extra is None else np.column_stack([z1, z_extra])
    try:
        return Dataset(y=y, x=x, z1=z1, z=z, q=q)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _mode_for(args) -> VarianceMode:
    if args.multiplier == "iid":
        return VarianceMode.homoskedastic()
    return VarianceMode.robust()


def _resolve_first_stage(ds, grid, args, seed):
    """Fit the first stage per --first-stage; pretest decides by the LR
    linearity test at the run's level (the documented tiebreaker)."""
    choice = args.first_stage
    report = {"mode": choice}
    if choice == PRETEST:
        lr_res, w_res = bootstrap_first_stage(
            ds, grid, B=args.boot, mult=_MULTIPLIERS[args.multiplier](),
            mode=_mode_for(args), seed=seed, alpha=args.alpha,
        )
        choice = THRESHOLD if lr_res.reject else LINEAR
        report.update(
            pretest_lr=lr_res.observed,
            pretest_lr_pvalue=lr_res.p_value,
            pretest_w=w_res.observed,
            pretest_w_pvalue=w_res.p_value,
            decided=choice,
            tiebreaker="lr",
        )
    fs = fit_first_stage_threshold(ds, grid) if choice == THRESHOLD else fit_first_stage_linear(ds)
    report["kind"] = fs.kind
    if fs.kind == THRESHOLD:
        report["rho_hat"] = fs.rho
    return fs, report


def _echo_config(args, seed) -> dict:
    keys = ("input", "y", "x", "z1", "z", "q", "trim", "boot", "alpha",
            "multiplier", "first_stage", "tests", "format")
    out = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    out["seed"] = seed
    return out


def _run_one_test(ds, grid, kind: str, fs, args, seed):
    mult = _MULTIPLIERS[args.multiplier]()
    mode = _mode_for(args)
    if kind == GMM_BR:
        res = bootstrap_gmm_br(ds, grid, args.boot, mult, mode, seed, args.alpha)
    elif kind == GMM_CH:
        res = bootstrap_ch(ds, grid, args.boot, mult, mode, seed, args.alpha)
    elif kind == GMM_MIX:
        res = bootstrap_gmm_mix(ds, grid, args.boot, mult, mode, seed, args.alpha)
    else:
        lr_res, w_res = bootstrap_2sls_both(
            ds, grid, fs, args.boot, mult, mode, seed, args.alpha
        )
        res = lr_res if kind == TSLS_LR else w_res
    return res


def _result_report(kind: str, res) -> dict:
    seq = res.sequence
    return {
        "test": kind,
        "statistic": res.observed,
        "critical_value": res.critical_value,
        "p_value": res.p_value,
        "reject": res.reject,
        "gamma_hat": seq.argmax_gamma if seq is not None else None,
        "skipped": [
            {"gamma": s.gamma, "reason": s.reason} for s in (seq.skipped if seq else ())
        ],
        "B": res.B,
        "n_failed_replicates": res.n_failed,
        "alpha": res.alpha,
    }


def _emit(payload, args):
    if args.format == "json":
        text = json.dumps(payload, indent=2, default=_json_default)
    else:
        text = _flatten_csv(payload)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + ("\n" if not text.endswith("\n") else ""))
    else:
        print(text)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _flatten_csv(payload) -> str:
    rows = payload if isinstance(payload, list) else payload.get("results", [payload])
    if not rows:
        return ""
    keys = [k for k in rows[0] if not isinstance(rows[0][k], (list, dict))]
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(str(row.get(k, "")) for k in keys))
    return "\n".join(lines)


def cmd_test(args) -> int:
    table = read_csv_columns(args.input)
    ds = build_dataset_from_args(args, table)
    _check_trim_single(args)
    grid = build_grid(ds.q, args.trim)
    seed = args.seed
    needs_fs = any(k in (TSLS_LR, TSLS_WALD) for k in args.tests)
    fs = fs_report = None
    if needs_fs:
        fs, fs_report = _resolve_first_stage(ds, grid, args, seed)
    results = [_result_report(k, _run_one_test(ds, grid, k, fs, args, seed)) for k in args.tests]
    payload = {"config": _echo_config(args, seed), "results": results}
    if fs_report:
        payload["first_stage"] = fs_report
        for row in results:
            if row["test"] in (TSLS_LR, TSLS_WALD) and "rho_hat" in fs_report:
                row["rho_hat"] = fs_report["rho_hat"]
    _emit(payload, args)
    return 0


def _check_trim_single(args):
    if isinstance(args.trim, list):
        if len(args.trim) != 1:
            raise ConfigError("this command takes a single --trim value")
        args.trim = args.trim[0]
    if not 0.0 < args.trim < 0.5:
        raise ConfigError(f"trim must lie in (0, 0.5), got {args.trim}")


def cmd_first_stage(args) -> int:
    table = read_csv_columns(args.input)
    ds = build_dataset_from_args(args, table)
    trims = args.trim if isinstance(args.trim, list) else [args.trim]
    rows = []
    for trim in trims:
        if not 0.0 < trim < 0.5:
            raise ConfigError(f"trim must lie in (0, 0.5), got {trim}")
        grid = build_grid(ds.q, trim)
        fs = fit_first_stage_threshold(ds, grid)
        lr_res, w_res = bootstrap_first_stage(
            ds, grid, B=args.boot, mult=_MULTIPLIERS[args.multiplier](),
            mode=_mode_for(args), seed=args.seed, alpha=args.alpha,
        )
        rows.append(
            {
                "trim": trim,
                "rho_hat": fs.rho,
                "lr": lr_res.observed,
                "lr_critical_value": lr_res.critical_value,
                "lr_p_value": lr_res.p_value,
                "w": w_res.observed,
                "w_critical_value": w_res.critical_value,
                "w_p_value": w_res.p_value,
                "decision": THRESHOLD if lr_res.reject else LINEAR,
                "tiebreaker": "lr",
            }
        )
    _emit({"config": _echo_config(args, args.seed), "results": rows}, args)
    return 0


def cmd_sequence(args) -> int:
    table = read_csv_columns(args.input)
    ds = build_dataset_from_args(args, table)
    _check_trim_single(args)
    grid = build_grid(ds.q, args.trim)
    from .covariance import ResidualSource
    from .suptests import tsls_sequences, wg_sequence

    needs_fs = any(k in (TSLS_LR, TSLS_WALD) for k in args.tests)
    fs = None
    if needs_fs:
        fs, _ = _resolve_first_stage(ds, grid, args, args.seed)
    mode = _mode_for(args)
    lines = ["gamma,test,value"]
    for kind in args.tests:
        if kind == GMM_BR:
            seq = wg_sequence(ds, grid, ResidualSource.full_sample_null(), mode)
        elif kind in (GMM_CH, GMM_MIX):
            seq = wg_sequence(ds, grid, ResidualSource.per_gamma(), mode)
        else:
            lr_res, w_res = tsls_sequences(
                ds, grid, fs, mode=mode,
                want_lr=kind == TSLS_LR, want_w=kind == TSLS_WALD,
            )
            seq = lr_res if kind == TSLS_LR else w_res
        for g, v in zip(seq.grid.values, seq.values):
            lines.append(f"{g},{kind},{v}")
        for s in seq.skipped:
            lines.append(f"{s.gamma},{kind},skipped:{s.reason.replace(' ', '-')}")
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_simulate(args) -> int:
    n_sim = 300 if args.quick else args.n_sim
    B = 300 if args.quick else args.boot
    mult = _MULTIPLIERS[args.multiplier]()
    if args.size_adjusted_power:
        lines = ["delta_x,T,test,power"]
        for T in args.T:
            for test in args.tests:
                for dpi in args.delta_pi:
                    dgp = DgpConfig(
                        T=T, delta_x=args.delta_x, delta_pi=dpi, error_case=args.case[0]
                    )
                    cfg = ExperimentConfig(
                        dgp=dgp, test=test, B=B, n_sim=n_sim, alpha=args.alpha,
                        multiplier=mult, seed_bank=args.seed, trim=args.trim,
                    )
                    null_cfg = ExperimentConfig(
                        dgp=DgpConfig(T=T, delta_x=0.0, delta_pi=dpi, error_case=args.case[0]),
                        test=test, B=B, n_sim=n_sim, alpha=args.alpha,
                        multiplier=mult, seed_bank=args.seed, trim=args.trim,
                    )
                    power = size_adjusted_power(cfg, null_cfg)
                    lines.append(f"{args.delta_x},{T},{test},{power:.4f}")
        text = "\n".join(lines)
    else:
        spec = []
        for case in args.case:
            for T in args.T:
                for dpi in args.delta_pi:
                    for test in args.tests:
                        dgp = DgpConfig(
                            T=T, delta_x=args.delta_x, delta_pi=dpi, error_case=case
                        )
                        spec.append(
                            ExperimentConfig(
                                dgp=dgp, test=test, B=B, n_sim=n_sim, alpha=args.alpha,
                                multiplier=mult, seed_bank=args.seed, trim=args.trim,
                            )
                        )
        table = run_table(spec)
        text = table.to_csv()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)
    return 0


def _add_data_args(p):
    p.add_argument("--input", required=True, help="input CSV path")
    p.add_argument("--y", required=True, help="dependent-variable column")
    p.add_argument("--x", required=True, nargs="+", help="endogenous regressor columns")
    p.add_argument("--z1", nargs="*", default=[], help="exogenous regressor columns")
    p.add_argument("--z", nargs="*", default=[], help="extra instrument columns")
    p.add_argument("--q", required=True, help="threshold-variable column")
    p.add_argument(
        "--no-intercept", dest="intercept", action="store_false",
        help="do not prepend an intercept column to z1",
    )


def _add_run_args(p, multi_trim=False):
    if multi_trim:
        p.add_argument("--trim", type=float, nargs="+", default=[0.15])
    else:
        p.add_argument("--trim", type=float, default=0.15)
    p.add_argument("--boot", type=int, default=500, help="bootstrap replicates")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--multiplier", choices=sorted(_MULTIPLIERS), default="normal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", default=None, help="output path (stdout when omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="threshold-iv",
        description="Tests for an unknown threshold in linear models with endogenous regressors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_test = sub.add_parser("test", help="run threshold tests on a dataset")
    _add_data_args(p_test)
    _add_run_args(p_test)
    p_test.add_argument("--tests", nargs="+", choices=_CLI_TESTS, default=[GMM_BR, TSLS_LR])
    p_test.add_argument(
        "--first-stage", dest="first_stage", choices=(LINEAR, THRESHOLD, PRETEST),
        default=LINEAR,
    )
    p_test.set_defaults(func=cmd_test)

    p_fs = sub.add_parser("first-stage", help="threshold estimate and linearity pre-tests")
    _add_data_args(p_fs)
    _add_run_args(p_fs, multi_trim=True)
    p_fs.set_defaults(func=cmd_first_stage)

    p_seq = sub.add_parser("sequence", help="export per-candidate statistic sequences")
    _add_data_args(p_seq)
    _add_run_args(p_seq)
    p_seq.add_argument("--tests", nargs="+", choices=_CLI_TESTS, default=list(_CLI_TESTS))
    p_seq.add_argument(
        "--first-stage", dest="first_stage", choices=(LINEAR, THRESHOLD, PRETEST),
        default=LINEAR,
    )
    p_seq.set_defaults(func=cmd_sequence)

    p_sim = sub.add_parser("simulate", help="Monte Carlo size/power experiments")
    p_sim.add_argument("--case", nargs="+", choices=("a", "b", "c"), default=["a"])
    p_sim.add_argument("--T", type=int, nargs="+", default=[100])
    p_sim.add_argument("--delta-pi", dest="delta_pi", type=float, nargs="+", default=[0.0])
    p_sim.add_argument("--delta-x", dest="delta_x", type=float, default=0.0)
    p_sim.add_argument(
        "--tests", nargs="+", choices=(*_CLI_TESTS, GMM_MIX), default=[GMM_BR]
    )
    p_sim.add_argument("--n-sim", dest="n_sim", type=int, default=1000)
    p_sim.add_argument("--boot", type=int, default=500)
    p_sim.add_argument("--alpha", type=float, default=0.05)
    p_sim.add_argument("--multiplier", choices=sorted(_MULTIPLIERS), default="normal")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--trim", type=float, default=0.15)
    p_sim.add_argument("--quick", action="store_true", help="n_sim=300, B=300 profile")
    p_sim.add_argument(
        "--size-adjusted-power", dest="size_adjusted_power", action="store_true",
        help="emit size-adjusted power instead of bootstrap rejection rates",
    )
    p_sim.add_argument("--out", default=None)
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
