"""Command-line entry point.

Exit codes: 0 success, 2 validation failure, 3 estimation failure,
4 report failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import fe_regression as fer
from . import inference as inf
from . import panel_builder as pb
from . import pipeline as pl
from . import rp_logit as rpl
from . import synth_dgp as sd
from . import telemetry_io as tio
from . import trip_kinematics as tk
from .quasirandom import HaltonPlan

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_REPORT = 0, 2, 3, 4

log = logging.getLogger("speedgov")


def _emit(obj, out: str | None) -> None:
    text = pl.dumps(obj)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_valid_trips(path: str) -> list[tio.RawTripRecord]:
    records, errors = tio.load_trips(path)
    for e in errors[:20]:
        log.warning("row %d: %s", e.row, e.message)
    if errors:
        log.warning("%d malformed rows skipped", len(errors))
    kept, drops = tio.filter_valid(records)
    log.info("kept %d trips (%d too short, %d too few points)", len(kept), drops.too_short, drops.too_few_points)
    return kept


def _read_panel(path: str) -> pd.DataFrame:
    if not Path(path).is_file():
        raise pl.ValidationError(f"panel file not found: {path}")
    return pb.read_panel(path)


def _months(text: str) -> list[str]:
    try:
        return pl.month_range(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_features(a) -> int:
    trips = _load_valid_trips(a.trips)
    feats = tk.features_frame(trips, threshold_ms2=a.threshold, speed_cap_kmh=a.speed_cap)
    feats.to_csv(a.out, index=False, float_format="%.17g")
    return EXIT_OK


def cmd_calibrate(a) -> int:
    trips = _load_valid_trips(a.trips)
    traces = tk.sample_traces(trips, a.sample, a.seed)
    cal = tk.calibrate_threshold(traces, a.percentile)
    curve = tk.exceedance_curve(traces, a.curve) if a.curve else []
    _emit({**asdict(cal), "exceedance": curve}, a.out)
    return EXIT_OK


def cmd_panel(a) -> int:
    trips = _load_valid_trips(a.trips)
    feats = pd.read_csv(a.features, dtype={"trip_id": str})
    meta = pb.trips_frame(trips)
    rows = pb.build_covariates(meta, feats, a.ban_month, a.grid_m, a.urban or ())
    dose = pb.city_dose(rows, a.ref_month)
    rows = pb.attach_dose(rows, dose)
    pb.write_panel(rows, a.out)
    dose_path = Path(a.dose_out) if a.dose_out else Path(a.out).with_name("city_dose.csv")
    dose.doses.to_csv(dose_path, index=False, float_format="%.17g")
    if dose.excluded:
        log.warning("cities excluded from dose: %s", ", ".join(dose.excluded))
    return EXIT_OK


def _phase1_sample(panel: pd.DataFrame, a) -> pd.DataFrame:
    cfg = pl.PipelineConfig(seed=a.seed, phase1_cell_target=a.cell_target)
    sample, share = pl.phase1_rows(panel, cfg)
    log.info("Phase-I sample: %d trips, TUB share %.4f", len(sample), share)
    return sample


def cmd_fit_rplogit(a) -> int:
    panel = _read_panel(a.panel)
    sample = _phase1_sample(panel, a)
    spec = rpl.RpLogitSpec(outcome=a.outcome, plan=HaltonPlan(n_draws=a.draws, skip=a.halton_skip))
    f = rpl.fit(spec, sample, fix_sigma=a.fix_sigma, hessian=a.hessian)
    d = f.to_dict()
    d["counterfactual"] = {"all": rpl.counterfactual_delta(f, sample, spec)}
    _emit(d, a.out)
    return EXIT_OK


def cmd_predict(a) -> int:
    f = rpl.RpLogitFit.load(a.fit)
    panel = _read_panel(a.panel)
    sample = _phase1_sample(panel, a)
    _emit(rpl.counterfactual_delta(f, sample), a.out)
    return EXIT_OK


def cmd_did(a) -> int:
    panel = _read_panel(a.panel)
    spec = fer.FeSpec(outcome=a.outcome, cluster=a.cluster, k_convention=a.k_convention)
    _emit(fer.fit_did(spec, panel, a.tau_bar).to_dict(), a.out)
    return EXIT_OK


def cmd_event_study(a) -> int:
    panel = _read_panel(a.panel)
    spec = fer.FeSpec(outcome=a.outcome, cluster=a.cluster, k_convention=a.k_convention)
    es = fer.fit_event_study(spec, panel, a.ref_month, months=a.months)
    for note in es.notes:
        log.warning(note)
    frame = es.to_frame()
    if a.out:
        frame.to_csv(a.out, index=False, float_format="%.17g")
    else:
        sys.stdout.write(frame.to_csv(index=False))
    return EXIT_OK


def cmd_placebo(a) -> int:
    panel = _read_panel(a.panel)
    agg = pb.aggregate_city_month(panel.dropna(subset=["dose"]), a.outcome)
    res = fer.fit_placebo(agg, a.fake_post, a.trend, ban_month=a.ban_month, k_convention=a.k_convention)
    _emit(res.to_dict(), a.out)
    return EXIT_OK


def cmd_oster(a) -> int:
    if a.panel:
        panel = _read_panel(a.panel)
        b_short, r2_short = fer.short_regression(panel, a.outcome)
        full = fer.fit_did(fer.FeSpec(outcome=a.outcome), panel)
        res = inf.oster_bound(b_short, full.beta, r2_short, full.r2_overall, a.r2_max, a.delta)
    else:
        need = [a.beta_short, a.beta_full, a.r2_short, a.r2_full]
        if any(v is None for v in need):
            raise pl.ValidationError("give --panel or all of --beta-short --beta-full --r2-short --r2-full")
        res = inf.oster_bound(a.beta_short, a.beta_full, a.r2_short, a.r2_full, a.r2_max, a.delta)
    _emit(res.to_dict(), a.out)
    return EXIT_OK


def cmd_permute(a) -> int:
    panel = _read_panel(a.panel)
    agg = pb.aggregate_city_month(panel.dropna(subset=["dose"]), a.outcome)
    ch = fer.city_changes(agg, a.pre, a.post)
    res = inf.permutation_test(ch, n_perm=a.n, seed=a.seed, n_jobs=a.jobs)
    _emit({**res.to_dict(), "continuous": fer.fit_city_continuous_did(ch)}, a.out)
    return EXIT_OK


def cmd_composition(a) -> int:
    panel = _read_panel(a.panel)
    col = a.outcome if a.binary else pl.COUNT_OUTCOME.get(a.outcome, a.outcome)
    _emit(inf.composition_check(panel, col, a.pre, a.post).to_dict(), a.out)
    return EXIT_OK


def cmd_reweight(a) -> int:
    _emit(inf.reweight_decomposition(a.dp1, a.tau_p1, a.tau_uni, a.dp2).to_dict(), a.out)
    return EXIT_OK


def cmd_simulate(a) -> int:
    out = Path(a.out)
    if a.preset == "logit":
        kw = {"n_users": a.n_users} if a.n_users else {}
        df, truth = sd.generate_logit_panel(sd.LogitDgpConfig(seed=a.seed, **kw))
        df.to_csv(out, index=False, float_format="%.17g")
    elif a.preset == "did":
        kw = {"n_users": a.n_users} if a.n_users else {}
        df, truth = sd.generate_did_panel(sd.DidDgpConfig(seed=a.seed, **kw))
        df.to_csv(out, index=False, float_format="%.17g")
    else:
        kw = {"n_users": a.n_users} if a.n_users else {}
        records, truth = sd.generate_trip_records(sd.TripDgpConfig(seed=a.seed, **kw))
        tio.write_trips(records, out)
    truth_path = Path(a.truth) if a.truth else out.with_name("truth.json")
    truth_path.write_text(pl.dumps(truth), encoding="utf-8")
    return EXIT_OK


def _config_from_args(a) -> pl.PipelineConfig:
    overrides = {
        "trips": a.trips, "out_dir": a.out, "seed": a.seed, "draws": a.draws, "halton_skip": a.halton_skip,
        "cluster": a.cluster, "ban_month": a.ban_month, "reference_month": a.ref_month,
        "outcomes": a.outcomes, "n_perm": a.n_perm, "phase1_cell_target": a.cell_target,
    }
    if a.no_stability:
        overrides["stability"] = False
    if a.config:
        return pl.PipelineConfig.from_toml(a.config, overrides)
    return pl.PipelineConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})


def cmd_run(a) -> int:
    cfg = _config_from_args(a)
    run_dir = pl.run_pipeline(cfg)
    text, missing = pl.emit_report(run_dir)
    (run_dir / "report.md").write_text(text, encoding="utf-8")
    log.info("run complete: %s", run_dir)
    return EXIT_OK


def cmd_report(a) -> int:
    text, missing = pl.emit_report(a.run_dir)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if missing == len(pl.REPORT_SECTIONS):
        log.error("no artifacts found in %s", a.run_dir)
        return EXIT_REPORT
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speedgov", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=fn)
        return sp

    def outcome(sp, default="harsh_accel"):
        sp.add_argument("--outcome", default=default, choices=pl.ALL_OUTCOMES, help="binary outcome column")

    def fe_flags(sp):
        sp.add_argument("--cluster", default="city", choices=("city", "month", "twoway"), help="clustering scheme")
        sp.add_argument("--k-convention", default="full", choices=("full", "explicit"),
                        help="count absorbed FE in K for the CRV1 small-sample factor (full) or not")

    def sample_flags(sp):
        sp.add_argument("--cell-target", type=int, default=None,
                        help="stratified Phase-I sample size per mode x month cell (default: all pre-ban trips)")
        sp.add_argument("--seed", type=int, default=7, help="seed for the stratified sample")

    sp = add("features", cmd_features, "per-trip kinematic features from a trips CSV")
    sp.add_argument("--trips", required=True, help="input trips CSV")
    sp.add_argument("--threshold", type=float, default=tk.HARSH_THRESHOLD_MS2, help="harsh-event threshold, m/s^2")
    sp.add_argument("--speed-cap", type=float, default=tk.SPEED_CAP_KMH, help="speeding cap, km/h")
    sp.add_argument("--out", required=True, help="output features CSV")

    sp = add("calibrate", cmd_calibrate, "percentile of pooled |acceleration| as a harsh-event threshold")
    sp.add_argument("--trips", required=True, help="input trips CSV")
    sp.add_argument("--percentile", type=float, default=97.5, help="nearest-rank percentile")
    sp.add_argument("--sample", type=int, default=200_000, help="number of trips sampled")
    sp.add_argument("--seed", type=int, default=0, help="sampling seed")
    sp.add_argument("--curve", type=float, nargs="*", help="thresholds for an exceedance curve")
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("panel", cmd_panel, "trip panel with covariates and city dose")
    sp.add_argument("--features", required=True, help="features CSV")
    sp.add_argument("--trips", required=True, help="trips CSV (metadata)")
    sp.add_argument("--ref-month", default="2023-11", help="dose reference month YYYY-MM")
    sp.add_argument("--ban-month", default="2023-12", help="ban month YYYY-MM")
    sp.add_argument("--grid-m", type=float, default=500.0, help="same-route grid cell size, metres")
    sp.add_argument("--urban", nargs="*", help="city ids flagged urban (descriptive only)")
    sp.add_argument("--out", required=True, help="output panel CSV")
    sp.add_argument("--dose-out", help="city dose CSV (default: city_dose.csv next to --out)")

    sp = add("fit-rplogit", cmd_fit_rplogit, "Phase I random-parameters logit by simulated ML")
    sp.add_argument("--panel", required=True, help="panel CSV")
    outcome(sp)
    sp.add_argument("--draws", type=int, default=200, help="Halton draws per rider")
    sp.add_argument("--halton-skip", type=int, default=10, help="leading Halton points discarded")
    sp.add_argument("--hessian", default="numerical", choices=("numerical", "bhhh"), help="SE source")
    sp.add_argument("--fix-sigma", action="store_true", help="hold both spreads at zero (plain logit)")
    sample_flags(sp)
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("predict-counterfactual", cmd_predict, "TUB -> STD counterfactual change from a saved fit")
    sp.add_argument("--fit", required=True, help="fit JSON written by fit-rplogit")
    sp.add_argument("--panel", required=True, help="panel CSV")
    sample_flags(sp)
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("did", cmd_did, "Phase II pooled continuous-treatment DiD")
    sp.add_argument("--panel", required=True, help="panel CSV")
    outcome(sp)
    fe_flags(sp)
    sp.add_argument("--tau-bar", type=float, help="mean dose for scaling (default: panel mean)")
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("event-study", cmd_event_study, "dose x month event study")
    sp.add_argument("--panel", required=True, help="panel CSV")
    outcome(sp)
    fe_flags(sp)
    sp.add_argument("--ref-month", default="2023-11", help="omitted reference month")
    sp.add_argument("--months", type=_months, help="estimation window, e.g. 2023-09:2023-12")
    sp.add_argument("--out", help="output CSV (stdout if omitted)")

    sp = add("placebo", cmd_placebo, "fictitious-date placebo on the pre-ban city x month panel")
    sp.add_argument("--panel", required=True, help="panel CSV")
    outcome(sp)
    sp.add_argument("--fake-post", required=True, help="fictitious treatment month YYYY-MM")
    sp.add_argument("--trend", type=int, default=0, choices=(0, 1, 2), help="city trend order")
    sp.add_argument("--ban-month", default="2023-12", help="months from here on are dropped")
    sp.add_argument("--k-convention", default="full", choices=("full", "explicit"), help="CRV1 K convention")
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("oster", cmd_oster, "coefficient-stability bound")
    sp.add_argument("--panel", help="estimate short and full regressions from this panel")
    outcome(sp)
    sp.add_argument("--beta-short", type=float, help="treatment-only coefficient")
    sp.add_argument("--beta-full", type=float, help="full-model coefficient")
    sp.add_argument("--r2-short", type=float, help="treatment-only R^2")
    sp.add_argument("--r2-full", type=float, help="full-model R^2")
    sp.add_argument("--r2-max", type=float, help="default 1.3 x r2-full")
    sp.add_argument("--delta", type=float, default=1.0, help="proportional selection ratio")
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("permute", cmd_permute, "permutation test of the city-level continuous DiD slope")
    sp.add_argument("--panel", required=True, help="panel CSV")
    outcome(sp)
    sp.add_argument("--pre", type=_months, default=pl.month_range("2023-09:2023-11"), help="pre window")
    sp.add_argument("--post", default="2023-12", help="post month")
    sp.add_argument("--n", type=int, default=500, help="number of permutations")
    sp.add_argument("--seed", type=int, default=7, help="permutation seed")
    sp.add_argument("--jobs", type=int, default=1, help="worker threads (result does not depend on it)")
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("composition", cmd_composition, "switcher vs never-TUB composition check")
    sp.add_argument("--panel", required=True, help="panel CSV")
    outcome(sp)
    sp.add_argument("--pre", type=_months, default=pl.month_range("2023-10:2023-11"), help="pre window")
    sp.add_argument("--post", default="2023-12", help="post month")
    sp.add_argument("--binary", action="store_true", help="use the 0/1 outcome instead of the event count")
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("reweight", cmd_reweight, "rescale a Phase I effect to the population TUB share")
    sp.add_argument("--dp1", type=float, required=True, help="Phase I change, pp")
    sp.add_argument("--tau-p1", type=float, required=True, help="TUB share of the Phase I sample")
    sp.add_argument("--tau-uni", type=float, required=True, help="TUB share of the trip universe")
    sp.add_argument("--dp2", type=float, required=True, help="Phase II change, pp")
    sp.add_argument("--out", help="output JSON (stdout if omitted)")

    sp = add("simulate", cmd_simulate, "synthetic data with known parameters")
    sp.add_argument("--preset", required=True, choices=("logit", "did", "trips"), help="generator")
    sp.add_argument("--n-users", type=int, help="override the preset's rider count")
    sp.add_argument("--seed", type=int, default=7, help="generator seed")
    sp.add_argument("--out", required=True, help="output CSV")
    sp.add_argument("--truth", help="truth JSON (default: truth.json next to --out)")

    sp = add("run", cmd_run, "full pipeline from a config file; flags override config values")
    sp.add_argument("--config", help="TOML config file")
    sp.add_argument("--trips", help="trips CSV")
    sp.add_argument("--out", help="run directory")
    sp.add_argument("--seed", type=int, help="pipeline seed")
    sp.add_argument("--draws", type=int, help="Halton draws per rider")
    sp.add_argument("--halton-skip", type=int, help="leading Halton points discarded")
    sp.add_argument("--cluster", choices=("city", "month", "twoway"), help="clustering scheme")
    sp.add_argument("--ban-month", help="ban month YYYY-MM")
    sp.add_argument("--ref-month", help="dose reference month YYYY-MM")
    sp.add_argument("--outcomes", nargs="+", help="outcomes to estimate")
    sp.add_argument("--n-perm", type=int, help="permutations for the city-level test")
    sp.add_argument("--cell-target", type=int, help="stratified Phase-I sample size per cell")
    sp.add_argument("--no-stability", action="store_true", help="skip the split-window Phase I refits")

    sp = add("report", cmd_report, "Markdown report from a run directory")
    sp.add_argument("--run-dir", required=True, help="run directory")
    sp.add_argument("--out", help="output Markdown (stdout if omitted)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except (pl.ValidationError, tio.SchemaError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (pl.StageError, rpl.EstimationError, fer.ConvergenceError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
