"""End-to-end run: trips -> features -> panel -> Phase I -> Phase II -> checks.

Every JSON artifact is a pure function of the inputs, the config and the
seed. Wall-clock times and library versions live only in ``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import __version__
from . import fe_regression as fer
from . import inference as inf
from . import panel_builder as pb
from . import rp_logit as rpl
from . import telemetry_io as tio
from . import trip_kinematics as tk
from .quasirandom import HaltonPlan

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

HARSH_FAMILY = ("harsh_accel", "harsh_decel")
ALL_OUTCOMES = ("harsh_accel", "harsh_decel", "speeding")
FIRMWARE_LABEL = "firmware-validation check"
COUNT_OUTCOME = {"harsh_accel": "harsh_accel_count", "harsh_decel": "harsh_decel_count"}
SUBGROUP_DIMENSIONS = ("experience", "night_rate", "same_route_rate")


class ValidationError(ValueError):
    """Bad config or unreadable input (exit code 2)."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    trips: str = ""
    out_dir: str = "run"
    ban_month: str = "2023-12"
    reference_month: str = "2023-11"
    outcomes: list[str] = field(default_factory=lambda: list(HARSH_FAMILY))
    threshold_ms2: float = tk.HARSH_THRESHOLD_MS2
    calibrate_percentile: float | None = None
    calibrate_sample: int | None = 200_000
    speed_cap_kmh: float = tk.SPEED_CAP_KMH
    grid_m: float = 500.0
    urban_cities: list[str] = field(default_factory=list)
    draws: int = 200
    halton_skip: int = 10
    hessian: str = "numerical"
    phase1_cell_target: int | None = None
    stability: bool = True
    seed: int = 7
    cluster: str = "city"
    k_convention: str = "full"
    family_alpha: float = 0.05
    pre_window: list[str] = field(default_factory=lambda: ["2023-09", "2023-10", "2023-11"])
    placebo_months: list[str] = field(default_factory=lambda: ["2023-09", "2023-10"])
    placebo_trend_orders: list[int] = field(default_factory=lambda: [0, 1, 2])
    n_perm: int = 500

    def validate(self) -> None:
        bad = [o for o in self.outcomes if o not in ALL_OUTCOMES]
        if bad or not self.outcomes:
            raise ValidationError(f"outcomes must be a non-empty subset of {ALL_OUTCOMES}; got {self.outcomes}")
        if self.cluster not in ("city", "month", "twoway"):
            raise ValidationError(f"cluster must be city, month or twoway; got {self.cluster!r}")
        if self.k_convention not in ("full", "explicit"):
            raise ValidationError("k_convention must be 'full' or 'explicit'")
        if self.hessian not in ("numerical", "bhhh"):
            raise ValidationError("hessian must be 'numerical' or 'bhhh'")
        for m in [self.ban_month, self.reference_month, *self.pre_window, *self.placebo_months]:
            if len(m) != 7 or m[4] != "-" or not (m[:4] + m[5:]).isdigit():
                raise ValidationError(f"month {m!r} is not YYYY-MM")
        if not self.reference_month < self.ban_month:
            raise ValidationError("reference month must precede the ban month")
        if any(m >= self.ban_month for m in self.pre_window):
            raise ValidationError("pre_window months must precede the ban month")
        if not 0 < self.family_alpha < 1:
            raise ValidationError("family_alpha must lie in (0, 1)")
        if self.draws < 1 or self.n_perm < 1:
            raise ValidationError("draws and n_perm must be positive")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        return cls(**dict(values))

    @classmethod
    def from_toml(cls, path: str | Path, overrides: Mapping[str, Any] | None = None) -> "PipelineConfig":
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    def family(self) -> list[str]:
        return [o for o in self.outcomes if o in HARSH_FAMILY]


# ---------------------------------------------------------------------------
# serialisation helpers


def clean(obj):
    """Recursively convert to JSON-safe builtins; non-finite floats become None."""
    if isinstance(obj, Mapping):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj), encoding="utf-8")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def month_range(spec: str) -> list[str]:
    """``"2023-09:2023-11"`` -> every month from the first to the last inclusive."""
    first, _, last = spec.partition(":")
    last = last or first
    a, b = pb.month_index(first), pb.month_index(last)
    if b < a:
        raise ValidationError(f"empty month range {spec!r}")
    return [f"{i // 12:04d}-{i % 12 + 1:02d}" for i in range(a, b + 1)]


# ---------------------------------------------------------------------------
# stage building blocks


def phase1_rows(panel: pd.DataFrame, cfg: PipelineConfig) -> tuple[pd.DataFrame, float]:
    """Pre-ban estimation sample with Mundlak means, and its TUB share."""
    if cfg.phase1_cell_target:
        sample, share = pb.stratified_phase1_sample(panel, cfg.phase1_cell_target, cfg.seed)
    else:
        sample = panel[panel["pre_ban"] == 1]
        share = float(sample["tub"].mean())
    means, _ = pb.compute_mundlak(sample, pre_ban_only=True)
    return pb.attach_mundlak(sample, means), share


def rp_spec(outcome: str, cfg: PipelineConfig) -> rpl.RpLogitSpec:
    return rpl.RpLogitSpec(outcome=outcome, plan=HaltonPlan(n_draws=cfg.draws, skip=cfg.halton_skip))


def subgroup_labels(panel: pd.DataFrame, cfg: PipelineConfig) -> dict[str, pd.Series]:
    return {d: pb.subgroup_split(panel, d, cfg.pre_window) for d in SUBGROUP_DIMENSIONS}


def fe_spec(outcome: str, cfg: PipelineConfig, cluster: str | None = None) -> fer.FeSpec:
    return fer.FeSpec(outcome=outcome, cluster=cluster or cfg.cluster, k_convention=cfg.k_convention)


def _guard(fn: Callable, *args, **kwargs) -> dict:
    """Run an optional robustness computation; failures become an UNAVAILABLE note."""
    try:
        out = fn(*args, **kwargs)
        return out.to_dict() if hasattr(out, "to_dict") else out
    except (ValueError, np.linalg.LinAlgError, rpl.EstimationError, fer.ConvergenceError) as exc:
        return {"unavailable": f"{type(exc).__name__}: {exc}"}


def robustness(panel: pd.DataFrame, did: Mapping[str, fer.DidFit], cfg: PipelineConfig, tau_bar: float) -> dict:
    out: dict[str, Any] = {"family": cfg.family(), "family_alpha": cfg.family_alpha / max(1, len(cfg.family())),
                           "labels": {o: (FIRMWARE_LABEL if o == "speeding" else "behavioral") for o in cfg.outcomes}}
    pre_ref = cfg.reference_month
    # A: dose-response correlation, reference month -> ban month
    out["A_dose_response"] = {
        o: _guard(inf.dose_response_corr, inf.city_month_changes(panel, o, pre_ref, cfg.ban_month))
        for o in cfg.outcomes
    }
    # B: fictitious-date placebos on the pre-ban city x month panel
    panel_b = {}
    for o in cfg.outcomes:
        agg = pb.aggregate_city_month(panel.dropna(subset=["dose"]), o)
        panel_b[o] = {
            f"{m}|trend{k}": _guard(fer.fit_placebo, agg, m, k, ban_month=cfg.ban_month, k_convention=cfg.k_convention)
            for m in cfg.placebo_months
            for k in cfg.placebo_trend_orders
        }
    out["B_placebo"] = panel_b
    # C: city-level continuous DiD on subsamples, scaled to the average city
    long_cut = float(panel["duration_s"].median()) if "duration_s" in panel else math.nan
    subsamples = {
        "full": panel,
        "night": panel[panel["night"] == 1],
        "weekend": panel[panel["weekend"] == 1],
        "long_trip": panel[panel["duration_s"] > long_cut] if "duration_s" in panel else panel.iloc[:0],
        "urban": panel[panel["urban"] == 1] if "urban" in panel else panel.iloc[:0],
    }
    panel_c = {}
    for o in cfg.outcomes:
        panel_c[o] = {}
        for name, sub in subsamples.items():
            def one(sub=sub):
                agg = pb.aggregate_city_month(sub.dropna(subset=["dose"]), o)
                r = fer.fit_city_continuous_did(fer.city_changes(agg, cfg.pre_window, cfg.ban_month))
                r["avg_city_delta_pp"] = fer.scale_delta_pp(r["slope"], tau_bar)
                return r
            panel_c[o][name] = _guard(one)
    out["C_subsamples"] = panel_c
    # D: the pooled estimate under each clustering scheme
    out["D_cluster"] = {
        o: {mode: _guard(fer.fit_did, fe_spec(o, cfg, mode), panel, tau_bar) for mode in ("city", "month", "twoway")}
        for o in cfg.outcomes
    }
    # E: multiplicity over the harsh-event family only
    fam = [o for o in cfg.family() if o in did]
    out["E_multiple_testing"] = (
        {"outcomes": fam, **inf.correct_pvalues([did[o].p for o in fam], alpha=cfg.family_alpha).to_dict()}
        if fam else {"unavailable": "no harsh-event outcome estimated"}
    )
    # F: coefficient-stability bound
    panel_f = {}
    for o in cfg.outcomes:
        if o not in did:
            continue
        b_short, r2_short = fer.short_regression(panel, o)
        panel_f[o] = _guard(inf.oster_bound, b_short, did[o].beta, r2_short, did[o].r2_overall)
    out["F_oster"] = panel_f
    # modern DiD alternatives: continuous slope, permutation, 2x2
    modern = {}
    for o in cfg.outcomes:
        agg = pb.aggregate_city_month(panel.dropna(subset=["dose"]), o)
        try:
            ch = fer.city_changes(agg, cfg.pre_window, cfg.ban_month)
        except (KeyError, ValueError) as exc:
            modern[o] = {"unavailable": str(exc)}
            continue
        modern[o] = {
            "continuous": _guard(fer.fit_city_continuous_did, ch),
            "permutation": _guard(inf.permutation_test, ch, n_perm=cfg.n_perm, seed=cfg.seed),
            "two_by_two": _guard(fer.fit_2x2_did, ch),
        }
    out["modern_did"] = modern
    return out


def stability(sample: pd.DataFrame, outcome: str, cfg: PipelineConfig) -> dict:
    """Refit Phase I on the two halves of the pre-ban window and Z-test each parameter."""
    months = sorted(sample["month_key"].unique())
    half = (len(months) + 1) // 2
    first, second = set(months[:half]), set(months[half:])
    fits = []
    for part in (first, second):
        rows = sample[sample["month_key"].isin(part)]
        means, _ = pb.compute_mundlak(rows, pre_ban_only=True)
        fits.append(rpl.fit(rp_spec(outcome, cfg), pb.attach_mundlak(rows, means), hessian=cfg.hessian))
    names = ["mu_tub", "mu_eco", *[n for n in fits[0].names if n.startswith(("tub_x_", "eco_x_"))], *rpl.SIGMA_NAMES]
    return {
        "halves": [months[:half], months[half:]],
        "first": {n: list(fits[0].param(n)) for n in names},
        "second": {n: list(fits[1].param(n)) for n in names},
        "tests": rpl.stability_test(fits[0], fits[1], names),
    }


# ---------------------------------------------------------------------------


def run_pipeline(cfg: PipelineConfig, clock: Callable[[], float] = time.time) -> Path:
    """Run every stage, writing artifacts into ``cfg.out_dir``.

    On failure the artifacts written so far are kept, a ``FAILED`` marker
    names the stage and cause, and :class:`StageError` is raised.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    if not Path(cfg.trips).is_file():
        raise ValidationError(f"trips file not found: {cfg.trips}")
    started = clock()
    manifest: dict[str, Any] = {
        "versions": {
            "speedgov": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__, "scipy": __import__("scipy").__version__,
            "numba": __import__("numba").__version__,
        },
        "config": asdict(cfg),
        "seeds": {"pipeline": cfg.seed, "halton_skip": cfg.halton_skip, "permutation": cfg.seed},
        "inputs": {"trips": {"path": str(cfg.trips), "sha256": sha256_file(cfg.trips)}},
        "started_unix": started,
        "stages": {},
    }
    state: dict[str, Any] = {}

    def stage(name: str, fn: Callable[[], None]) -> None:
        t0 = clock()
        try:
            fn()
        except (ValidationError, tio.SchemaError) as exc:
            _fail(out, manifest, name, exc)
            raise ValidationError(f"stage {name!r}: {exc}") from exc
        except Exception as exc:  # noqa: BLE001 - any failure halts the run with its stage named
            _fail(out, manifest, name, exc)
            raise StageError(name, exc) from exc
        manifest["stages"][name] = {"seconds": clock() - t0}
        log.info("stage %s done", name)

    def ingest():
        records, errors = tio.load_trips(cfg.trips)
        kept, drops = tio.filter_valid(records)
        if not kept:
            raise ValidationError("no valid trips after filtering")
        state["records"] = kept
        write_json(out / "ingest.json", {
            "n_rows": len(records) + len(errors), "n_parse_errors": len(errors),
            "parse_errors": [asdict(e) for e in errors[:100]], "too_short": drops.too_short,
            "too_few_points": drops.too_few_points, "n_kept": len(kept), "mode_counts": tio.mode_counts(kept),
        })

    def features():
        records = state["records"]
        threshold = cfg.threshold_ms2
        calib = None
        if cfg.calibrate_percentile is not None:
            traces = tk.sample_traces(records, cfg.calibrate_sample, cfg.seed)
            calib = tk.calibrate_threshold(traces, cfg.calibrate_percentile)
            threshold = calib.threshold_ms2
        feats = tk.features_frame(records, threshold_ms2=threshold, speed_cap_kmh=cfg.speed_cap_kmh)
        feats.to_csv(out / "features.csv", index=False, float_format="%.17g")
        write_json(out / "threshold.json", {"threshold_ms2": threshold,
                                            "calibration": asdict(calib) if calib else None})
        state["features"] = feats

    def panel():
        meta = pb.trips_frame(state["records"])
        rows = pb.build_covariates(meta, state["features"], cfg.ban_month, cfg.grid_m, cfg.urban_cities)
        dose = pb.city_dose(rows, cfg.reference_month)
        dose.doses.to_csv(out / "city_dose.csv", index=False, float_format="%.17g")
        rows = pb.attach_dose(rows, dose)
        pb.write_panel(rows, out / "panel.csv")
        state["panel"] = rows
        state["tau_bar"] = pb.mean_dose(rows)
        state["excluded"] = dose.excluded

    def phase1():
        rows = state["panel"]
        sample, tau_p1 = phase1_rows(rows, cfg)
        labels = subgroup_labels(rows, cfg)
        state["tau_p1"] = tau_p1
        state["tau_uni"] = float(rows.loc[rows["pre_ban"] == 1, "tub"].mean())
        state["phase1"] = {}
        for o in cfg.outcomes:
            f = rpl.fit(rp_spec(o, cfg), sample, hessian=cfg.hessian)
            d = f.to_dict()
            cf = {"all": rpl.counterfactual_delta(f, sample)}
            for dim, lab in labels.items():
                for level in ("high", "low"):
                    users = set(lab.index[lab == level])
                    sub = sample[sample["user_id"].isin(users)]
                    cf[f"{dim}:{level}"] = _guard(rpl.counterfactual_delta, f, sub) if len(sub) else {
                        "unavailable": "no Phase-I trips in subgroup"}
            d["counterfactual"] = cf
            d["sample"] = {"tau_p1": tau_p1, "cell_target": cfg.phase1_cell_target}
            if cfg.stability:
                d["stability"] = _guard(stability, sample, o, cfg)
            write_json(out / f"fit_{o}.json", d)
            state["phase1"][o] = d

    def phase2():
        rows = state["panel"]
        labels = subgroup_labels(rows, cfg)
        state["did"], state["did_sub"] = {}, {}
        for o in cfg.outcomes:
            f = fer.fit_did(fe_spec(o, cfg), rows, state["tau_bar"])
            state["did"][o] = f
            d = f.to_dict()
            d["label"] = FIRMWARE_LABEL if o == "speeding" else "behavioral"
            d["excluded_cities"] = state["excluded"]
            sub = {}
            for dim, lab in labels.items():
                for level in ("high", "low"):
                    users = set(lab.index[lab == level])
                    sub[f"{dim}:{level}"] = _guard(fer.fit_did, fe_spec(o, cfg), rows[rows["user_id"].isin(users)],
                                                   state["tau_bar"])
            d["subgroups"] = sub
            state["did_sub"][o] = sub
            write_json(out / f"did_{o}.json", d)
            es = fer.fit_event_study(fe_spec(o, cfg), rows, cfg.reference_month)
            es.to_frame().to_csv(out / f"event_study_{o}.csv", index=False, float_format="%.17g")

    def checks():
        rows = state["panel"]
        tau_bar = state["tau_bar"]
        write_json(out / "robustness.json", robustness(rows, state["did"], cfg, tau_bar))
        rw = {}
        for o in cfg.outcomes:
            dp1 = state["phase1"][o]["counterfactual"]["all"]["delta_pp"]
            rw[o] = _guard(inf.reweight_decomposition, dp1, state["tau_p1"], state["tau_uni"],
                           state["did"][o].avg_city_delta_pp)
        write_json(out / "reweight.json", rw)
        comp = {}
        for o in cfg.outcomes:
            if o in COUNT_OUTCOME:
                comp[o] = _guard(inf.composition_check, rows, COUNT_OUTCOME[o], cfg.pre_window, cfg.ban_month)
        write_json(out / "composition.json", comp)
        p1, p2 = {}, {}
        for o in cfg.outcomes:
            cfs = state["phase1"][o]["counterfactual"]
            fits = {"all": state["did"][o].to_dict(), **state["did_sub"][o]}
            for key, fit_d in fits.items():
                cf = cfs.get(key, {})
                if "delta_pp" not in cf or "beta" not in fit_d:
                    continue
                lo, hi = fit_d["ci95"]
                p1[(o, key)] = cf["delta_pp"]
                p2[(o, key)] = (fit_d["avg_city_delta_pp"], fer.scale_delta_pp(lo, tau_bar),
                                fer.scale_delta_pp(hi, tau_bar))
        rep = inf.concordance_report(p1, p2, notes={o: FIRMWARE_LABEL for o in cfg.outcomes if o == "speeding"})
        (out / "concordance.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        (out / "concordance.md").write_text(rep.to_markdown(), encoding="utf-8")

    for name, fn in (("ingest", ingest), ("features", features), ("panel", panel), ("phase1", phase1),
                     ("phase2", phase2), ("checks", checks)):
        stage(name, fn)

    manifest["finished_unix"] = clock()
    manifest["artifacts"] = {p.name: sha256_file(p) for p in sorted(out.iterdir())
                             if p.is_file() and p.name not in ("manifest.json", "report.md")}
    write_json(out / "manifest.json", manifest)
    return out


def _fail(out: Path, manifest: dict, stage: str, exc: BaseException) -> None:
    msg = f"stage: {stage}\ncause: {type(exc).__name__}: {exc}\n"
    (out / "FAILED").write_text(msg, encoding="utf-8")
    manifest["failed"] = {"stage": stage, "cause": f"{type(exc).__name__}: {exc}"}
    write_json(out / "manifest.json", manifest)
    print(msg, file=sys.stderr, end="")


# ---------------------------------------------------------------------------
# report


def stars(p: float | None) -> str:
    if p is None or not math.isfinite(p):
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def _fmt(x, nd: int = 4) -> str:
    return "n/a" if x is None else f"{x:.{nd}f}"


def _load(run: Path, name: str):
    p = run / name
    if not p.is_file():
        return None
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None


def _phase1_section(run: Path) -> list[str] | None:
    fits = sorted(run.glob("fit_*.json"))
    if not fits:
        return None
    lines = []
    for path in fits:
        d = _load(run, path.name)
        if d is None:
            continue
        label = f" ({FIRMWARE_LABEL})" if d["outcome"] == "speeding" else ""
        lines += [f"### {d['outcome']}{label}", "", "| Parameter | Estimate | SE |", "|---|---:|---:|"]
        for name, v in d["parameters"].items():
            if name.startswith(("city_id[", "month_of_year[")):
                continue
            lines.append(f"| {name} | {_fmt(v['estimate'])}{stars(v['p'])} | {_fmt(v['se'])} |")
        fit = d["fit"]
        cf = d.get("counterfactual", {}).get("all", {})
        lines += [
            "",
            f"Log-likelihood {fit['loglik']:.1f}; pseudo-R2 {fit['pseudo_r2']:.4f}; AIC {fit['aic']:.1f}; "
            f"BIC {fit['bic']:.1f}; k = {fit['k']}; N = {fit['n_trips']} trips, {fit['n_users']} riders.",
            f"Counterfactual TUB -> STD change: {_fmt(cf.get('delta_pp'), 2)} pp.",
            "",
        ]
    return lines


def _did_section(run: Path) -> list[str] | None:
    fits = sorted(run.glob("did_*.json"))
    if not fits:
        return None
    lines = ["| Outcome | beta | SE | 95% CI | Avg-city delta (pp) | R2 | R2 within | N | Clusters |",
             "|---|---:|---:|---|---:|---:|---:|---:|---:|"]
    for path in fits:
        d = _load(run, path.name)
        if d is None:
            continue
        label = f" ({FIRMWARE_LABEL})" if d["outcome"] == "speeding" else ""
        lines.append(
            f"| {d['outcome']}{label} | {_fmt(d['beta'])}{stars(d['p'])} | {_fmt(d['se'])} | "
            f"[{_fmt(d['ci95'][0], 3)}, {_fmt(d['ci95'][1], 3)}] | {_fmt(d['avg_city_delta_pp'], 2)} | "
            f"{_fmt(d['r2_overall'])} | {_fmt(d['r2_within'])} | {d['n_obs']} | {d['n_clusters']} ({d['cluster']}) |"
        )
    return lines + [""]


def _event_section(run: Path) -> list[str] | None:
    files = sorted(run.glob("event_study_*.csv"))
    if not files:
        return None
    lines = []
    for path in files:
        es = pd.read_csv(path, dtype={"month": str})
        lines += [f"### {path.stem.removeprefix('event_study_')}", "", "| Month | Coef | SE |", "|---|---:|---:|"]
        for r in es.itertuples():
            ref = " (reference)" if r.reference else ""
            lines.append(f"| {r.month}{ref} | {r.coef:.4f}{stars(r.p) if not r.reference else ''} | {r.se:.4f} |")
        lines.append("")
    return lines


def _robustness_section(run: Path) -> list[str] | None:
    d = _load(run, "robustness.json")
    if d is None:
        return None
    lines = ["| Check | Outcome | Value |", "|---|---|---|"]
    for o, r in d["A_dose_response"].items():
        v = f"r = {_fmt(r['pearson_r'], 3)}{stars(r['p'])}, N = {r['n']}" if "pearson_r" in r else "UNAVAILABLE"
        lines.append(f"| A. Dose-response | {o} | {v} |")
    for o, rows in d["B_placebo"].items():
        for key, r in rows.items():
            v = f"{_fmt(r['beta'])} ({_fmt(r['se'])}), p = {_fmt(r['p'], 3)}" if "beta" in r else "UNAVAILABLE"
            lines.append(f"| B. Placebo {key} | {o} | {v} |")
    for o, rows in d["C_subsamples"].items():
        for key, r in rows.items():
            v = f"{_fmt(r['avg_city_delta_pp'], 2)} pp" if "avg_city_delta_pp" in r else "UNAVAILABLE"
            lines.append(f"| C. Subsample {key} | {o} | {v} |")
    for o, rows in d["D_cluster"].items():
        for key, r in rows.items():
            v = f"{_fmt(r['beta'])}{stars(r['p'])} ({_fmt(r['se'])})" if "beta" in r else "UNAVAILABLE"
            lines.append(f"| D. Cluster {key} | {o} | {v} |")
    e = d["E_multiple_testing"]
    if "raw" in e:
        for i, o in enumerate(e["outcomes"]):
            lines.append(f"| E. Raw / Bonferroni / Holm / BH | {o} | {_fmt(e['raw'][i])} / {_fmt(e['bonferroni'][i])}"
                         f" / {_fmt(e['holm'][i])} / {_fmt(e['bh'][i])} |")
    for o, r in d["F_oster"].items():
        v = f"beta* = {_fmt(r['beta_star'])} (R2max {_fmt(r['r2_max'])})" if "beta_star" in r else "UNAVAILABLE"
        lines.append(f"| F. Oster bound | {o} | {v} |")
    for o, r in d.get("modern_did", {}).items():
        c, p, t = r.get("continuous", {}), r.get("permutation", {}), r.get("two_by_two", {})
        if "slope" in c:
            lines.append(f"| Continuous DiD slope | {o} | {_fmt(c['slope'])} ({_fmt(c['se'], 3)}), "
                         f"perm. p = {_fmt(p.get('p'), 3)} |")
        if "att" in t:
            lines.append(f"| 2x2 ATT | {o} | {_fmt(t['att'])} ({_fmt(t['se'], 3)}) |")
    labels = d.get("labels", {})
    if "speeding" in labels:
        lines.append(f"\nspeeding is a {FIRMWARE_LABEL}; the correction family is {', '.join(d['family'])}.")
    return lines + [""]


def _reweight_section(run: Path) -> list[str] | None:
    d = _load(run, "reweight.json")
    if d is None:
        return None
    lines = ["| Outcome | Phase I (pp) | Rescaled (pp) | Phase II (pp) | Residual (pp) | Share (%) |",
             "|---|---:|---:|---:|---:|---:|"]
    for o, r in d.items():
        if "ratio" not in r:
            lines.append(f"| {o} | UNAVAILABLE | | | | |")
            continue
        lines.append(f"| {o} | {_fmt(r['delta_p1_pp'], 2)} | {_fmt(r['delta_reweighted_pp'], 2)} | "
                     f"{_fmt(r['delta_p2_pp'], 2)} | {_fmt(r['residual_pp'], 2)} | {_fmt(r['reweighted_share_pct'], 1)} |")
    return lines + [""]


def _composition_section(run: Path) -> list[str] | None:
    d = _load(run, "composition.json")
    if d is None:
        return None
    lines = ["| Outcome | Switchers | Never-TUB | DiD | Welch p | Cohen's d | Verdict |",
             "|---|---:|---:|---:|---:|---:|---|"]
    for o, r in d.items():
        if "cohens_d" not in r:
            lines.append(f"| {o} | UNAVAILABLE | | | | | |")
            continue
        lines.append(f"| {o} | {r['n_switchers']} | {r['n_never_tub']} | {_fmt(r['did'])} | "
                     f"{_fmt(r['welch_p'], 3)} | {r['cohens_d']:+.3f} | {r['verdict']} |")
    return lines + [""]


def _concordance_section(run: Path) -> list[str] | None:
    p = run / "concordance.md"
    return p.read_text(encoding="utf-8").splitlines() + [""] if p.is_file() else None


REPORT_SECTIONS = (
    ("Phase I: random-parameters logit", _phase1_section),
    ("Phase II: continuous-treatment DiD", _did_section),
    ("Event study", _event_section),
    ("Robustness", _robustness_section),
    ("Sample re-weighting", _reweight_section),
    ("Composition check", _composition_section),
    ("Predict-then-validate concordance", _concordance_section),
)


def emit_report(run_dir: str | Path) -> tuple[str, int]:
    """Markdown report built only from artifacts in ``run_dir``.

    Returns ``(markdown, n_unavailable)``; sections whose artifacts are
    missing are marked UNAVAILABLE.
    """
    run = Path(run_dir)
    lines = ["# Run report", ""]
    if (run / "FAILED").is_file():
        lines += ["Run marked FAILED:", "", "```", (run / "FAILED").read_text(encoding="utf-8").strip(), "```", ""]
    missing = 0
    for title, fn in REPORT_SECTIONS:
        lines += [f"## {title}", ""]
        body = fn(run) if run.is_dir() else None
        if body is None:
            missing += 1
            lines += ["UNAVAILABLE", ""]
        else:
            lines += body
    lines.append("Significance: * p<0.05, ** p<0.01, *** p<0.001.")
    return "\n".join(lines) + "\n", missing
