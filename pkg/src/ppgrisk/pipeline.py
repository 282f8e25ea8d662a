"""End-to-end pipeline commands: simulate, train, fit, evaluate, report.

Each command is a pure function of a RunConfig plus the files already on
disk; outputs are written atomically (temp file + rename) so reruns with
an identical config are byte-identical.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .cohort import (
    DAYS_PER_YEAR,
    CohortRow,
    SplitAssignment,
    SyntheticSpec,
    apply_inclusion,
    generate_synthetic,
    load_cohort,
    load_waveform_store,
    split_by_site,
    write_cohort_csv,
    write_waveform_store,
)
from .encoder import EncoderConfig, PulseEncoder, proxy_targets_from_rows, train
from .errors import (
    DependencyError,
    MissingCovariateError,
    NumericalError,
    ValidationError,
)
from .nn import load_params, save_params
from .pca import fit_pca, pca_from_csv_lines, pca_to_csv_lines, project
from .rng import derive_seed
from .survival import (
    MODEL_SPECS,
    CoxFit,
    build_features,
    fit_cox,
    fit_from_text,
    fit_to_text,
    partial_log_likelihood,
    predict_risk_matrix,
    sbp140_score,
)
from .waveform import AugmentConfig, MorphologyFeatures, Waveform, extract_morphology

DEFAULT_RIDGE_GRID = (1e-5, 3e-5, 1e-4)
DEFAULT_MODELS = ("office_refit_who", "dls", "metadata", "sbp140")
FALLBACK_HEIGHT_CM = 170.0  # only for the notch proxy label, which ignores height


@dataclass
class RunConfig:
    out_dir: Path
    cohort_path: Path
    waveform_path: Path
    split: SplitAssignment
    encoder: EncoderConfig
    ridge_grid: tuple[float, ...] = DEFAULT_RIDGE_GRID
    models: tuple[str, ...] = DEFAULT_MODELS
    reference: str = "office_refit_who"
    margin: float = 0.025
    horizon_years: float = 10.0
    bootstrap_iterations: int = 1000
    permutation_iterations: int = 1000
    eval_seed: int = 0
    simulate: SyntheticSpec | None = None
    subgroup_quintile_cutoff: int = 2000
    calibration_bins: int = 10
    enrichment_fractions: tuple[float, ...] = (0.20, 0.10, 0.05)

    def __post_init__(self):
        if self.reference not in self.models:
            raise ValidationError(
                f"reference model {self.reference!r} must appear in the model list"
            )
        if self.margin < 0:
            raise ValidationError("non-inferiority margin must be >= 0")
        unknown = [m for m in self.models if m not in MODEL_SPECS]
        if unknown:
            raise ValidationError(f"unknown model name(s): {unknown}")
        if not self.ridge_grid:
            raise ValidationError("ridge grid must be nonempty")


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Read the JSON run configuration, applying CLI flag overrides."""
    with open(path) as fh:
        raw = json.load(fh)
    overrides = overrides or {}
    if "seed" in overrides and overrides["seed"] is not None:
        master = int(overrides["seed"])
        raw.setdefault("seeds", {})
        raw["seeds"] = {
            "simulate": derive_seed(master, "simulate"),
            "train": derive_seed(master, "train"),
            "eval": derive_seed(master, "eval"),
        }
    if overrides.get("out"):
        raw.setdefault("paths", {})["out"] = overrides["out"]
    if overrides.get("models"):
        raw["models"] = [m.strip() for m in overrides["models"].split(",")]
    if overrides.get("margin") is not None:
        raw["margin"] = float(overrides["margin"])

    paths = raw.get("paths", {})
    out_dir = Path(paths.get("out", "."))
    seeds = raw.get("seeds", {})
    enc_raw = dict(raw.get("encoder", {}))
    aug_raw = enc_raw.pop("augment", {})
    enc_raw.setdefault("seed", seeds.get("train", 0))
    if "channels" in enc_raw:
        enc_raw["channels"] = tuple(enc_raw["channels"])
    encoder_cfg = EncoderConfig(
        augment=AugmentConfig(
            magnitude=aug_raw.get("magnitude", 2.0),
            apply_probability=aug_raw.get("apply_probability", 0.5),
            seed=derive_seed(enc_raw["seed"], "augment-gate"),
        ),
        **enc_raw,
    )

    sim = None
    if "simulate" in raw:
        sim_raw = dict(raw["simulate"])
        sim_raw.setdefault("seed", seeds.get("simulate", 0))
        sim = SyntheticSpec(**sim_raw)

    try:
        return RunConfig(
            out_dir=out_dir,
            cohort_path=Path(paths.get("cohort", out_dir / "cohort.csv")),
            waveform_path=Path(paths.get("waveforms", out_dir / "waveforms.csv")),
            split=SplitAssignment(dict(raw["split"])),
            encoder=encoder_cfg,
            ridge_grid=tuple(raw.get("ridge_grid", DEFAULT_RIDGE_GRID)),
            models=tuple(raw.get("models", DEFAULT_MODELS)),
            reference=raw.get("reference", "office_refit_who"),
            margin=float(raw.get("margin", 0.025)),
            horizon_years=float(raw.get("horizon_years", 10.0)),
            bootstrap_iterations=int(raw.get("bootstrap_iterations", 1000)),
            permutation_iterations=int(raw.get("permutation_iterations", 1000)),
            eval_seed=int(seeds.get("eval", 0)),
            simulate=sim,
            subgroup_quintile_cutoff=int(raw.get("subgroup_quintile_cutoff", 2000)),
            calibration_bins=int(raw.get("calibration_bins", 10)),
        )
    except KeyError as exc:
        raise ValidationError(f"run config is missing required key {exc}") from None


def _atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


# --- paths ----------------------------------------------------------------------


def weights_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / "encoder_weights.bin"


def pca_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / "pca.csv"


def fit_path(cfg: RunConfig, model: str) -> Path:
    return cfg.out_dir / "fits" / f"{model}.txt"


def report_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / "report.json"


# --- simulate ---------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> None:
    if cfg.simulate is None:
        raise ValidationError("config has no 'simulate' section")
    rows, waveforms, truth = generate_synthetic(cfg.simulate)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    tmp_cohort = cfg.cohort_path.with_name(cfg.cohort_path.name + ".tmp")
    write_cohort_csv(tmp_cohort, rows)
    os.replace(tmp_cohort, cfg.cohort_path)
    tmp_wave = cfg.waveform_path.with_name(cfg.waveform_path.name + ".tmp")
    write_waveform_store(tmp_wave, waveforms)
    os.replace(tmp_wave, cfg.waveform_path)
    truth_doc = {
        "coefficients": truth.coefficients,
        "baseline_rate": truth.baseline_rate,
        "eta": truth.eta,
    }
    _atomic_write(cfg.out_dir / "truth.json", json.dumps(truth_doc, sort_keys=True, indent=1))


# --- shared data loading -----------------------------------------------------------


@dataclass
class SplitData:
    train: list[CohortRow]
    tune: list[CohortRow]
    test: list[CohortRow]
    waveforms: dict[str, np.ndarray]
    exclusion_log: dict[str, int]


def load_split_data(cfg: RunConfig, need_waveforms: bool = True) -> SplitData:
    rows = load_cohort(cfg.cohort_path)
    kept, log = apply_inclusion(rows)
    waveforms: dict[str, np.ndarray] = {}
    if need_waveforms and cfg.waveform_path.exists():
        waveforms = load_waveform_store(cfg.waveform_path)
        for row in kept:
            if row.subject_id in waveforms:
                row.ppg_ref = row.subject_id
    train_rows, tune_rows, test_rows = split_by_site(kept, cfg.split)
    return SplitData(train_rows, tune_rows, test_rows, waveforms, log)


def _survival_arrays(rows: list[CohortRow]) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([r.followup_days for r in rows]) / DAYS_PER_YEAR
    events = np.array([int(r.event) for r in rows])
    return times, events


def _waveform_matrix(rows, waveforms) -> tuple[list[CohortRow], np.ndarray]:
    usable = [r for r in rows if r.ppg_ref and r.ppg_ref in waveforms]
    if not usable:
        return [], np.empty((0, 0))
    return usable, np.vstack([waveforms[r.ppg_ref] for r in usable])


def _morphology_map(rows, waveforms) -> dict[str, MorphologyFeatures]:
    out: dict[str, MorphologyFeatures] = {}
    for row in rows:
        if not row.ppg_ref or row.ppg_ref not in waveforms:
            continue
        w = Waveform(waveforms[row.ppg_ref], 0.01)
        height = row.height if row.height else FALLBACK_HEIGHT_CM
        try:
            out[row.subject_id] = extract_morphology(w, height)
        except ValidationError:
            continue
    return out


# --- train -------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> None:
    data = load_split_data(cfg)
    if not data.train or not data.tune:
        raise ValidationError("train and tune splits must both be nonempty")
    train_rows, train_wave = _waveform_matrix(data.train, data.waveforms)
    tune_rows, tune_wave = _waveform_matrix(data.tune, data.waveforms)
    if not train_rows or not tune_rows:
        raise DependencyError("no waveforms available; provide a waveform store")

    morph = _morphology_map(train_rows, data.waveforms)
    notch_present = {
        sid: not feats.notch_absent for sid, feats in morph.items()
    }
    targets = proxy_targets_from_rows(train_rows, notch_present)
    tune_times, tune_events = _survival_arrays(tune_rows)

    params, log = train(cfg.encoder, train_wave, targets, tune_wave, tune_times, tune_events)

    encoder = PulseEncoder(cfg.encoder)
    embeddings = encoder.embed(params, train_wave)
    pca = fit_pca(embeddings, n_components=cfg.encoder.pca_components)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    tmp = weights_path(cfg).with_suffix(".tmp")
    save_params(tmp, params)
    os.replace(tmp, weights_path(cfg))
    _atomic_write(pca_path(cfg), "\n".join(pca_to_csv_lines(pca)) + "\n")
    log_lines = ["epoch,train_loss,tune_pll"]
    log_lines += [f"{e.epoch},{e.train_loss!r},{e.tune_pll!r}" for e in log]
    _atomic_write(cfg.out_dir / "train_log.csv", "\n".join(log_lines) + "\n")


# --- feature resolution --------------------------------------------------------------


_PPG_MODELS = {"dls", "dls_plus", "dls_plus_plus", "dls_no_smoking"}
_MORPH_MODELS = {"metadata_ppg_morph"}


def _embedding_features(cfg: RunConfig, rows, waveforms) -> dict[str, np.ndarray]:
    if not weights_path(cfg).exists() or not pca_path(cfg).exists():
        raise DependencyError(
            "PPG embedding features need encoder weights; run train first"
        )
    params = load_params(weights_path(cfg))
    with open(pca_path(cfg)) as fh:
        pca = pca_from_csv_lines(fh.readlines())
    usable, wave = _waveform_matrix(rows, waveforms)
    if not usable:
        return {}
    encoder = PulseEncoder(cfg.encoder)
    comps = project(pca, encoder.embed(params, wave))
    return {row.subject_id: comps[i] for i, row in enumerate(usable)}


def resolve_model_features(
    cfg: RunConfig, model: str, rows, waveforms
) -> tuple[list[CohortRow], np.ndarray]:
    """(rows with complete covariates, raw feature matrix) for one model.

    Rows missing any demanded covariate are dropped, mirroring
    evaluation-on-the-available-subset for feature sets with gaps.
    """
    spec = MODEL_SPECS[model]
    dls5 = (
        _embedding_features(cfg, rows, waveforms)
        if model in _PPG_MODELS
        else {}
    )
    morph = _morphology_map(rows, waveforms) if model in _MORPH_MODELS else {}
    kept: list[CohortRow] = []
    vectors: list[np.ndarray] = []
    for row in rows:
        try:
            fv = build_features(
                spec,
                row,
                morph=morph.get(row.subject_id),
                dls5=dls5.get(row.subject_id),
            )
        except MissingCovariateError:
            continue
        kept.append(row)
        vectors.append(fv.values)
    if not kept:
        raise NumericalError(f"model {model!r}: no rows with complete covariates")
    return kept, np.vstack(vectors)


# --- fit --------------------------------------------------------------------------


def cmd_fit(cfg: RunConfig) -> None:
    data = load_split_data(cfg)
    for model in cfg.models:
        spec = MODEL_SPECS[model]
        if spec.threshold_rule:
            continue  # pure threshold rule: nothing to fit
        train_rows, X_train = resolve_model_features(cfg, model, data.train, data.waveforms)
        tune_rows, X_tune = resolve_model_features(cfg, model, data.tune, data.waveforms)
        t_train, e_train = _survival_arrays(train_rows)
        t_tune, e_tune = _survival_arrays(tune_rows)
        best: tuple[float, CoxFit] | None = None
        for lam in cfg.ridge_grid:
            fit = fit_cox(spec, X_train, t_train, e_train, lam=lam)
            tune_pll = partial_log_likelihood(fit, X_tune, t_tune, e_tune)
            if best is None or tune_pll > best[0]:
                best = (tune_pll, fit)
        _atomic_write(fit_path(cfg, model), fit_to_text(best[1]))


# --- evaluate ----------------------------------------------------------------------


def _load_fit(cfg: RunConfig, model: str) -> CoxFit:
    path = fit_path(cfg, model)
    if not path.exists():
        raise DependencyError(f"missing fit for model {model!r}; run fit first")
    with open(path) as fh:
        return fit_from_text(fh.read())


def _model_scores(cfg: RunConfig, model: str, rows, waveforms):
    """(subject ids, risk scores) for the rows this model can score."""
    if MODEL_SPECS[model].threshold_rule:
        usable = [r for r in rows if r.sbp is not None]
        scores = np.array([sbp140_score(r.sbp) for r in usable])
        return [r.subject_id for r in usable], scores
    fit = _load_fit(cfg, model)
    kept, X = resolve_model_features(cfg, model, rows, waveforms)
    scores = predict_risk_matrix(fit, X, horizon=cfg.horizon_years)
    return [r.subject_id for r in kept], scores


def cmd_evaluate(cfg: RunConfig) -> None:
    data = load_split_data(cfg)
    if not data.test:
        raise ValidationError("test split is empty")
    rows = data.test
    ids = [r.subject_id for r in rows]
    index_of = {sid: i for i, sid in enumerate(ids)}
    times, events = _survival_arrays(rows)
    outcome = metrics.BinaryOutcome.from_followup(times, events, cfg.horizon_years)

    # score every model on its available subset (NaN elsewhere)
    score_matrix: dict[str, np.ndarray] = {}
    for model in cfg.models:
        scored_ids, scores = _model_scores(cfg, model, rows, data.waveforms)
        column = np.full(len(rows), np.nan)
        for sid, s in zip(scored_ids, scores):
            column[index_of[sid]] = s
        score_matrix[model] = column

    # SBP-140 operating point anchors the matched thresholds
    sbp = np.array([np.nan if r.sbp is None else r.sbp for r in rows])
    sbp_scores = np.where(np.isnan(sbp), np.nan, (sbp >= 140.0).astype(float))
    sbp_mask = ~np.isnan(sbp_scores)
    sbp_conf = metrics.binary_confusion(
        sbp_scores[sbp_mask], 0.5, outcome.subset(sbp_mask)
    )

    report = {
        "reference": cfg.reference,
        "margin": cfg.margin,
        "horizon_years": cfg.horizon_years,
        "n_test": len(rows),
        "exclusions": data.exclusion_log,
        "sbp140_operating_point": {
            "sensitivity": sbp_conf.sensitivity,
            "specificity": sbp_conf.specificity,
        },
        "models": {},
    }
    csv_blobs: dict[str, str] = {}
    for model in cfg.models:
        block, csvs = _evaluate_model(cfg, model, score_matrix, times, events, outcome, sbp_conf, rows)
        report["models"][model] = block
        csv_blobs.update(csvs)

    payload = json.dumps(report, sort_keys=True, indent=1)
    _atomic_write(report_path(cfg), payload)
    for name, blob in csv_blobs.items():
        _atomic_write(cfg.out_dir / name, blob)


def _paired_mask(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ~np.isnan(a) & ~np.isnan(b)


def _evaluate_model(cfg, model, score_matrix, times, events, outcome, sbp_conf, rows):
    scores = score_matrix[model]
    ref_scores = score_matrix[cfg.reference]
    available = ~np.isnan(scores)
    s = scores[available]
    t = times[available]
    e = events[available]
    sub_outcome = outcome.subset(available)
    seed = derive_seed(cfg.eval_seed, "evaluate", model)
    is_rule = MODEL_SPECS[model].threshold_rule

    def c_of(idx):
        return metrics.harrell_c(s[idx], t[idx], e[idx])

    c_ci = metrics.bootstrap_ci(
        c_of, len(s), cfg.bootstrap_iterations, derive_seed(seed, "c")
    )

    # paired comparison on the intersection with the reference
    pair = _paired_mask(scores, ref_scores)
    new_p = scores[pair]
    ref_p = ref_scores[pair]
    t_p = times[pair]
    e_p = events[pair]
    out_p = outcome.subset(pair)
    noninf = metrics.perm_test_cstat(
        new_p, ref_p, t_p, e_p,
        margin=cfg.margin, mode="noninferiority",
        n_resamples=cfg.permutation_iterations, seed=derive_seed(seed, "noninf"),
    )
    superiority = metrics.perm_test_cstat(
        new_p, ref_p, t_p, e_p,
        margin=0.0, mode="superiority",
        n_resamples=cfg.permutation_iterations, seed=derive_seed(seed, "sup"),
    )
    cfnri = metrics.nri_category_free(new_p, ref_p, out_p)

    # thresholds: match SBP-140's specificity / sensitivity, and the 10% rule
    thresholds = {
        "match_specificity": metrics.match_operating_point(
            s, sub_outcome, "match_spec", sbp_conf.specificity
        ),
        "match_sensitivity": metrics.match_operating_point(
            s, sub_outcome, "match_sens", sbp_conf.sensitivity
        ),
        "fixed_risk": metrics.match_operating_point(s, sub_outcome, "fixed_risk"),
    }
    ref_thresholds = {
        mode: metrics.match_operating_point(
            ref_p, out_p,
            "match_spec" if mode == "match_specificity" else "match_sens",
            sbp_conf.specificity if mode == "match_specificity" else sbp_conf.sensitivity,
        )
        for mode in ("match_specificity", "match_sensitivity")
    }
    ref_thresholds["fixed_risk"] = 0.10

    operating_points = {}
    for mode, threshold in thresholds.items():
        conf = metrics.binary_confusion(s, threshold, sub_outcome)
        entry = {
            "threshold": threshold,
            "sensitivity": conf.sensitivity,
            "sensitivity_ci": list(conf.sensitivity_ci),
            "specificity": conf.specificity,
            "specificity_ci": list(conf.specificity_ci),
        }
        nri = metrics.nri_categorical(
            new_p, ref_p, threshold, ref_thresholds[mode], out_p
        )
        entry["nri"] = nri.nri
        entry["nri_event"] = nri.event_component
        entry["nri_nonevent"] = nri.nonevent_component
        target = "sensitivity" if mode == "match_specificity" else "specificity"
        entry["wald_noninferiority_p"] = _wald_delta_p(
            cfg, seed, mode, target, scores, ref_scores, outcome,
            threshold, ref_thresholds[mode],
        )
        operating_points[mode] = entry

    # calibration (undefined for the binary rule scorer)
    if is_rule:
        slope = None
        mace = None
        cal_csv = None
    else:
        table = metrics.calibration(
            s, t, e, bins=cfg.calibration_bins, horizon=cfg.horizon_years
        )
        slope = table.slope
        mace = table.mean_abs_error
        lines = ["bin,mean_predicted,observed,count"]
        for b in range(len(table.counts)):
            lines.append(
                f"{b},{table.mean_predicted[b]!r},{table.observed[b]!r},{table.counts[b]}"
            )
        cal_csv = "\n".join(lines) + "\n"

    # risk-group survival curves at the specificity-matched threshold
    high = s >= thresholds["match_specificity"]
    km = {}
    log_rank_p = None
    if high.any() and (~high).any():
        km_high = metrics.km_curve(t[high], e[high])
        km_low = metrics.km_curve(t[~high], e[~high])
        km = {"high": km_high.steps(), "low": km_low.steps()}
        log_rank_p = metrics.log_rank(t[high], e[high], t[~high], e[~high]).p_value

    enrich = metrics.enrichment(s, sub_outcome, cfg.enrichment_fractions)

    block = {
        "n_evaluated": int(available.sum()),
        "c_statistic": c_ci.point,
        "c_ci": [c_ci.lo, c_ci.hi],
        "delta_vs_reference": noninf.statistic,
        "p_noninferiority": noninf.p_value,
        "p_superiority": superiority.p_value,
        "cfnri": cfnri.nri,
        "cfnri_event": cfnri.event_component,
        "cfnri_nonevent": cfnri.nonevent_component,
        "nri": operating_points["match_specificity"]["nri"],
        "sensitivity": operating_points["match_specificity"]["sensitivity"],
        "sensitivity_ci": operating_points["match_specificity"]["sensitivity_ci"],
        "specificity": operating_points["match_sensitivity"]["specificity"],
        "specificity_ci": operating_points["match_sensitivity"]["specificity_ci"],
        "calibration_slope": slope,
        "calibration_mace": mace,
        "km_curves": km,
        "log_rank_p": log_rank_p,
        "enrichment": {f"{frac:.2f}": res.fold for frac, res in enrich.items()},
        "thresholds": thresholds,
        "operating_points": operating_points,
        "subgroups": metrics.subgroup_report(
            [rows[i] for i in np.nonzero(available)[0]],
            t,
            e,
            {model: s},
            {model: thresholds["match_specificity"]},
            horizon=cfg.horizon_years,
            quintile_cutoff=cfg.subgroup_quintile_cutoff,
            calibration_bins=cfg.calibration_bins,
        ),
    }
    csvs = {}
    if cal_csv is not None:
        csvs[f"calibration_{model}.csv"] = cal_csv
    for group, steps in km.items():
        lines = ["t_years,survival"] + [f"{tt!r},{ss!r}" for tt, ss in steps]
        csvs[f"km_{model}_{group}.csv"] = "\n".join(lines) + "\n"
    return block, csvs


def _wald_delta_p(cfg, seed, mode, target, scores, ref_scores, outcome, thr_new, thr_ref):
    """One-sided Wald non-inferiority p for a sens/spec delta, bootstrap SE."""
    pair = _paired_mask(scores, ref_scores)
    s_new = scores[pair]
    s_ref = ref_scores[pair]
    out_p = outcome.subset(pair)

    def delta_of(idx):
        sub = out_p.subset(idx)
        a = metrics.binary_confusion(s_new[idx], thr_new, sub)
        b = metrics.binary_confusion(s_ref[idx], thr_ref, sub)
        return getattr(a, target) - getattr(b, target)

    try:
        boot = metrics.bootstrap_ci(
            delta_of, len(s_new),
            max(cfg.bootstrap_iterations // 5, 50),
            derive_seed(seed, "wald", mode),
        )
    except NumericalError:
        return None
    se = (boot.hi - boot.lo) / (2 * 1.959963984540054)
    return metrics.wald_one_sided(boot.point, se, cfg.margin).p_value


# --- report -----------------------------------------------------------------------


def render_report(report: dict) -> str:
    """Aligned text tables of the headline metrics per model."""
    lines = []
    ref = report["reference"]
    lines.append(f"reference model: {ref}   margin: {report['margin']:.3f}   n_test: {report['n_test']}")
    lines.append("")
    header = [
        "model", "C (%)", "95% CI", "delta", "p_noninf", "p_sup",
        "cfNRI (%)", "slope",
    ]
    table = [header]
    for model, b in report["models"].items():
        table.append([
            model,
            f"{100 * b['c_statistic']:.1f}",
            f"({100 * b['c_ci'][0]:.1f}, {100 * b['c_ci'][1]:.1f})",
            "ref" if model == ref else f"{100 * b['delta_vs_reference']:+.1f}",
            _fmt_p(b["p_noninferiority"]),
            _fmt_p(b["p_superiority"]),
            f"{100 * b['cfnri']:.1f}",
            "-" if b["calibration_slope"] is None else f"{b['calibration_slope']:.3f}",
        ])
    lines += _align(table)
    lines.append("")
    header2 = ["model", "sens (%)", "sens CI", "spec (%)", "spec CI", "NRI (%)"]
    table2 = [header2]
    for model, b in report["models"].items():
        table2.append([
            model,
            f"{100 * b['sensitivity']:.1f}",
            f"({100 * b['sensitivity_ci'][0]:.1f}, {100 * b['sensitivity_ci'][1]:.1f})",
            f"{100 * b['specificity']:.1f}",
            f"({100 * b['specificity_ci'][0]:.1f}, {100 * b['specificity_ci'][1]:.1f})",
            f"{100 * b['nri']:.1f}",
        ])
    lines += _align(table2)
    return "\n".join(lines) + "\n"


def _fmt_p(p) -> str:
    if p is None:
        return "-"
    return "<0.01" if p < 0.01 else f"{p:.3f}"


def _align(table: list[list[str]]) -> list[str]:
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    return ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in table]


def cmd_report(cfg: RunConfig) -> str:
    path = report_path(cfg)
    if not path.exists():
        raise DependencyError("no report.json found; run evaluate first")
    with open(path) as fh:
        return render_report(json.load(fh))
