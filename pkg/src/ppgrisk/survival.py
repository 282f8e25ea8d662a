"""Ridge-penalized Cox proportional-hazards fitting and risk prediction.

Fits use Newton-Raphson with step-halving on the Breslow-tie partial
likelihood, standard-scale continuous covariates with train-split
statistics, and support age-interaction columns built from the scaled
design.  The Breslow baseline cumulative hazard turns linear predictors
into absolute risks at a horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .cohort import CohortRow
from .errors import MissingCovariateError, NumericalError, ValidationError
from .waveform import MorphologyFeatures

DEFAULT_RIDGE_LAMBDA = 3e-5
NEWTON_TOL = 1e-9
NEWTON_MAX_ITER = 100

# Covariates that enter the design as raw 0/1 flags; everything else is
# standard-scaled with train-split mean/sd.
BINARY_COVARIATES = frozenset(
    {"sex", "smoker", "male_smoker", "female_smoker", "hypertension", "notch_absent"}
)


@dataclass(frozen=True)
class ModelSpec:
    """Covariate recipe for one comparison model."""

    name: str
    covariates: tuple[str, ...]
    interactions: tuple[tuple[str, str], ...] = ()
    threshold_rule: bool = False  # degenerate scorer, no Cox fit

    def __post_init__(self):
        for cov, other in self.interactions:
            if cov not in self.covariates or other not in self.covariates:
                raise ValidationError(
                    f"model {self.name}: interaction ({cov}, {other}) references "
                    "an undeclared covariate"
                )


_METADATA = ("age", "sex", "male_smoker", "female_smoker")
_PPG5 = ("ppg_1", "ppg_2", "ppg_3", "ppg_4", "ppg_5")
_SMOKER_AGE = (("male_smoker", "age"),)

MODEL_SPECS: dict[str, ModelSpec] = {
    spec.name: spec
    for spec in [
        ModelSpec("metadata", _METADATA, _SMOKER_AGE),
        ModelSpec(
            "office_refit_who",
            _METADATA + ("bmi", "sbp"),
            _SMOKER_AGE + (("bmi", "age"), ("sbp", "age")),
        ),
        ModelSpec(
            "lab_refit_who",
            _METADATA + ("total_cholesterol", "glucose"),
            _SMOKER_AGE + (("total_cholesterol", "age"), ("glucose", "age")),
        ),
        ModelSpec(
            "metadata_ppg_morph",
            _METADATA + ("ri", "dt_s", "si_mps", "peak_idx", "ppg_hr"),
            _SMOKER_AGE,
        ),
        ModelSpec("dls", _METADATA + _PPG5 + ("ppg_hr",), _SMOKER_AGE),
        ModelSpec(
            "dls_plus",
            _METADATA + ("bmi",) + _PPG5 + ("ppg_hr",),
            _SMOKER_AGE + (("bmi", "age"),),
        ),
        ModelSpec(
            "dls_plus_plus",
            _METADATA + ("bmi", "sbp") + _PPG5 + ("ppg_hr",),
            _SMOKER_AGE + (("bmi", "age"), ("sbp", "age")),
        ),
        ModelSpec(
            "full",
            _METADATA
            + ("bmi", "sbp", "total_cholesterol", "glucose", "hba1c", "hypertension"),
            _SMOKER_AGE + (("bmi", "age"), ("sbp", "age")),
        ),
        ModelSpec("sbp140", ("sbp",), threshold_rule=True),
        ModelSpec("smoking_only", ("smoker",)),
        ModelSpec(
            "office_no_smoking",
            ("age", "sex", "bmi", "sbp"),
            (("bmi", "age"), ("sbp", "age")),
        ),
        ModelSpec("dls_no_smoking", ("age", "sex") + _PPG5 + ("ppg_hr",)),
    ]
}


@dataclass(frozen=True)
class FeatureVector:
    subject_id: str
    names: tuple[str, ...]
    values: np.ndarray


def build_features(
    spec: ModelSpec,
    row: CohortRow,
    morph: MorphologyFeatures | None = None,
    dls5: np.ndarray | None = None,
    ppg_hr: float | None = None,
) -> FeatureVector:
    """Assemble the ordered raw covariate values one model needs for a row.

    Missing values raise, listing the offenders; subset evaluation is the
    caller's decision.
    """
    if ppg_hr is None:
        ppg_hr = row.ppg_hr
    values = []
    missing = []
    for name in spec.covariates:
        value = _resolve_covariate(name, row, morph, dls5, ppg_hr)
        if value is None:
            missing.append(name)
        else:
            values.append(float(value))
    if missing:
        raise MissingCovariateError(missing)
    return FeatureVector(
        subject_id=row.subject_id, names=spec.covariates, values=np.array(values)
    )


def _resolve_covariate(name, row, morph, dls5, ppg_hr):
    if name == "male_smoker":
        if row.smoker is None or row.sex is None:
            return None
        return row.smoker * (1 - row.sex)
    if name == "female_smoker":
        if row.smoker is None or row.sex is None:
            return None
        return row.smoker * row.sex
    if name == "ppg_hr":
        return ppg_hr
    if name.startswith("ppg_"):
        idx = int(name.split("_")[1]) - 1
        if dls5 is None or idx >= len(dls5):
            return None
        return dls5[idx]
    if name in ("ri", "dt_s", "si_mps", "peak_idx", "notch_absent"):
        if morph is None:
            return None
        return {
            "ri": morph.reflection_index,
            "dt_s": morph.peak_to_peak_time,
            "si_mps": morph.stiffness_index,
            "peak_idx": morph.peak_position,
            "notch_absent": int(morph.notch_absent),
        }[name]
    return getattr(row, name)


def sbp140_score(sbp: float) -> float:
    """Degenerate single-rule scorer: high risk iff SBP at or above 140."""
    return 1.0 if sbp >= 140.0 else 0.0


# --- the fit ------------------------------------------------------------------


@dataclass
class CoxFit:
    spec: ModelSpec
    names: tuple[str, ...]  # base covariates then interaction columns
    scaler_mean: np.ndarray  # per base covariate (0 for binary)
    scaler_sd: np.ndarray  # per base covariate (1 for binary)
    beta: np.ndarray
    covariance: np.ndarray
    baseline_times: np.ndarray  # distinct event times, ascending
    baseline_cumhaz: np.ndarray  # H0 at those times
    ridge_lambda: float
    converged: bool
    iterations: int
    final_pll: float  # unpenalized partial log-likelihood at the optimum
    max_time: float
    n_events: int


@dataclass(frozen=True)
class RiskScore:
    subject_id: str
    eta: float
    risk10: float
    extrapolated: bool = False


@dataclass(frozen=True)
class WaldPValue:
    p: float
    degenerate: bool = False


def _design_matrix(base_names, X: np.ndarray, mean, sd, interactions):
    """Scale base covariates and append interaction columns z_cov * z_age."""
    z = (X - mean) / sd
    cols = [z]
    for cov, other in interactions:
        i = base_names.index(cov)
        j = base_names.index(other)
        cols.append((z[:, i] * z[:, j])[:, None])
    return np.hstack(cols)


def _partial_likelihood_terms(design, times, events, beta):
    """(pll, gradient, hessian) of the Breslow partial log-likelihood."""
    order = np.argsort(times, kind="stable")
    d = design[order]
    t = times[order]
    e = events[order]
    eta = d @ beta
    w = np.exp(eta)

    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((d * w[:, None])[::-1], axis=0)[::-1]
    outer = d[:, :, None] * d[:, None, :] * w[:, None, None]
    s2 = np.cumsum(outer[::-1], axis=0)[::-1]

    pll = 0.0
    grad = np.zeros(design.shape[1])
    hess = np.zeros((design.shape[1], design.shape[1]))
    i = 0
    n = len(t)
    while i < n:
        j = i
        while j < n and t[j] == t[i]:
            j += 1
        ev = e[i:j].astype(bool)
        d_count = int(ev.sum())
        if d_count:
            xbar = s1[i] / s0[i]
            pll += eta[i:j][ev].sum() - d_count * math.log(s0[i])
            grad += d[i:j][ev].sum(axis=0) - d_count * xbar
            hess -= d_count * (s2[i] / s0[i] - np.outer(xbar, xbar))
        i = j
    return pll, grad, hess


def _penalized_pll(design, times, events, beta, lam):
    pll, _, _ = _partial_likelihood_terms(design, times, events, beta)
    return pll - 0.5 * lam * float(beta @ beta)


def fit_cox(
    spec: ModelSpec,
    X: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    lam: float = DEFAULT_RIDGE_LAMBDA,
) -> CoxFit:
    """Maximize the ridge-penalized Breslow partial log-likelihood.

    Continuous covariates are standardized with the mean/sd of this
    training sample (stored inside the fit); binary flags stay raw.  The
    penalty covers every coefficient, interactions included.
    """
    X = np.asarray(X, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if X.ndim != 2 or X.shape[0] != times.size or times.size != events.size:
        raise ValidationError("design, times and events must have matching rows")
    if not np.all(np.isfinite(X)):
        raise ValidationError("design contains non-finite values")
    if events.sum() < 1:
        raise NumericalError("cannot fit a Cox model with no events")
    if lam < 0:
        raise ValidationError("ridge penalty must be >= 0")

    base_names = list(spec.covariates)
    mean = np.zeros(X.shape[1])
    sd = np.ones(X.shape[1])
    for k, name in enumerate(base_names):
        if name not in BINARY_COVARIATES:
            mean[k] = X[:, k].mean()
            col_sd = X[:, k].std()
            sd[k] = col_sd if col_sd > 0 else 1.0

    design = _design_matrix(base_names, X, mean, sd, spec.interactions)
    names = spec.covariates + tuple(f"{c}_x_{o}" for c, o in spec.interactions)
    p = design.shape[1]

    beta = np.zeros(p)
    pll, grad, hess = _partial_likelihood_terms(design, times, events, beta)
    converged = False
    iterations = 0
    for iterations in range(1, NEWTON_MAX_ITER + 1):
        if not np.isfinite(pll):
            raise NumericalError(
                f"non-finite partial likelihood at iteration {iterations}"
            )
        grad_p = grad - lam * beta
        info = -hess + lam * np.eye(p)
        try:
            step = np.linalg.solve(info, grad_p)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad_p, rcond=None)[0]
        # step-halving keeps the penalized objective non-decreasing
        obj = pll - 0.5 * lam * float(beta @ beta)
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            cand_obj = _penalized_pll(design, times, events, candidate, lam)
            if np.isfinite(cand_obj) and cand_obj >= obj - 1e-12:
                break
            scale *= 0.5
        beta = beta + scale * step
        if np.max(np.abs(scale * step)) < NEWTON_TOL:
            converged = True
            pll, grad, hess = _partial_likelihood_terms(design, times, events, beta)
            break
        pll, grad, hess = _partial_likelihood_terms(design, times, events, beta)

    info = -hess + lam * np.eye(p)
    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        covariance = np.linalg.pinv(info)

    baseline_times, baseline_cumhaz = _breslow_baseline(design, times, events, beta)
    return CoxFit(
        spec=spec,
        names=names,
        scaler_mean=mean,
        scaler_sd=sd,
        beta=beta,
        covariance=covariance,
        baseline_times=baseline_times,
        baseline_cumhaz=baseline_cumhaz,
        ridge_lambda=float(lam),
        converged=converged,
        iterations=iterations,
        final_pll=float(pll),
        max_time=float(times.max()),
        n_events=int(events.sum()),
    )


def _breslow_baseline(design, times, events, beta):
    order = np.argsort(times, kind="stable")
    t = times[order]
    e = events[order]
    w = np.exp(design[order] @ beta)
    s0 = np.cumsum(w[::-1])[::-1]
    step_times = []
    increments = []
    i = 0
    n = len(t)
    while i < n:
        j = i
        while j < n and t[j] == t[i]:
            j += 1
        d_count = int(e[i:j].sum())
        if d_count:
            step_times.append(t[i])
            increments.append(d_count / s0[i])
        i = j
    return np.array(step_times), np.cumsum(np.array(increments))


def baseline_cumhaz_at(fit: CoxFit, horizon: float) -> float:
    idx = np.searchsorted(fit.baseline_times, horizon, side="right") - 1
    return float(fit.baseline_cumhaz[idx]) if idx >= 0 else 0.0


def design_from_features(fit: CoxFit, X: np.ndarray) -> np.ndarray:
    return _design_matrix(
        list(fit.spec.covariates), X, fit.scaler_mean, fit.scaler_sd, fit.spec.interactions
    )


def linear_predictor(fit: CoxFit, X: np.ndarray) -> np.ndarray:
    """eta for each row of the raw base-covariate matrix X."""
    return design_from_features(fit, X) @ fit.beta


def predict_risk(
    fit: CoxFit, features: FeatureVector, horizon: float = 10.0
) -> RiskScore:
    """Absolute event probability by ``horizon`` (same time unit as the fit).

    Beyond the last observed event time the baseline hazard is held flat
    and the result is flagged as extrapolated.
    """
    if not fit.converged:
        raise NumericalError("fit did not converge; refusing to predict")
    eta = float(linear_predictor(fit, features.values[None, :])[0])
    cumhaz = baseline_cumhaz_at(fit, horizon)
    risk = 1.0 - math.exp(-cumhaz * math.exp(eta))
    return RiskScore(
        subject_id=features.subject_id,
        eta=eta,
        risk10=risk,
        extrapolated=horizon > fit.max_time,
    )


def predict_risk_matrix(fit: CoxFit, X: np.ndarray, horizon: float = 10.0) -> np.ndarray:
    eta = linear_predictor(fit, X)
    return 1.0 - np.exp(-baseline_cumhaz_at(fit, horizon) * np.exp(eta))


def partial_log_likelihood(fit: CoxFit, X: np.ndarray, times, events) -> float:
    """Unpenalized Breslow partial log-likelihood of the fit on new data."""
    design = design_from_features(fit, X)
    pll, _, _ = _partial_likelihood_terms(
        design, np.asarray(times, dtype=float), np.asarray(events, dtype=int), fit.beta
    )
    return float(pll)


def hazard_ratio_at_age(
    fit: CoxFit, covariate: str, reference_age: float = 63.0, alpha: float = 0.05
) -> tuple[float, tuple[float, float]]:
    """HR for one covariate evaluated at a reference age.

    Combines the main effect with its age-interaction coefficient (when
    declared) at the standardized reference age; the CI comes from the
    delta method on that linear combination.  Continuous covariates are
    per 1-sd increase.
    """
    if covariate not in fit.names:
        raise ValidationError(f"unknown covariate {covariate!r}")
    from scipy.stats import norm

    i = fit.names.index(covariate)
    est = fit.beta[i]
    var = fit.covariance[i, i]
    inter = f"{covariate}_x_age"
    if inter in fit.names:
        if "age" not in fit.spec.covariates:
            raise ValidationError("age interaction declared without an age covariate")
        a = fit.spec.covariates.index("age")
        z = (reference_age - fit.scaler_mean[a]) / fit.scaler_sd[a]
        j = fit.names.index(inter)
        est = est + fit.beta[j] * z
        var = var + z * z * fit.covariance[j, j] + 2 * z * fit.covariance[i, j]
    se = math.sqrt(max(var, 0.0))
    zq = norm.ppf(1 - alpha / 2)
    return math.exp(est), (math.exp(est - zq * se), math.exp(est + zq * se))


def wald_pvalues(fit: CoxFit) -> dict[str, WaldPValue]:
    """Two-sided normal p-value per coefficient from the stored covariance."""
    out: dict[str, WaldPValue] = {}
    for k, name in enumerate(fit.names):
        var = fit.covariance[k, k]
        if var <= 0:
            out[name] = WaldPValue(p=1.0, degenerate=True)
            continue
        z = abs(fit.beta[k]) / math.sqrt(var)
        out[name] = WaldPValue(p=float(erfc(z / math.sqrt(2.0))))
    return out


# --- serialization ------------------------------------------------------------


def fit_to_text(fit: CoxFit) -> str:
    lines = [
        "cox-fit v1",
        f"model {fit.spec.name}",
        f"lambda {fit.ridge_lambda!r}",
        f"converged {int(fit.converged)}",
        f"iterations {fit.iterations}",
        f"final_pll {fit.final_pll!r}",
        f"max_time {fit.max_time!r}",
        f"n_events {fit.n_events}",
        f"covariates {len(fit.spec.covariates)}",
    ]
    for k, name in enumerate(fit.spec.covariates):
        lines.append(f"{name} {fit.scaler_mean[k]!r} {fit.scaler_sd[k]!r}")
    lines.append(f"interactions {len(fit.spec.interactions)}")
    for cov, other in fit.spec.interactions:
        lines.append(f"{cov} {other}")
    lines.append(f"beta {len(fit.beta)}")
    for name, b in zip(fit.names, fit.beta):
        lines.append(f"{name} {b!r}")
    lines.append(f"covariance {fit.covariance.shape[0]}")
    for row in fit.covariance:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append(f"baseline {len(fit.baseline_times)}")
    for t, h in zip(fit.baseline_times, fit.baseline_cumhaz):
        lines.append(f"{t!r} {h!r}")
    return "\n".join(lines) + "\n"


def fit_from_text(text: str) -> CoxFit:
    lines = text.splitlines()
    if not lines or lines[0] != "cox-fit v1":
        raise ValidationError("not a cox fit file")
    pos = 1

    def take() -> str:
        nonlocal pos
        line = lines[pos]
        pos += 1
        return line

    header: dict[str, str] = {}
    for key in (
        "model",
        "lambda",
        "converged",
        "iterations",
        "final_pll",
        "max_time",
        "n_events",
    ):
        name, _, value = take().partition(" ")
        if name != key:
            raise ValidationError(f"expected {key!r} line, found {name!r}")
        header[key] = value

    n_cov = int(take().split(" ")[1])
    cov_names, means, sds = [], [], []
    for _ in range(n_cov):
        name, m, s = take().split(" ")
        cov_names.append(name)
        means.append(float(m))
        sds.append(float(s))
    n_inter = int(take().split(" ")[1])
    interactions = []
    for _ in range(n_inter):
        cov, other = take().split(" ")
        interactions.append((cov, other))
    n_beta = int(take().split(" ")[1])
    names, beta = [], []
    for _ in range(n_beta):
        name, value = take().split(" ")
        names.append(name)
        beta.append(float(value))
    dim = int(take().split(" ")[1])
    cov_rows = [np.array(take().split(" "), dtype=float) for _ in range(dim)]
    n_base = int(take().split(" ")[1])
    b_times, b_haz = [], []
    for _ in range(n_base):
        t, h = take().split(" ")
        b_times.append(float(t))
        b_haz.append(float(h))

    model_name = header["model"]
    spec = MODEL_SPECS.get(model_name)
    if spec is None or tuple(cov_names) != spec.covariates:
        spec = ModelSpec(model_name, tuple(cov_names), tuple(interactions))
    return CoxFit(
        spec=spec,
        names=tuple(names),
        scaler_mean=np.array(means),
        scaler_sd=np.array(sds),
        beta=np.array(beta),
        covariance=np.vstack(cov_rows) if cov_rows else np.zeros((0, 0)),
        baseline_times=np.array(b_times),
        baseline_cumhaz=np.array(b_haz),
        ridge_lambda=float(header["lambda"]),
        converged=bool(int(header["converged"])),
        iterations=int(header["iterations"]),
        final_pll=float(header["final_pll"]),
        max_time=float(header["max_time"]),
        n_events=int(header["n_events"]),
    )
