"""Discrimination, reclassification, calibration and resampling statistics.

Survival times here are in years.  The concordance kernel is an
O(n log n) Fenwick-tree sweep (numba-compiled) with an O(n^2) reference
implementation retained for verification; resampling procedures key every
iteration's randomness by (seed, iteration) so results do not depend on
execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.stats import beta as beta_dist
from scipy.stats import chi2, norm

from .errors import NumericalError, ValidationError
from .rng import keyed_rng

DEFAULT_HORIZON_YEARS = 10.0


# --- outcome view -------------------------------------------------------------


@dataclass(frozen=True)
class BinaryOutcome:
    """10-year binary view of (followup, event) data.

    Subjects censored event-free before the horizon cannot be classified
    and are excluded from sensitivity/specificity-style metrics.
    """

    event_within: np.ndarray  # bool
    event_free: np.ndarray  # bool
    excluded: np.ndarray  # bool
    horizon: float

    @classmethod
    def from_followup(cls, times, events, horizon: float = DEFAULT_HORIZON_YEARS):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=bool)
        event_within = events & (times <= horizon)
        event_free = ~event_within & (times >= horizon)
        excluded = ~event_within & ~event_free
        return cls(event_within, event_free, excluded, horizon)

    @property
    def included(self) -> np.ndarray:
        return ~self.excluded

    def subset(self, idx) -> "BinaryOutcome":
        return BinaryOutcome(
            self.event_within[idx], self.event_free[idx], self.excluded[idx], self.horizon
        )


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: str
    margin: float | None = None
    n_resamples: int | None = None
    seed: int | None = None
    warning: bool = False
    degenerate: bool = False


# --- concordance ----------------------------------------------------------------


@njit(cache=True)
def _cstat_sweep(times, events, ranks, n_ranks):
    """Fenwick-tree sweep over descending times.

    A pair is comparable when subject i has an event and j outlives i
    (strictly later time, or censored at the same time).  Concordance gives
    weight 1 when risk_i > risk_j and 0.5 on risk ties.
    """
    n = times.shape[0]
    tree = np.zeros(n_ranks + 1)
    inserted = 0.0
    concordant = 0.0
    comparable = 0.0
    i = 0
    while i < n:
        j = i
        while j < n and times[j] == times[i]:
            j += 1
        for k in range(i, j):  # censored-at-t first: events at t can see them
            if events[k] == 0:
                r = ranks[k]
                while r <= n_ranks:
                    tree[r] += 1.0
                    r += r & (-r)
                inserted += 1.0
        for k in range(i, j):
            if events[k] == 1:
                s_le = 0.0
                r = ranks[k]
                while r > 0:
                    s_le += tree[r]
                    r -= r & (-r)
                s_lt = 0.0
                r = ranks[k] - 1
                while r > 0:
                    s_lt += tree[r]
                    r -= r & (-r)
                concordant += s_lt + 0.5 * (s_le - s_lt)
                comparable += inserted
        for k in range(i, j):
            if events[k] == 1:
                r = ranks[k]
                while r <= n_ranks:
                    tree[r] += 1.0
                    r += r & (-r)
                inserted += 1.0
        i = j
    return concordant, comparable


def _validate_survival_args(risks, times, events):
    risks = np.asarray(risks, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if not (risks.size == times.size == events.size):
        raise ValidationError("risks, times and events must have equal length")
    return risks, times, events


def harrell_c(risks, times, events) -> float:
    """Concordance of risk ordering with observed event ordering."""
    risks, times, events = _validate_survival_args(risks, times, events)
    order = np.argsort(-times, kind="stable")
    uniq, inverse = np.unique(risks, return_inverse=True)
    ranks = (inverse[order] + 1).astype(np.int64)
    concordant, comparable = _cstat_sweep(
        times[order], events[order].astype(np.int64), ranks, len(uniq)
    )
    if comparable == 0:
        raise NumericalError("no comparable pairs for the concordance statistic")
    return float(concordant / comparable)


def harrell_c_brute(risks, times, events) -> float:
    """O(n^2) reference implementation; must agree exactly with harrell_c."""
    risks, times, events = _validate_survival_args(risks, times, events)
    e_i = events.astype(bool)[:, None]
    e_j = events.astype(bool)[None, :]
    t_i = times[:, None]
    t_j = times[None, :]
    comparable = e_i & ((t_j > t_i) | ((t_j == t_i) & ~e_j))
    weight = np.where(
        risks[:, None] > risks[None, :],
        1.0,
        np.where(risks[:, None] == risks[None, :], 0.5, 0.0),
    )
    n_comparable = comparable.sum()
    if n_comparable == 0:
        raise NumericalError("no comparable pairs for the concordance statistic")
    return float((weight * comparable).sum() / n_comparable)


# --- Kaplan-Meier and the log-rank test -------------------------------------------


@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray  # distinct event times, ascending
    survival: np.ndarray  # S after each drop
    at_risk: np.ndarray
    n_events: np.ndarray

    def at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return float(self.survival[idx]) if idx >= 0 else 1.0

    def steps(self) -> list[tuple[float, float]]:
        return [(0.0, 1.0)] + [
            (float(t), float(s)) for t, s in zip(self.times, self.survival)
        ]


def km_curve(times, events) -> KmCurve:
    """Product-limit estimator; S(0)=1 and drops only at event times."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if times.size == 0:
        raise ValidationError("empty sample")
    order = np.argsort(times, kind="stable")
    t = times[order]
    e = events[order]
    out_t, out_s, out_r, out_d = [], [], [], []
    s = 1.0
    i = 0
    n = len(t)
    while i < n:
        j = i
        while j < n and t[j] == t[i]:
            j += 1
        d = int(e[i:j].sum())
        if d:
            at_risk = n - i
            s *= 1.0 - d / at_risk
            out_t.append(t[i])
            out_s.append(s)
            out_r.append(at_risk)
            out_d.append(d)
        i = j
    return KmCurve(
        np.array(out_t), np.array(out_s), np.array(out_r, dtype=int), np.array(out_d, dtype=int)
    )


def log_rank(times_a, events_a, times_b, events_b) -> TestResult:
    """Two-group log-rank chi-square test (1 df)."""
    ta = np.asarray(times_a, dtype=float)
    ea = np.asarray(events_a, dtype=int)
    tb = np.asarray(times_b, dtype=float)
    eb = np.asarray(events_b, dtype=int)
    if ta.size == 0 or tb.size == 0:
        raise ValidationError("both groups must be nonempty")
    event_times = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    observed_minus_expected = 0.0
    variance = 0.0
    for t in event_times:
        n1 = int((ta >= t).sum())
        n2 = int((tb >= t).sum())
        d1 = int(((ta == t) & (ea == 1)).sum())
        d2 = int(((tb == t) & (eb == 1)).sum())
        n = n1 + n2
        d = d1 + d2
        if n1 == 0 or n2 == 0 or n <= 1:
            continue
        observed_minus_expected += d1 - d * n1 / n
        variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    if variance <= 0:
        return TestResult(statistic=0.0, p_value=1.0, method="log_rank", degenerate=True)
    stat = observed_minus_expected**2 / variance
    return TestResult(statistic=float(stat), p_value=float(chi2.sf(stat, 1)), method="log_rank")


# --- operating points ----------------------------------------------------------


def clopper_pearson(k: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Exact binomial CI by beta-quantile inversion."""
    if not 0 <= k <= n or n == 0:
        raise ValidationError(f"need 0 <= k <= n with n > 0, got k={k}, n={n}")
    lo = 0.0 if k == 0 else float(beta_dist.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(beta_dist.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


@dataclass(frozen=True)
class ConfusionResult:
    sensitivity: float
    specificity: float
    sensitivity_ci: tuple[float, float]
    specificity_ci: tuple[float, float]
    tp: int
    fp: int
    tn: int
    fn: int


def binary_confusion(scores, threshold: float, outcome: BinaryOutcome) -> ConfusionResult:
    """Sensitivity/specificity of ``score >= threshold`` with exact CIs.

    Subjects without a classifiable 10-year status are dropped.
    """
    scores = np.asarray(scores, dtype=float)
    positive = outcome.event_within
    negative = outcome.event_free
    n_pos = int(positive.sum())
    n_neg = int(negative.sum())
    if n_pos == 0 or n_neg == 0:
        raise NumericalError("need at least one event and one event-free subject")
    predicted = scores >= threshold
    tp = int((predicted & positive).sum())
    fn = n_pos - tp
    fp = int((predicted & negative).sum())
    tn = n_neg - fp
    return ConfusionResult(
        sensitivity=tp / n_pos,
        specificity=tn / n_neg,
        sensitivity_ci=clopper_pearson(tp, n_pos),
        specificity_ci=clopper_pearson(tn, n_neg),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


def match_operating_point(
    scores, outcome: BinaryOutcome, mode: str, target: float | None = None
) -> float:
    """Threshold achieving a target sensitivity or specificity.

    ``match_spec``: smallest threshold with specificity >= target (the
    most sensitive compliant cut).  ``match_sens``: largest threshold with
    sensitivity >= target (the most specific compliant cut).
    ``fixed_risk`` ignores the data and returns the 10% rule.
    """
    if mode == "fixed_risk":
        return 0.10
    if mode not in ("match_sens", "match_spec"):
        raise ValidationError(f"unknown operating-point mode {mode!r}")
    if target is None:
        raise ValidationError("matching modes need a target")
    scores = np.asarray(scores, dtype=float)
    pos_scores = np.sort(scores[outcome.event_within])
    neg_scores = np.sort(scores[outcome.event_free])
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise NumericalError("need at least one event and one event-free subject")
    candidates = np.concatenate([np.unique(scores[outcome.included]), [np.inf]])
    # predicted positive means score >= threshold
    sens = 1.0 - np.searchsorted(pos_scores, candidates, side="left") / pos_scores.size
    spec = np.searchsorted(neg_scores, candidates, side="left") / neg_scores.size
    if mode == "match_spec":
        ok = np.nonzero(spec >= target - 1e-12)[0]
        if ok.size == 0:
            raise ValidationError(
                f"specificity {target:.3f} unreachable; maximum achievable {spec.max():.3f}"
            )
        return float(candidates[ok[0]])
    ok = np.nonzero(sens >= target - 1e-12)[0]
    if ok.size == 0:
        raise ValidationError(
            f"sensitivity {target:.3f} unreachable; maximum achievable {sens.max():.3f}"
        )
    return float(candidates[ok[-1]])


# --- reclassification -----------------------------------------------------------


@dataclass(frozen=True)
class NriResult:
    nri: float
    event_component: float
    nonevent_component: float


def _nri_from_moves(up, down, outcome: BinaryOutcome) -> NriResult:
    events = outcome.event_within
    nonevents = outcome.event_free
    n_events = int(events.sum())
    n_nonevents = int(nonevents.sum())
    if n_events == 0 or n_nonevents == 0:
        raise NumericalError("need events and non-events for reclassification metrics")
    event_comp = (up & events).sum() / n_events - (down & events).sum() / n_events
    nonevent_comp = (down & nonevents).sum() / n_nonevents - (up & nonevents).sum() / n_nonevents
    return NriResult(
        nri=float(event_comp + nonevent_comp),
        event_component=float(event_comp),
        nonevent_component=float(nonevent_comp),
    )


def nri_categorical(
    new_scores, old_scores, threshold_new: float, threshold_old: float, outcome: BinaryOutcome
) -> NriResult:
    """Two-category net reclassification: up = old low, new high."""
    new_scores = np.asarray(new_scores, dtype=float)
    old_scores = np.asarray(old_scores, dtype=float)
    new_high = new_scores >= threshold_new
    old_high = old_scores >= threshold_old
    return _nri_from_moves(new_high & ~old_high, ~new_high & old_high, outcome)


def nri_category_free(new_scores, old_scores, outcome: BinaryOutcome) -> NriResult:
    """Category-free net reclassification: any score increase counts as up."""
    new_scores = np.asarray(new_scores, dtype=float)
    old_scores = np.asarray(old_scores, dtype=float)
    return _nri_from_moves(new_scores > old_scores, new_scores < old_scores, outcome)


# --- calibration ----------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationTable:
    mean_predicted: np.ndarray
    observed: np.ndarray
    counts: np.ndarray
    slope: float | None
    intercept: float | None
    mean_abs_error: float
    merged_bins: bool = False
    degenerate: bool = False


def calibration(
    scores,
    times,
    events,
    bins: int = 10,
    horizon: float = DEFAULT_HORIZON_YEARS,
    censoring_aware: bool = True,
) -> CalibrationTable:
    """Observed-vs-predicted risk across predicted-risk quantile bins.

    Observed rates default to 1 - KM(horizon) within each bin so censored
    follow-up does not bias them; ``censoring_aware=False`` switches to raw
    proportions over classifiable subjects.  Massive score ties can empty
    quantile bins; those are merged away and flagged.
    """
    scores = np.asarray(scores, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if scores.size < bins:
        raise ValidationError(f"need at least {bins} subjects for {bins} bins")
    edges = np.quantile(scores, np.arange(1, bins) / bins)
    assignment = np.searchsorted(edges, scores, side="right")

    mean_pred, observed, counts = [], [], []
    merged = False
    for b in range(bins):
        mask = assignment == b
        n_bin = int(mask.sum())
        if n_bin == 0:
            merged = True  # quantile ties collapsed this bin into a neighbor
            continue
        mean_pred.append(float(scores[mask].mean()))
        counts.append(n_bin)
        if censoring_aware:
            curve = km_curve(times[mask], events[mask])
            observed.append(1.0 - curve.at(horizon))
        else:
            view = BinaryOutcome.from_followup(times[mask], events[mask], horizon)
            n_inc = int(view.included.sum())
            observed.append(
                float(view.event_within.sum() / n_inc) if n_inc else np.nan
            )
    mean_pred = np.array(mean_pred)
    observed = np.array(observed)
    counts = np.array(counts, dtype=int)

    distinct = np.unique(mean_pred).size
    if distinct < 2:
        return CalibrationTable(
            mean_pred, observed, counts,
            slope=None, intercept=None,
            mean_abs_error=float(np.mean(np.abs(observed - mean_pred))),
            merged_bins=merged, degenerate=True,
        )
    slope, intercept = np.polyfit(mean_pred, observed, 1)
    return CalibrationTable(
        mean_pred, observed, counts,
        slope=float(slope), intercept=float(intercept),
        mean_abs_error=float(np.mean(np.abs(observed - mean_pred))),
        merged_bins=merged,
    )


# --- resampling -------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lo: float
    hi: float
    n_resamples: int
    seed: int


def bootstrap_ci(
    metric, n_subjects: int, n_resamples: int = 1000, seed: int = 0, alpha: float = 0.05
) -> BootstrapCI:
    """Percentile bootstrap of ``metric`` over subject index resamples.

    ``metric`` receives an index array into the caller's data.  Iteration i
    draws from a stream keyed (seed, i); resamples where the metric raises
    NumericalError are redrawn (at most 10 times each).
    """
    point = float(metric(np.arange(n_subjects)))
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        rng = keyed_rng(seed, "bootstrap", i)
        for attempt in range(10):
            idx = rng.integers(0, n_subjects, size=n_subjects)
            try:
                values[i] = metric(idx)
                break
            except NumericalError:
                continue
        else:
            raise NumericalError(f"bootstrap iteration {i}: metric failed 10 redraws")
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return BootstrapCI(point, float(lo), float(hi), n_resamples, seed)


def perm_test_cstat(
    new_scores,
    ref_scores,
    times,
    events,
    margin: float = 0.025,
    mode: str = "noninferiority",
    n_resamples: int = 1000,
    seed: int = 0,
) -> TestResult:
    """Paired permutation test on the C-statistic difference.

    The null swaps each subject's pair of scores with probability 1/2.
    Non-inferiority counts permuted deltas at least (observed + margin);
    superiority counts those at least the observed delta, so margin 0
    reduces to the superiority test.
    """
    if mode not in ("noninferiority", "superiority"):
        raise ValidationError(f"unknown permutation mode {mode!r}")
    new_scores = np.asarray(new_scores, dtype=float)
    ref_scores = np.asarray(ref_scores, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if new_scores.size != ref_scores.size:
        raise ValidationError("paired scores must cover identical subjects")
    delta = harrell_c(new_scores, times, events) - harrell_c(ref_scores, times, events)
    cutoff = delta + margin if mode == "noninferiority" else delta
    n = new_scores.size
    hits = 0
    for i in range(n_resamples):
        swap = keyed_rng(seed, "perm", i).uniform(size=n) < 0.5
        a = np.where(swap, ref_scores, new_scores)
        b = np.where(swap, new_scores, ref_scores)
        perm_delta = harrell_c(a, times, events) - harrell_c(b, times, events)
        if perm_delta >= cutoff - 1e-15:
            hits += 1
    return TestResult(
        statistic=float(delta),
        p_value=hits / n_resamples,
        method=f"permutation_{mode}",
        margin=margin if mode == "noninferiority" else None,
        n_resamples=n_resamples,
        seed=seed,
        warning=n_resamples < 100,
    )


def wald_one_sided(delta: float, se: float, margin: float = 0.0) -> TestResult:
    """One-sided Wald test of H0: delta <= -margin."""
    if se < 0:
        raise ValidationError("standard error must be >= 0")
    if se == 0:
        shifted = delta + margin
        p = 0.0 if shifted > 0 else 1.0 if shifted < 0 else 0.5
        return TestResult(
            statistic=math.inf if shifted else 0.0,
            p_value=p,
            method="wald_one_sided",
            margin=margin,
            degenerate=True,
        )
    z = (delta + margin) / se
    return TestResult(
        statistic=float(z),
        p_value=float(norm.sf(z)),
        method="wald_one_sided",
        margin=margin,
    )


# --- enrichment --------------------------------------------------------------------


@dataclass(frozen=True)
class EnrichmentResult:
    fold: float
    effective_fraction: float


def enrichment(
    scores, outcome: BinaryOutcome, top_fractions=(0.20, 0.10, 0.05)
) -> dict[float, EnrichmentResult]:
    """Event-prevalence fold change in the top score fractions.

    Ties at the cut are all included; the effective fraction reports how
    many subjects that actually selected.
    """
    scores = np.asarray(scores, dtype=float)
    included = outcome.included
    s = scores[included]
    is_event = outcome.event_within[included]
    m = s.size
    prevalence = is_event.sum() / m if m else 0.0
    if prevalence == 0:
        raise NumericalError("zero overall prevalence; enrichment undefined")
    order = np.argsort(-s, kind="stable")
    sorted_scores = s[order]
    out: dict[float, EnrichmentResult] = {}
    for frac in top_fractions:
        k = max(1, math.ceil(frac * m))
        cutoff = sorted_scores[k - 1]
        selected = s >= cutoff
        n_sel = int(selected.sum())
        top_prev = is_event[selected].sum() / n_sel
        out[frac] = EnrichmentResult(
            fold=float(top_prev / prevalence), effective_fraction=n_sel / m
        )
    return out


# --- subgroup reports ----------------------------------------------------------------

SUBGROUP_DEFINITIONS = (
    ("smoker", lambda r: None if r.smoker is None else r.smoker == 1),
    ("non_smoker", lambda r: None if r.smoker is None else r.smoker == 0),
    ("age_lt_55", lambda r: None if r.age is None else r.age < 55),
    ("age_ge_55", lambda r: None if r.age is None else r.age >= 55),
    ("female", lambda r: None if r.sex is None else r.sex == 1),
    ("male", lambda r: None if r.sex is None else r.sex == 0),
    ("hba1c_le_48", lambda r: None if r.hba1c is None else r.hba1c <= 48),
    ("hba1c_gt_48", lambda r: None if r.hba1c is None else r.hba1c > 48),
    ("hypertension", lambda r: None if r.hypertension is None else r.hypertension == 1),
    ("no_hypertension", lambda r: None if r.hypertension is None else r.hypertension == 0),
)


def subgroup_report(
    rows,
    times,
    events,
    scores_by_model: dict[str, np.ndarray],
    thresholds_by_model: dict[str, float],
    horizon: float = DEFAULT_HORIZON_YEARS,
    quintile_cutoff: int = 2000,
    calibration_bins: int = 10,
) -> dict[str, dict]:
    """Per-subgroup discrimination/operating-point/calibration summary.

    Thresholds are the global ones, not re-derived per subgroup; subgroups
    smaller than ``quintile_cutoff`` use 5 calibration bins.  Empty or
    unclassifiable subgroups are flagged and skipped.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    report: dict[str, dict] = {}
    for name, predicate in SUBGROUP_DEFINITIONS:
        flags = [predicate(r) for r in rows]
        mask = np.array([f is True for f in flags])
        n = int(mask.sum())
        if n == 0:
            report[name] = {"n": 0, "skipped": True}
            continue
        entry: dict = {"n": n, "skipped": False, "models": {}}
        sub_outcome = BinaryOutcome.from_followup(times[mask], events[mask], horizon)
        bins = calibration_bins if n >= quintile_cutoff else 5
        for model, scores in scores_by_model.items():
            s = scores[mask]
            block: dict = {}
            try:
                block["c_statistic"] = harrell_c(s, times[mask], events[mask])
            except NumericalError:
                block["c_statistic"] = None
            try:
                conf = binary_confusion(s, thresholds_by_model[model], sub_outcome)
                block["sensitivity"] = conf.sensitivity
                block["specificity"] = conf.specificity
            except NumericalError:
                block["sensitivity"] = None
                block["specificity"] = None
            block["average_predicted_risk"] = float(s.mean())
            if n >= bins:
                table = calibration(s, times[mask], events[mask], bins=bins, horizon=horizon)
                block["calibration_slope"] = table.slope
                block["calibration_bins"] = bins
            else:
                block["calibration_slope"] = None
                block["calibration_bins"] = None
            entry["models"][model] = block
        report[name] = entry
    return report
