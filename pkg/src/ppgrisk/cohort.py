"""Cohort data model, ingestion, filtering, splitting and synthesis.

The synthetic generator draws covariates from fixed documented
distributions, shapes each subject's pulse through a latent "vascular age",
and samples event times from an exponential-baseline proportional-hazards
model, so downstream fits can be checked against known truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ValidationError
from .rng import derive_seed, keyed_rng
from .waveform import CANONICAL_LENGTH, synth_pulse

DAYS_PER_YEAR = 365.25

COHORT_CSV_COLUMNS = [
    "subject_id",
    "site",
    "age",
    "sex",
    "smoker",
    "height",
    "bmi",
    "sbp",
    "total_cholesterol",
    "glucose",
    "hba1c",
    "hypertension",
    "prior_mi_or_stroke",
    "followup_days",
    "event",
    "ppg_hr",
]

SPLITS = ("train", "tune", "test")


@dataclass
class CohortRow:
    """One participant at baseline.

    ``sex`` is a female flag and ``smoker`` an ever-smoker flag.  ``event``
    marks a MACE at ``followup_days``; otherwise that is the censoring
    time.  Optional fields are None when unrecorded.
    """

    subject_id: str
    site: str
    followup_days: float
    event: bool
    age: float | None = None
    sex: int | None = None
    smoker: int | None = None
    height: float | None = None
    bmi: float | None = None
    sbp: float | None = None
    total_cholesterol: float | None = None
    glucose: float | None = None
    hba1c: float | None = None
    hypertension: int | None = None
    prior_mi_or_stroke: int | None = None
    ppg_hr: float | None = None
    ppg_ref: str | None = None

    def __post_init__(self):
        if self.followup_days < 0:
            raise ValidationError(
                f"subject {self.subject_id}: followup_days must be >= 0"
            )
        for name in ("age", "bmi", "sbp"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValidationError(
                    f"subject {self.subject_id}: {name} must be positive when present"
                )


@dataclass(frozen=True)
class SplitAssignment:
    """Total map from site name to one of train/tune/test."""

    sites: dict[str, str]

    def __post_init__(self):
        for site, split in self.sites.items():
            if split not in SPLITS:
                raise ValidationError(f"site {site!r} mapped to unknown split {split!r}")

    def split_of(self, site: str) -> str:
        if site not in self.sites:
            raise ValidationError(f"unknown site {site}")
        return self.sites[site]


# --- CSV ingestion ----------------------------------------------------------

_FLOAT_FIELDS = {
    "age",
    "height",
    "bmi",
    "sbp",
    "total_cholesterol",
    "glucose",
    "hba1c",
    "ppg_hr",
    "followup_days",
}
_BINARY_FIELDS = {"sex", "smoker", "hypertension", "prior_mi_or_stroke", "event"}
_REQUIRED_CELLS = {"subject_id", "site", "followup_days", "event"}


def _parse_cell(name: str, raw: str, row_number: int):
    text = raw.strip()
    if text in ("", "NA"):
        if name in _REQUIRED_CELLS:
            raise ValidationError(f"row {row_number}, column {name!r}: value required")
        return None
    if name in _FLOAT_FIELDS:
        try:
            return float(text)
        except ValueError:
            raise ValidationError(
                f"row {row_number}, column {name!r}: cannot parse {text!r} as a number"
            ) from None
    if name in _BINARY_FIELDS:
        if text in ("0", "1"):
            return int(text)
        raise ValidationError(
            f"row {row_number}, column {name!r}: expected 0/1, got {text!r}"
        )
    return text


def load_cohort(path, schema: dict[str, str] | None = None) -> list[CohortRow]:
    """Read a cohort CSV into rows, preserving order.

    ``schema`` optionally maps row field names to CSV column names; by
    default columns are expected under their canonical names.  Empty or
    "NA" cells leave optional fields unset.
    """
    colmap = {name: name for name in COHORT_CSV_COLUMNS}
    if schema:
        colmap.update(schema)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: missing header row")
        missing = [colmap[f] for f in COHORT_CSV_COLUMNS if colmap[f] not in reader.fieldnames]
        if missing:
            raise ValidationError(f"{path}: missing mandatory column(s) {missing}")
        rows: list[CohortRow] = []
        seen: set[str] = set()
        for row_number, record in enumerate(reader, start=1):
            values = {
                name: _parse_cell(name, record[colmap[name]] or "", row_number)
                for name in COHORT_CSV_COLUMNS
            }
            sid = values["subject_id"]
            if sid in seen:
                raise ValidationError(f"row {row_number}: duplicate subject_id {sid!r}")
            seen.add(sid)
            values["event"] = bool(values["event"])
            rows.append(CohortRow(**values))
    return rows


def _fmt_cell(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_cohort_csv(path, rows: list[CohortRow]) -> None:
    lines = [",".join(COHORT_CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt_cell(getattr(row, c)) for c in COHORT_CSV_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# --- waveform store ---------------------------------------------------------


def write_waveform_store(path, waveforms: dict[str, np.ndarray]) -> None:
    """One line per subject: ``subject_id,s_0,...,s_{L-1}``; L on line one."""
    lengths = {len(w) for w in waveforms.values()}
    if len(lengths) > 1:
        raise ValidationError(f"waveforms have mixed lengths {sorted(lengths)}")
    length = lengths.pop() if lengths else CANONICAL_LENGTH
    with open(path, "w") as fh:
        fh.write(f"#length={length}\n")
        for sid in waveforms:
            samples = ",".join(repr(float(x)) for x in waveforms[sid])
            fh.write(f"{sid},{samples}\n")


def load_waveform_store(path) -> dict[str, np.ndarray]:
    waveforms: dict[str, np.ndarray] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#length="):
            raise ValidationError(f"{path}: first line must declare #length=L")
        length = int(header.split("=", 1)[1])
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            sid, _, rest = line.partition(",")
            samples = np.array(rest.split(","), dtype=float)
            if samples.size != length:
                raise ValidationError(
                    f"{path} line {lineno}: expected {length} samples, got {samples.size}"
                )
            waveforms[sid] = samples
    return waveforms


# --- inclusion / exclusion --------------------------------------------------

EXCLUSION_REASONS = ("age", "prior_event", "missing_demographics", "missing_bmi_sbp")


def apply_inclusion(rows: list[CohortRow]) -> tuple[list[CohortRow], dict[str, int]]:
    """Filter to the analysis cohort; count exclusions by first matching rule.

    Rules, in order: age outside [40, 74]; prior MI/stroke; missing any of
    age/sex/smoker; missing BMI or SBP.  Idempotent.
    """
    kept: list[CohortRow] = []
    log = {reason: 0 for reason in EXCLUSION_REASONS}
    for row in rows:
        if row.age is not None and not 40 <= row.age <= 74:
            log["age"] += 1
        elif row.prior_mi_or_stroke:
            log["prior_event"] += 1
        elif row.age is None or row.sex is None or row.smoker is None:
            log["missing_demographics"] += 1
        elif row.bmi is None or row.sbp is None:
            log["missing_bmi_sbp"] += 1
        else:
            kept.append(row)
    return kept, log


def split_by_site(
    rows: list[CohortRow], assignment: SplitAssignment
) -> tuple[list[CohortRow], list[CohortRow], list[CohortRow]]:
    """Partition rows into (train, tune, test) by their site, order preserved."""
    buckets: dict[str, list[CohortRow]] = {name: [] for name in SPLITS}
    for row in rows:
        buckets[assignment.split_of(row.site)].append(row)
    return buckets["train"], buckets["tune"], buckets["test"]


# --- composite outcome ------------------------------------------------------

MACE_SOURCES = ("mi", "stroke", "cvd_death")


def build_mace_outcome(
    event_records: list[tuple[str, str, float]],
    subjects: list[str] | None = None,
) -> dict[str, tuple[float | None, bool]]:
    """Collapse per-source event records to (earliest day, event flag).

    Records are ``(subject_id, source, days_since_baseline)`` with source
    one of mi/stroke/cvd_death.  Subjects listed in ``subjects`` but absent
    from the records come back as ``(None, False)``.
    """
    earliest: dict[str, float] = {}
    for sid, source, day in event_records:
        if source not in MACE_SOURCES:
            raise ValidationError(f"subject {sid}: unknown event source {source!r}")
        if day < 0:
            raise ValidationError(
                f"subject {sid}: event at day {day} precedes the baseline visit"
            )
        if sid not in earliest or day < earliest[sid]:
            earliest[sid] = day
    out: dict[str, tuple[float | None, bool]] = {
        sid: (day, True) for sid, day in earliest.items()
    }
    if subjects is not None:
        for sid in subjects:
            if sid not in out:
                out[sid] = (None, False)
    return out


# --- synthetic cohort -------------------------------------------------------

# Documented generator distributions: continuous covariates are sampled
# from these (mean, sd), binary flags from the Bernoulli rates below, and
# the truth linear predictor standardizes continuous covariates with the
# same theoretical moments (age is uniform on [40, 74], hence sd 34/sqrt(12)).
COVARIATE_MOMENTS = {
    "age": (57.0, 34.0 / math.sqrt(12.0)),
    "bmi": (27.0, 4.0),
    "sbp": (137.0, 18.0),
    "height": (168.0, 9.0),
    "total_cholesterol": (5.7, 1.1),
    "glucose": (5.1, 1.0),
    "hba1c": (35.5, 6.0),
    "ppg_hr": (70.0, 10.0),
}
BINARY_RATES = {"sex": 0.5, "smoker": 0.4}

# Latent vascular age: weighted sum of standardized covariates plus a unit
# Gaussian component u that only the waveform carries.  A "vascular"
# coefficient in the truth vector multiplies u.
DEFAULT_LATENT_WEIGHTS = {"age": 0.5, "smoker": 0.2, "sbp": 0.3}

TRUTH_COVARIATES = tuple(COVARIATE_MOMENTS) + tuple(BINARY_RATES) + (
    "hypertension",
    "vascular",
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a reproducible synthetic cohort with known hazard truth."""

    n_subjects: int
    true_coefficients: dict[str, float]
    baseline_rate: float  # events per year under eta = 0
    censor_horizon: float  # years of administrative follow-up
    censor_rate: float  # per-year uniform-censoring intensity
    seed: int
    n_sites: int = 4
    waveform_length: int = CANONICAL_LENGTH
    waveform_noise: float = 0.02
    latent_weights: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_LATENT_WEIGHTS)
    )
    include_waveforms: bool = True

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValidationError("n_subjects must be >= 1")
        if self.baseline_rate <= 0:
            raise ValidationError("baseline_rate must be > 0")
        if self.censor_horizon <= 0:
            raise ValidationError("censor_horizon must be > 0")
        unknown = set(self.true_coefficients) - set(TRUTH_COVARIATES)
        if unknown:
            raise ValidationError(f"unknown truth coefficient(s): {sorted(unknown)}")


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth recorded alongside a generated cohort."""

    coefficients: dict[str, float]
    baseline_rate: float
    eta: dict[str, float]  # per-subject linear predictor (includes latent term)

    def risk_at(self, subject_id: str, horizon_years: float) -> float:
        cumhaz = self.baseline_rate * horizon_years * math.exp(self.eta[subject_id])
        return 1.0 - math.exp(-cumhaz)


def standardized_value(name: str, value: float) -> float:
    """Generator-side standardization: continuous scaled, binary raw."""
    if name in COVARIATE_MOMENTS:
        mean, sd = COVARIATE_MOMENTS[name]
        return (value - mean) / sd
    return float(value)


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[list[CohortRow], dict[str, np.ndarray], SyntheticTruth]:
    """Draw a cohort with proportional-hazards event times and known truth.

    Event times come from inverse-transform sampling of the exponential
    baseline: T = -ln(U) / (baseline_rate * exp(eta)).  Censoring is the
    minimum of the administrative horizon and an exponential clock.  Every
    subject's randomness is independently keyed, so generation is
    order-independent and bit-reproducible for a fixed seed.
    """
    rows: list[CohortRow] = []
    waveforms: dict[str, np.ndarray] = {}
    etas: dict[str, float] = {}
    beta = spec.true_coefficients
    width = len(str(max(spec.n_subjects - 1, 1)))

    for i in range(spec.n_subjects):
        sid = f"s{i:0{width}d}"
        rng = keyed_rng(spec.seed, "subject", i)
        cov = {
            "age": rng.uniform(40.0, 74.0),
            "sex": int(rng.uniform() < BINARY_RATES["sex"]),
            "smoker": int(rng.uniform() < BINARY_RATES["smoker"]),
            "bmi": max(rng.normal(*COVARIATE_MOMENTS["bmi"]), 1e-6),
            "sbp": max(rng.normal(*COVARIATE_MOMENTS["sbp"]), 1e-6),
            "height": max(rng.normal(*COVARIATE_MOMENTS["height"]), 1e-6),
            "total_cholesterol": rng.normal(*COVARIATE_MOMENTS["total_cholesterol"]),
            "glucose": rng.normal(*COVARIATE_MOMENTS["glucose"]),
            "hba1c": rng.normal(*COVARIATE_MOMENTS["hba1c"]),
            "ppg_hr": max(rng.normal(*COVARIATE_MOMENTS["ppg_hr"]), 1e-6),
        }
        p_htn = 1.0 / (1.0 + math.exp(-(cov["sbp"] - 145.0) / 12.0))
        cov["hypertension"] = int(rng.uniform() < p_htn)

        u_vascular = rng.normal()
        latent = u_vascular + sum(
            w * standardized_value(name, cov[name])
            for name, w in spec.latent_weights.items()
        )

        eta = sum(
            b * (u_vascular if name == "vascular" else standardized_value(name, cov[name]))
            for name, b in beta.items()
        )
        etas[sid] = eta

        u_event = rng.uniform()
        t_event = -math.log(u_event) / (spec.baseline_rate * math.exp(eta))
        if spec.censor_rate > 0:
            t_censor = min(spec.censor_horizon, rng.exponential(1.0 / spec.censor_rate))
        else:
            t_censor = spec.censor_horizon
        event = t_event <= t_censor
        followup_years = min(t_event, t_censor)

        if spec.include_waveforms:
            waveforms[sid] = synth_pulse(
                latent,
                length=spec.waveform_length,
                seed=derive_seed(spec.seed, "pulse", i),
                noise=spec.waveform_noise,
            ).samples

        rows.append(
            CohortRow(
                subject_id=sid,
                site=f"site{i % spec.n_sites:02d}",
                followup_days=followup_years * DAYS_PER_YEAR,
                event=event,
                age=cov["age"],
                sex=cov["sex"],
                smoker=cov["smoker"],
                height=cov["height"],
                bmi=cov["bmi"],
                sbp=cov["sbp"],
                total_cholesterol=cov["total_cholesterol"],
                glucose=cov["glucose"],
                hba1c=cov["hba1c"],
                hypertension=cov["hypertension"],
                prior_mi_or_stroke=0,
                ppg_hr=cov["ppg_hr"],
                ppg_ref=sid if spec.include_waveforms else None,
            )
        )

    truth = SyntheticTruth(
        coefficients=dict(beta), baseline_rate=spec.baseline_rate, eta=etas
    )
    return rows, waveforms, truth


def rows_to_arrays(rows: list[CohortRow]) -> dict[str, np.ndarray]:
    """Column arrays (followup in years) for the numeric row fields."""
    out: dict[str, np.ndarray] = {}
    for f in fields(CohortRow):
        if f.name in ("subject_id", "site", "ppg_ref"):
            continue
        col = [getattr(r, f.name) for r in rows]
        out[f.name] = np.array(
            [np.nan if v is None else float(v) for v in col], dtype=float
        )
    out["followup_years"] = out["followup_days"] / DAYS_PER_YEAR
    return out
