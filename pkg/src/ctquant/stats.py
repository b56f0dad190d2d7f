"""Agreement and classification statistics for clinical validation.

Bootstrap intervals are percentile intervals over resampled records with a
resample stream drawn from ``numpy.random.default_rng(seed)``, so results
depend only on ``(data, seed, n_boot)``.
"""

from __future__ import annotations

import csv
import enum
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats as sps

from .errors import AlignmentError, Infeasible, NoData, ValidationError

DEFAULT_N_BOOT = 10_000
_CHUNK = 1000


class CIMethod(str, enum.Enum):
    BOOTSTRAP_PERCENTILE = "BootstrapPercentile"
    CLOPPER_PEARSON = "ClopperPearson"
    FISHER_Z = "FisherZ"


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    lo: float
    hi: float
    level: float
    method: CIMethod
    flags: tuple = ()

    def to_dict(self) -> dict:
        d = {"point": self.point, "lo": self.lo, "hi": self.hi, "level": self.level, "method": self.method.value}
        if self.flags:
            d["flags"] = list(self.flags)
        return d


@dataclass(frozen=True)
class PairedRecord:
    id: str
    model_value: float
    truth_value: float
    rater_values: Optional[tuple] = None
    subgroups: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class PairedMeasurements:
    records: tuple

    def __post_init__(self):
        records = tuple(self.records)
        if not records:
            raise NoData("no paired records")
        lengths = {len(r.rater_values) for r in records if r.rater_values is not None}
        if lengths and (len(lengths) > 1 or min(lengths) < 2):
            raise ValidationError("rater_values must all have the same length >= 2")
        if lengths and any(r.rater_values is None for r in records):
            raise ValidationError("rater_values must be present for every record or none")
        object.__setattr__(self, "records", records)

    def __len__(self):
        return len(self.records)

    @property
    def model(self) -> np.ndarray:
        return np.array([r.model_value for r in self.records], dtype=float)

    @property
    def truth(self) -> np.ndarray:
        return np.array([r.truth_value for r in self.records], dtype=float)

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]

    @property
    def has_raters(self) -> bool:
        return self.records[0].rater_values is not None

    def rater_matrix(self) -> np.ndarray:
        if not self.has_raters:
            raise NoData("records carry no per-rater values")
        return np.array([r.rater_values for r in self.records], dtype=float)

    def subset(self, keep) -> "PairedMeasurements":
        return PairedMeasurements(tuple(r for r, k in zip(self.records, keep) if k))


@dataclass(frozen=True)
class Confusion:
    """2x2 table with "low bone density" (or "disease") as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValidationError(f"{name} must be a non-negative integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


# ---------------------------------------------------------------------------
# bootstrap machinery


def _percentile_interval(point, samples, level, flags=()) -> IntervalEstimate:
    samples = np.asarray(samples, dtype=float)
    samples = samples[np.isfinite(samples)]
    alpha = 1.0 - level
    lo, hi = np.percentile(samples, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    flags = tuple(flags)
    if not lo <= point <= hi:
        flags += ("point_outside_percentile_interval",)
        lo, hi = min(lo, point), max(hi, point)
    return IntervalEstimate(float(point), float(lo), float(hi), level, CIMethod.BOOTSTRAP_PERCENTILE, flags)


def bootstrap_indices(n: int, n_boot: int, seed: int):
    """Yield resample index blocks of shape ``(<=1000, n)``; the stream is fixed by the seed."""
    rng = np.random.default_rng(seed)
    done = 0
    while done < n_boot:
        size = min(_CHUNK, n_boot - done)
        yield rng.integers(0, n, size=(size, n))
        done += size


def bootstrap(statistic, data: Sequence[np.ndarray], n_boot: int = DEFAULT_N_BOOT, seed: int = 0) -> np.ndarray:
    """Evaluate a batched ``statistic`` on resamples of the first axis of each array.

    ``statistic`` receives arrays of shape ``(B, n, ...)`` and returns ``(B,)``.
    """
    arrays = [np.asarray(a, dtype=float) for a in data]
    n = arrays[0].shape[0]
    out = []
    for idx in bootstrap_indices(n, n_boot, seed):
        out.append(statistic(*(a[idx] for a in arrays)))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# agreement


def _as_pairs(pairs):
    if isinstance(pairs, PairedMeasurements):
        return pairs.model, pairs.truth
    model, truth = pairs
    model, truth = np.asarray(model, dtype=float), np.asarray(truth, dtype=float)
    if model.shape != truth.shape or model.ndim != 1:
        raise ValidationError("model and truth must be equal-length 1D sequences")
    return model, truth


def mae(pairs, n_boot: int = DEFAULT_N_BOOT, seed: int = 0, level: float = 0.95) -> IntervalEstimate:
    """Mean absolute error with a percentile-bootstrap interval over records."""
    model, truth = _as_pairs(pairs)
    if model.size == 0:
        raise NoData("no pairs for MAE")
    err = np.abs(model - truth)
    samples = bootstrap(lambda e: e.mean(axis=1), [err], n_boot, seed)
    return _percentile_interval(float(err.mean()), samples, level)


class IccForm(str, enum.Enum):
    ONE_WAY = "ICC(1,1)"
    TWO_WAY_AGREEMENT = "ICC(2,1)"
    TWO_WAY_CONSISTENCY = "ICC(3,1)"


def _icc_batch(x: np.ndarray, form: IccForm):
    """ICC for a batch ``(B, n, k)``; returns values and a degenerate-case mask."""
    b, n, k = x.shape
    grand = x.mean(axis=(1, 2), keepdims=True)
    rows = x.mean(axis=2, keepdims=True)
    cols = x.mean(axis=1, keepdims=True)
    ss_total = ((x - grand) ** 2).sum(axis=(1, 2))
    ss_rows = k * ((rows - grand) ** 2).sum(axis=(1, 2))
    ss_cols = n * ((cols - grand) ** 2).sum(axis=(1, 2))
    ss_err = np.maximum(ss_total - ss_rows - ss_cols, 0.0)
    ms_r = ss_rows / (n - 1)
    ms_c = ss_cols / (k - 1)
    ms_e = ss_err / ((n - 1) * (k - 1))
    if form is IccForm.ONE_WAY:
        ms_w = (ss_cols + ss_err) / (n * (k - 1))
        num, den = ms_r - ms_w, ms_r + (k - 1) * ms_w
    elif form is IccForm.TWO_WAY_AGREEMENT:
        num, den = ms_r - ms_e, ms_r + (k - 1) * ms_e + k * (ms_c - ms_e) / n
    else:
        num, den = ms_r - ms_e, ms_r + (k - 1) * ms_e
    scale = np.maximum(ss_total, 1e-300)
    degenerate = (ss_total <= 1e-24 * np.maximum(1.0, np.abs(grand[:, 0, 0]) ** 2)) | (np.abs(den) <= 1e-15 * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.where(degenerate, 1.0, num / np.where(degenerate, 1.0, den))
    return value, degenerate


def _check_ratings(ratings) -> np.ndarray:
    x = np.asarray(ratings, dtype=float)
    if x.ndim != 2:
        raise ValidationError("ratings must be a subjects x raters matrix")
    if x.shape[1] < 2 or x.shape[0] < 3:
        raise ValidationError(f"ICC needs >= 3 subjects and >= 2 raters, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("ratings contain non-finite values")
    return x


def icc_value(ratings, form=IccForm.TWO_WAY_AGREEMENT) -> float:
    """Point ICC (no interval)."""
    x = _check_ratings(ratings)
    value, _ = _icc_batch(x[None], IccForm(form))
    return float(value[0])


def icc(ratings, form=IccForm.TWO_WAY_AGREEMENT, n_boot: int = DEFAULT_N_BOOT, seed: int = 0,
        level: float = 0.95) -> IntervalEstimate:
    """Single-rater ICC from the two-way mean-squares decomposition.

    Zero total variance yields 1.0 by convention and a ``degenerate`` flag.
    """
    x = _check_ratings(ratings)
    form = IccForm(form)
    value, degenerate = _icc_batch(x[None], form)
    flags = ("degenerate_zero_variance",) if degenerate[0] else ()
    samples = bootstrap(lambda b: _icc_batch(b, form)[0], [x], n_boot, seed)
    return _percentile_interval(float(value[0]), samples, level, flags)


def _align(a, b, ids_a, ids_b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if ids_a is None and ids_b is None:
        if a.shape[0] != b.shape[0]:
            raise AlignmentError(f"subject counts differ: {a.shape[0]} vs {b.shape[0]}")
        if a.shape[0] == 0:
            raise AlignmentError("no subjects")
        return a, b
    if ids_a is None or ids_b is None:
        raise AlignmentError("subject ids must be given for both matrices or neither")
    pos_b = {sid: n for n, sid in enumerate(ids_b)}
    common = [(n, pos_b[sid]) for n, sid in enumerate(ids_a) if sid in pos_b]
    if not common:
        raise AlignmentError("the two rating matrices share no subjects")
    ia, ib = zip(*common)
    return a[list(ia)], b[list(ib)]


def icc_gap(ratings_raters, ratings_raters_plus_model, ids_a=None, ids_b=None,
            form=IccForm.TWO_WAY_AGREEMENT, n_boot: int = DEFAULT_N_BOOT, seed: int = 0,
            level: float = 0.95) -> IntervalEstimate:
    """``ICC(raters) - ICC(raters + model)`` with a paired subject bootstrap.

    The acceptance check used downstream is ``result.hi < 0.05``.
    """
    a, b = _align(ratings_raters, ratings_raters_plus_model, ids_a, ids_b)
    a, b = _check_ratings(a), _check_ratings(b)
    form = IccForm(form)
    point = _icc_batch(a[None], form)[0][0] - _icc_batch(b[None], form)[0][0]
    samples = bootstrap(lambda xa, xb: _icc_batch(xa, form)[0] - _icc_batch(xb, form)[0], [a, b], n_boot, seed)
    return _percentile_interval(float(point), samples, level)


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: float
    sd_diff: float
    loa_lo: float
    loa_hi: float
    n: int
    limit: float
    within_limit_fraction: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bland_altman(pairs, limit: float = 5.0) -> BlandAltman:
    """Bias and 95% limits of agreement of ``truth - model``."""
    model, truth = _as_pairs(pairs)
    if model.size < 2:
        raise NoData("Bland-Altman needs at least two pairs")
    diff = truth - model
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    return BlandAltman(
        mean_diff=mean,
        sd_diff=sd,
        loa_lo=mean - 1.96 * sd,
        loa_hi=mean + 1.96 * sd,
        n=int(diff.size),
        limit=float(limit),
        within_limit_fraction=float(np.mean(np.abs(diff) <= limit)),
    )


def pearson(pairs, level: float = 0.95) -> IntervalEstimate:
    """Sample correlation with a Fisher-z interval."""
    x, y = _as_pairs(pairs)
    n = x.size
    if n < 2:
        raise NoData("correlation needs at least two pairs")
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        raise ValidationError("correlation undefined for a constant variable")
    r = float(np.clip((dx @ dy) / denom, -1.0, 1.0))
    if n <= 3:
        return IntervalEstimate(r, -1.0, 1.0, level, CIMethod.FISHER_Z, ("interval_undefined_n_le_3",))
    if abs(r) == 1.0:
        return IntervalEstimate(r, r, r, level, CIMethod.FISHER_Z)
    z = math.atanh(r)
    half = sps.norm.ppf(1 - (1 - level) / 2) / math.sqrt(n - 3)
    return IntervalEstimate(r, math.tanh(z - half), math.tanh(z + half), level, CIMethod.FISHER_Z)


# ---------------------------------------------------------------------------
# classification


def clopper_pearson(successes: int, trials: int, level: float = 0.95) -> IntervalEstimate:
    """Exact binomial interval from beta quantiles."""
    if trials <= 0:
        raise NoData("no trials")
    if not 0 <= successes <= trials:
        raise ValidationError(f"successes {successes} outside 0..{trials}")
    alpha = 1.0 - level
    lo = 0.0 if successes == 0 else float(sps.beta.ppf(alpha / 2, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(sps.beta.ppf(1 - alpha / 2, successes + 1, trials - successes))
    return IntervalEstimate(successes / trials, lo, hi, level, CIMethod.CLOPPER_PEARSON)


@dataclass(frozen=True)
class BinaryMetrics:
    sens: Optional[IntervalEstimate]
    spec: Optional[IntervalEstimate]
    ppv: Optional[IntervalEstimate]
    npv: Optional[IntervalEstimate]
    flags: tuple = ()

    def to_dict(self) -> dict:
        d = {name: (getattr(self, name).to_dict() if getattr(self, name) else None)
             for name in ("sens", "spec", "ppv", "npv")}
        d["flags"] = list(self.flags)
        return d


def binary_metrics(c: Confusion, level: float = 0.95) -> BinaryMetrics:
    """Sensitivity, specificity, PPV and NPV with Clopper-Pearson intervals."""
    parts = {
        "sens": (c.tp, c.tp + c.fn),
        "spec": (c.tn, c.tn + c.fp),
        "ppv": (c.tp, c.tp + c.fp),
        "npv": (c.tn, c.tn + c.fn),
    }
    out, flags = {}, []
    for name, (x, n) in parts.items():
        if n == 0:
            out[name] = None
            flags.append(f"{name}_undefined_zero_denominator")
        else:
            out[name] = clopper_pearson(x, n, level)
    return BinaryMetrics(flags=tuple(flags), **out)


def _mann_whitney_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    ranks = sps.rankdata(scores)  # average ranks for ties
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = labels.size - n1
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def auroc(scores, labels, n_boot: int = DEFAULT_N_BOOT, seed: int = 0, level: float = 0.95) -> IntervalEstimate:
    """Mann-Whitney AUROC (ties count one half) with a stratified bootstrap interval."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be equal-length 1D sequences")
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("labels must be 0/1")
    y = y.astype(int)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise NoData("AUROC needs both positive and negative cases")
    point = _mann_whitney_auc(s, y)
    rng = np.random.default_rng(seed)
    n1, n0 = pos.size, neg.size
    samples = []
    done = 0
    while done < n_boot:
        size = min(_CHUNK, n_boot - done)
        block = np.concatenate([pos[rng.integers(0, n1, (size, n1))], neg[rng.integers(0, n0, (size, n0))]], axis=1)
        ranks = sps.rankdata(block, axis=1)
        samples.append((ranks[:, :n1].sum(axis=1) - n1 * (n1 + 1) / 2.0) / (n1 * n0))
        done += size
    return _percentile_interval(point, np.concatenate(samples), level)


# ---------------------------------------------------------------------------
# tests and sample size


def mae_permutation_test(errors_a, errors_b, n_perm: int = 9999, seed: int = 0) -> float:
    """Two-sided permutation p-value for a difference in mean absolute error.

    When the number of distinct group assignments does not exceed ``n_perm``
    the test is exact (all assignments enumerated, observed one included);
    otherwise ``p = (#{|d*| >= |d|} + 1) / (n_perm + 1)``.
    """
    a = np.abs(np.asarray(errors_a, dtype=float))
    b = np.abs(np.asarray(errors_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise NoData("both groups need at least one error value")
    pooled = np.concatenate([a, b])
    n, na = pooled.size, a.size
    total = pooled.sum()
    observed = abs(a.mean() - b.mean())
    tol = 1e-12 * max(1.0, observed)

    def diffs(sum_a):
        return np.abs(sum_a / na - (total - sum_a) / (n - na))

    if math.comb(n, na) <= n_perm:
        sums = np.array([pooled[list(c)].sum() for c in itertools.combinations(range(n), na)])
        return float(np.mean(diffs(sums) >= observed - tol))
    rng = np.random.default_rng(seed)
    count = 0
    done = 0
    while done < n_perm:
        size = min(_CHUNK, n_perm - done)
        perm = np.argsort(rng.random((size, n)), axis=1)[:, :na]
        count += int(np.sum(diffs(pooled[perm].sum(axis=1)) >= observed - tol))
        done += size
    return (count + 1) / (n_perm + 1)


def sample_size_mae(pilot_mean: float, pilot_sd: float, bound: float, level: float = 0.95,
                    n_max: int = 1_000_000) -> int:
    """Smallest n with ``mean + t(n-1) * sd / sqrt(n) <= bound`` (ascending search from 2)."""
    if bound <= pilot_mean:
        raise Infeasible(f"bound {bound} does not exceed the pilot mean {pilot_mean}")
    q = 1 - (1 - level) / 2
    for n in range(2, n_max + 1):
        if pilot_mean + sps.t.ppf(q, n - 1) * pilot_sd / math.sqrt(n) <= bound:
            return n
    raise Infeasible(f"no n <= {n_max} satisfies the bound")


def sample_size_proportion(expected: float, lower_bound: float, level: float = 0.95,
                           n_max: int = 100_000) -> int:
    """Smallest n whose Clopper-Pearson lower limit at ``round(expected * n)`` clears ``lower_bound``."""
    if not 0 < lower_bound < expected < 1:
        raise Infeasible("need 0 < lower_bound < expected < 1")
    for n in range(1, n_max + 1):
        if clopper_pearson(int(round(expected * n)), n, level).lo > lower_bound:
            return n
    raise Infeasible(f"no n <= {n_max} satisfies the bound")


# ---------------------------------------------------------------------------
# subgroup tables


@dataclass(frozen=True)
class ConfusionRow:
    key: str
    group: str
    confusion: Confusion


SUBGROUP_TEST = "two-sided permutation test on difference in MAE vs. complement"


def _pairs_row(group, pairs: PairedMeasurements, n_boot, seed, level):
    row = {"group": group, "count": len(pairs), "mae": mae(pairs, n_boot, seed, level).to_dict(),
           "rr_icc": None, "rm_icc": None, "icc_diff": None}
    if pairs.has_raters and len(pairs) >= 3:
        raters = pairs.rater_matrix()
        with_model = np.column_stack([raters, pairs.model])
        row["rr_icc"] = icc_value(raters)
        row["rm_icc"] = icc_value(with_model)
        row["icc_diff"] = icc_gap(raters, with_model, n_boot=n_boot, seed=seed, level=level).to_dict()
    return row


def _confusion_row(group, c: Confusion, level, threshold):
    m = binary_metrics(c, level)
    return {
        "group": group,
        "count": c.total,
        "sens": m.sens.to_dict() if m.sens else None,
        "spec": m.spec.to_dict() if m.spec else None,
        "sens_below_threshold": bool(m.sens and m.sens.point < threshold),
        "spec_below_threshold": bool(m.spec and m.spec.point < threshold),
        "flags": list(m.flags),
    }


def subgroup_report(data, key: str, *, n_boot: int = DEFAULT_N_BOOT, seed: int = 0, n_perm: int = 9999,
                    level: float = 0.95, threshold: float = 0.70) -> list:
    """Per-group metric rows for one subgroup key.

    ``data`` is either :class:`PairedMeasurements` (MAE/ICC rows plus a
    permutation p-value against the complement) or a sequence of
    :class:`ConfusionRow` (sensitivity/specificity rows).
    """
    if isinstance(data, PairedMeasurements):
        groups = sorted({r.subgroups.get(key) for r in data.records if r.subgroups.get(key) is not None})
        if not groups:
            raise NoData(f"no records carry subgroup key {key!r}")
        rows = []
        err = np.abs(data.model - data.truth)
        for g in groups:
            keep = np.array([r.subgroups.get(key) == g for r in data.records])
            row = _pairs_row(g, data.subset(keep), n_boot, seed, level)
            row["key"] = key
            if len(groups) > 1 and (~keep).any():
                row["p_value"] = mae_permutation_test(err[keep], err[~keep], n_perm, seed)
                row["test"] = SUBGROUP_TEST
            else:
                row["p_value"] = None
            rows.append(row)
        return rows
    rows = []
    for item in data:
        if item.key == key:
            row = _confusion_row(item.group, item.confusion, level, threshold)
            row["key"] = key
            rows.append(row)
    if not rows:
        raise NoData(f"no confusion tables for subgroup key {key!r}")
    return rows


def confusion_from_records(model_hu, truth_t, hu_threshold: float = 300.0, t_threshold: float = -1.0) -> Confusion:
    """Positive = low density: model HU below threshold, truth T-score at or below threshold."""
    pred = np.asarray(model_hu, dtype=float) < hu_threshold
    true = np.asarray(truth_t, dtype=float) <= t_threshold
    return Confusion(
        tp=int(np.sum(pred & true)),
        fp=int(np.sum(pred & ~true)),
        fn=int(np.sum(~pred & true)),
        tn=int(np.sum(~pred & ~true)),
    )


# ---------------------------------------------------------------------------
# CSV inputs


def read_pairs_csv(path) -> PairedMeasurements:
    """Read ``id,model,truth,rater1..raterK,<subgroup columns>``.

    An empty ``truth`` cell falls back to the mean of the rater values.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "model" not in fields or ("truth" not in fields and not any(f.startswith("rater") for f in fields)):
            raise ValidationError(f"{path}: need columns 'model' and 'truth' (or rater1..raterK)")
        rater_cols = sorted((f for f in fields if f.startswith("rater") and f[5:].isdigit()), key=lambda f: int(f[5:]))
        sub_cols = [f for f in fields if f not in {"id", "model", "truth", *rater_cols}]
        records = []
        for n, row in enumerate(reader):
            raters = tuple(float(row[c]) for c in rater_cols) if rater_cols else None
            truth_cell = (row.get("truth") or "").strip()
            if truth_cell:
                truth = float(truth_cell)
            elif raters:
                truth = float(np.mean(raters))
            else:
                raise ValidationError(f"{path}: row {n + 2} has no truth value")
            subgroups = {c: row[c].strip() for c in sub_cols if row.get(c) not in (None, "")}
            records.append(PairedRecord(row.get("id") or str(n), float(row["model"]), truth, raters, subgroups))
    return PairedMeasurements(tuple(records))


def read_confusion_csv(path) -> list:
    """Read ``key,group,tp,fp,fn,tn`` rows."""
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"key", "group", "tp", "fp", "fn", "tn"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            out.append(ConfusionRow(row["key"].strip(), row["group"].strip(),
                                    Confusion(*(int(row[c]) for c in ("tp", "fp", "fn", "tn")))))
    if not out:
        raise NoData(f"{path}: no confusion rows")
    return out
