"""Multiplicative calendar/weather model of citywide usage.

Usage is modeled as

    count ~ baseline * f(slot, day type) * g(week) * h(holiday) * l(rain)

and fitted as a linear model on ``log(count + offset)`` with every variable
treated as a factor under treatment coding. The reference level of each
group is its first observed level: working-day slot 0, week 1, non-holiday
and Low rain on a full year, which then has 343 free parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd
from scipy import linalg, sparse, stats

from .ingest import RAIN_LABELS
from .panel import DAY_TYPES, MAX_WEEK, WEEKEND, CalendarContext, UsagePanel

logger = logging.getLogger(__name__)

#: Free parameters of a full-year design (intercept + 287 + 52 + 1 + 2).
FULL_YEAR_PARAMETERS = 343

GROUP_ORDER = ("time_daytype", "week", "week_daytype", "holiday", "rain")


class TemporalModelError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalDesign:
    matrix: sparse.csr_matrix
    response: np.ndarray
    columns: tuple[tuple[str, object], ...]
    levels: dict[str, tuple]
    offset: float
    slots_per_day: int
    bin_start: pd.DatetimeIndex

    @property
    def n_bins(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_parameters(self) -> int:
        return self.matrix.shape[1]

    @property
    def degrees_of_freedom(self) -> int:
        return self.n_bins - self.n_parameters

    def group_columns(self, group: str) -> np.ndarray:
        return np.array([i for i, (g, _) in enumerate(self.columns) if g == group], dtype=int)


@dataclass(frozen=True)
class TemporalModelFit:
    """Fitted multipliers and diagnostics.

    ``f_hat`` is indexed ``[day_type, slot]``, ``g_hat`` by ``week - 1`` and
    ``l_hat`` by rain level code; levels absent from the training data are
    NaN. Reference levels are exactly 1 and ``baseline`` is
    ``exp(intercept)``.
    """

    columns: tuple[tuple[str, object], ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    baseline: float
    f_hat: np.ndarray
    g_hat: np.ndarray
    h_hat: float
    l_hat: np.ndarray
    interaction: dict[int, float]
    r_squared: float
    variance_decomposition: dict[str, float]
    residuals: np.ndarray
    degrees_of_freedom: int
    sigma: float
    offset: float
    slots_per_day: int
    n_bins: int

    @property
    def n_parameters(self) -> int:
        return len(self.coefficients)


@dataclass(frozen=True)
class DailyProfile:
    day_type: str
    values: np.ndarray
    normalization: str = "raw"


def build_design(
    panel: UsagePanel,
    ctx: CalendarContext,
    offset: float = 1.0,
    week_daytype_interaction: bool = False,
) -> TemporalDesign:
    """Indicator design for the log-linear model on a citywide panel.

    Parameters
    ----------
    panel : UsagePanel
        Single-column (citywide) panel.
    ctx : CalendarContext
        Calendar features for the same bins.
    offset : float
        Added to counts before the logarithm. ``offset=0`` requires strictly
        positive counts.
    week_daytype_interaction : bool
        Add week x weekend columns, to test whether the day-type profile
        drifts across the year.
    """
    if panel.counts.shape[1] != 1:
        raise TemporalModelError("temporal design expects a single-column (citywide) panel")
    if len(ctx) != panel.n_bins or not ctx.bin_start.equals(panel.bin_start):
        raise TemporalModelError("panel and calendar context are not aligned bin-for-bin")
    counts = panel.counts[:, 0].astype(float)
    if offset <= 0 and np.any(counts <= 0):
        raise TemporalModelError("zero counts need a positive log offset")
    n = panel.n_bins
    spd = ctx.slots_per_day

    columns: list[tuple[str, object]] = [("intercept", None)]
    rows, cols = [np.arange(n)], [np.zeros(n, dtype=np.int64)]
    levels: dict[str, tuple] = {}

    def add_indicator(group: str, level, hit: np.ndarray) -> None:
        columns.append((group, level))
        rows.append(np.flatnonzero(hit))
        cols.append(np.full(int(hit.sum()), len(columns) - 1))

    def add_factor(group: str, codes: np.ndarray, label) -> None:
        present = np.unique(codes)
        levels[group] = tuple(label(c) for c in present)
        if present.size < 2:
            return
        first = len(columns)
        columns.extend((group, label(c)) for c in present[1:])
        pos = np.searchsorted(present, codes)
        hit = pos > 0
        rows.append(np.flatnonzero(hit))
        cols.append(first + pos[hit] - 1)

    f_code = ctx.day_type.astype(np.int64) * spd + ctx.time_of_day.astype(np.int64)
    add_factor("time_daytype", f_code, lambda c: (DAY_TYPES[c // spd], int(c % spd)))
    add_factor("week", ctx.week_index.astype(np.int64), int)

    if week_daytype_interaction:
        weeks = ctx.week_index
        ref_week = weeks.min()
        for w in np.unique(weeks):
            in_week = weeks == w
            hit = in_week & (ctx.day_type == WEEKEND)
            # skip empty or week-identical columns
            if w == ref_week or not hit.any() or hit.sum() == in_week.sum():
                continue
            add_indicator("week_daytype", int(w), hit)

    levels["holiday"] = tuple(bool(v) for v in np.unique(ctx.holiday))
    if ctx.holiday.any() and not ctx.holiday.all():
        add_indicator("holiday", True, ctx.holiday)
    add_factor("rain", ctx.rain_level.astype(np.int64), lambda c: RAIN_LABELS[c])

    r, c = np.concatenate(rows), np.concatenate(cols)
    matrix = sparse.csr_matrix((np.ones(r.size), (r, c)), shape=(n, len(columns)))
    design = TemporalDesign(matrix, np.log(counts + offset), tuple(columns), levels,
                            float(offset), spd, panel.bin_start)
    if (spd == 144 and not week_daytype_interaction
            and len(levels["time_daytype"]) == 2 * spd and len(levels["week"]) == MAX_WEEK
            and len(levels["rain"]) == len(RAIN_LABELS) and len(levels["holiday"]) == 2
            and design.n_parameters != FULL_YEAR_PARAMETERS):
        raise TemporalModelError(
            f"full-year design has {design.n_parameters} parameters, expected {FULL_YEAR_PARAMETERS}"
        )
    return design


def _scaled_gram(x: sparse.spmatrix) -> tuple[np.ndarray, np.ndarray]:
    gram = (x.T @ x).toarray()
    scale = np.sqrt(np.diag(gram))
    if np.any(scale == 0):
        raise TemporalModelError("design has an empty column")
    return gram / np.outer(scale, scale), scale


def _check_rank(gram_s: np.ndarray, columns) -> None:
    _, r, piv = linalg.qr(gram_s, pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    if rank < len(columns):
        bad = [columns[i] for i in piv[rank:]]
        raise TemporalModelError(
            f"design is rank deficient ({rank} < {len(columns)}); collinear columns: {bad}"
        )


def _solve(x, y: np.ndarray, gram_s: np.ndarray, scale: np.ndarray):
    cho = linalg.cho_factor(gram_s)
    beta = linalg.cho_solve(cho, (x.T @ y) / scale) / scale
    # one step of iterative refinement
    beta += linalg.cho_solve(cho, (x.T @ (y - x @ beta)) / scale) / scale
    return beta, cho


def fit(design: TemporalDesign) -> TemporalModelFit:
    """Least-squares fit on the log scale.

    Raises :class:`TemporalModelError` naming the collinear columns when the
    design is rank deficient.
    """
    x, y = design.matrix, design.response
    gram_s, scale = _scaled_gram(x)
    _check_rank(gram_s, design.columns)
    beta, cho = _solve(x, y, gram_s, scale)
    resid = y - x @ beta
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    df = design.degrees_of_freedom
    sigma = float(np.sqrt(rss / df)) if df > 0 else float("nan")

    inv_diag = np.diag(linalg.cho_solve(cho, np.eye(len(beta)))) / scale**2
    se = sigma * np.sqrt(inv_diag)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = beta / se
    p = 2.0 * stats.t.sf(np.abs(t), df) if df > 0 else np.full_like(beta, np.nan)

    baseline, f_hat, g_hat, h_hat, l_hat, inter = _multipliers(design, beta)
    return TemporalModelFit(
        columns=design.columns, coefficients=beta, std_errors=se, t_values=t, p_values=p,
        baseline=baseline, f_hat=f_hat, g_hat=g_hat, h_hat=h_hat, l_hat=l_hat,
        interaction=inter, r_squared=float(np.clip(r2, 0.0, 1.0)),
        variance_decomposition=_sequential_shares(design, tss),
        residuals=resid, degrees_of_freedom=df, sigma=sigma, offset=design.offset,
        slots_per_day=design.slots_per_day, n_bins=design.n_bins,
    )


def _sequential_shares(design: TemporalDesign, tss: float) -> dict[str, float]:
    """Type-I sums of squares per group as shares of the total sum of squares."""
    x = design.matrix.tocsc()
    y = design.response
    shares: dict[str, float] = {}
    prev_rss = tss
    selected = [0]
    for group in GROUP_ORDER:
        idx = design.group_columns(group)
        if idx.size == 0:
            continue
        selected.extend(idx.tolist())
        sub = x[:, selected]
        gram_s, scale = _scaled_gram(sub)
        beta, _ = _solve(sub, y, gram_s, scale)
        resid = y - sub @ beta
        rss = float(resid @ resid)
        shares[group] = float(np.clip((prev_rss - rss) / tss, 0.0, 1.0)) if tss > 0 else 0.0
        prev_rss = rss
    return shares


def _multipliers(design: TemporalDesign, beta: np.ndarray):
    spd = design.slots_per_day
    f_log = np.full((2, spd), np.nan)
    g_log = np.full(MAX_WEEK, np.nan)
    l_log = np.full(len(RAIN_LABELS), np.nan)
    for d, s in design.levels["time_daytype"]:
        f_log[DAY_TYPES.index(d), s] = 0.0
    for w in design.levels["week"]:
        g_log[w - 1] = 0.0
    for label in design.levels["rain"]:
        l_log[RAIN_LABELS.index(label)] = 0.0
    h_log = 0.0 if True in design.levels["holiday"] else np.nan
    inter: dict[int, float] = {}
    for b, (group, level) in zip(beta, design.columns):
        if group == "time_daytype":
            f_log[DAY_TYPES.index(level[0]), level[1]] = b
        elif group == "week":
            g_log[level - 1] = b
        elif group == "week_daytype":
            inter[level] = float(np.exp(b))
        elif group == "holiday":
            h_log = b
        elif group == "rain":
            l_log[RAIN_LABELS.index(level)] = b
    return (float(np.exp(beta[0])), np.exp(f_log), np.exp(g_log), float(np.exp(h_log)),
            np.exp(l_log), inter)


def log_prediction(fit: TemporalModelFit, ctx: CalendarContext) -> np.ndarray:
    """Fitted ``log(count + offset)`` for every bin of ``ctx``."""
    with np.errstate(divide="ignore"):
        log_f = np.log(fit.f_hat)[ctx.day_type.astype(int), ctx.time_of_day.astype(int)]
        log_g = np.log(fit.g_hat)[ctx.week_index.astype(int) - 1]
        log_l = np.log(fit.l_hat)[ctx.rain_level.astype(int)]
        log_h = np.where(ctx.holiday, np.log(fit.h_hat), 0.0)
    total = np.log(fit.baseline) + log_f + log_g + log_h + log_l
    for week, mult in fit.interaction.items():
        total = total + np.where((ctx.week_index == week) & (ctx.day_type == WEEKEND), np.log(mult), 0.0)
    if np.any(~np.isfinite(total)):
        raise TemporalModelError("context contains factor levels not seen in training")
    return total


def predict(fit: TemporalModelFit, row: Mapping) -> float:
    """Expected count for one bin described by a :meth:`CalendarContext.row` mapping."""
    day_type = row["day_type"]
    d = DAY_TYPES.index(day_type) if isinstance(day_type, str) else int(day_type)
    slot, week = int(row["time_of_day"]), int(row["week_index"])
    rain = row["rain_level"]
    rain_code = RAIN_LABELS.index(rain) if isinstance(rain, str) else int(rain)
    if not (0 <= slot < fit.slots_per_day and 1 <= week <= MAX_WEEK):
        raise TemporalModelError(f"level out of range: slot {slot}, week {week}")
    parts = [fit.baseline, fit.f_hat[d, slot], fit.g_hat[week - 1], fit.l_hat[rain_code]]
    if row.get("holiday", False):
        parts.append(fit.h_hat)
    if d == DAY_TYPES.index("weekend") and week in fit.interaction:
        parts.append(fit.interaction[week])
    parts = np.array(parts, dtype=float)
    if np.any(np.isnan(parts)):
        raise TemporalModelError(f"unseen factor level in {dict(row)}")
    return max(float(np.prod(parts)) - fit.offset, 0.0)


def extract_profiles(fit: TemporalModelFit, normalization: str = "raw") -> dict[str, DailyProfile]:
    """Daily usage curves ``baseline * f(slot, day type)`` per day type.

    ``normalization="sum-to-one"`` rescales each curve to unit total.
    """
    if normalization not in ("raw", "sum-to-one"):
        raise ValueError(f"unknown normalization {normalization!r}")
    out = {}
    for d, name in enumerate(DAY_TYPES):
        values = fit.baseline * fit.f_hat[d]
        if np.all(np.isnan(values)):
            continue
        if normalization == "sum-to-one":
            values = values / np.nansum(values)
        out[name] = DailyProfile(name, values, normalization)
    return out


def _num(v):
    v = float(v)
    return None if not np.isfinite(v) else v


def fit_to_dict(fit: TemporalModelFit) -> dict:
    """JSON-ready description: multiplier tables keyed by level plus diagnostics."""
    coef = []
    for (group, level), b, se, t, p in zip(fit.columns, fit.coefficients, fit.std_errors,
                                          fit.t_values, fit.p_values):
        coef.append({
            "group": group,
            "level": list(level) if isinstance(level, tuple) else level,
            "estimate": _num(b), "std_error": _num(se), "t_value": _num(t), "p_value": _num(p),
        })
    return {
        "model": "log-linear",
        "offset": fit.offset,
        "slots_per_day": fit.slots_per_day,
        "baseline": fit.baseline,
        "time_daytype": {name: [_num(v) for v in fit.f_hat[d]] for d, name in enumerate(DAY_TYPES)},
        "week": {str(w + 1): _num(v) for w, v in enumerate(fit.g_hat)},
        "holiday": _num(fit.h_hat),
        "rain": {label: _num(v) for label, v in zip(RAIN_LABELS, fit.l_hat)},
        "week_daytype": {str(k): v for k, v in sorted(fit.interaction.items())},
        "coefficients": coef,
        "diagnostics": {
            "n_bins": fit.n_bins,
            "n_parameters": fit.n_parameters,
            "degrees_of_freedom": fit.degrees_of_freedom,
            "r_squared": fit.r_squared,
            "sigma": _num(fit.sigma),
            "variance_decomposition": fit.variance_decomposition,
        },
    }


def write_fit_json(fit: TemporalModelFit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fit_to_dict(fit), fh, indent=2, sort_keys=True)
        fh.write("\n")


def profiles_frame(fit: TemporalModelFit, normalization: str = "sum-to-one") -> pd.DataFrame:
    profiles = extract_profiles(fit, normalization)
    spd = fit.slots_per_day
    minutes = np.arange(spd) * (24 * 60 // spd)
    frame = pd.DataFrame({
        "slot": np.arange(spd),
        "time": [f"{m // 60:02d}:{m % 60:02d}" for m in minutes],
    })
    for name in DAY_TYPES:
        frame[name] = profiles[name].values if name in profiles else np.nan
    return frame


def weekly_frame(fit: TemporalModelFit) -> pd.DataFrame:
    return pd.DataFrame({"week": np.arange(1, MAX_WEEK + 1), "multiplier": fit.g_hat})
