"""Two-group comparisons: Fisher's exact test, rank-sum, Welch's t-test.

Fisher's test enumerates the hypergeometric support in exact integer
arithmetic.  The two-sided p-value follows the point-probability rule
(sum of tables no more probable than the observed one); one-sided tails
are defined on the (0, 0) cell, ``greater`` meaning an as-strong-or-stronger
positive association of row 0 with column 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np
from scipy.stats import norm, t as t_dist

__all__ = [
    "ContingencyTable2x2",
    "ReportRow",
    "fisher_exact",
    "rank_sum_test",
    "welch_t_test",
    "compare_groups",
    "report_table",
]

EXACT_RANKSUM_LIMIT = 12  # pooled size at or below which the rank-sum test enumerates


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Counts with rows = grouping factor, columns = outcome."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        cells = (self.a, self.b, self.c, self.d)
        if any(int(x) != x or x < 0 for x in cells):
            raise ValueError("table cells must be non-negative integers")
        if sum(cells) == 0:
            raise ValueError("table total must be positive")

    @property
    def odds_ratio(self) -> float:
        if self.b * self.c == 0:
            return float("inf") if self.a * self.d > 0 else float("nan")
        return (self.a * self.d) / (self.b * self.c)


def fisher_exact(table: ContingencyTable2x2, sidedness: str = "two_sided") -> float:
    """Exact hypergeometric p-value for a 2x2 table.

    ``sidedness`` is ``two_sided`` (point-probability rule), ``greater`` or
    ``less`` (tail of tables as or more extreme in that direction on the
    (0,0) cell).  A zero row or column margin yields p = 1 by convention.
    """
    if sidedness not in ("two_sided", "greater", "less"):
        raise ValueError(f"unknown sidedness {sidedness!r}")
    a, b, c, d = table.a, table.b, table.c, table.d
    r0, r1 = a + b, c + d
    c0 = a + c
    n = r0 + r1
    if r0 == 0 or r1 == 0 or c0 == 0 or c0 == n:
        warnings.warn("degenerate margin in 2x2 table; p = 1 by convention")
        return 1.0

    lo = max(0, c0 - r1)
    hi = min(r0, c0)
    weights = {k: math.comb(r0, k) * math.comb(r1, c0 - k) for k in range(lo, hi + 1)}
    denom = sum(weights.values())
    observed = weights[a]
    if sidedness == "greater":
        num = sum(w for k, w in weights.items() if k >= a)
    elif sidedness == "less":
        num = sum(w for k, w in weights.items() if k <= a)
    else:
        num = sum(w for w in weights.values() if w <= observed)
    return float(Fraction(num, denom))


def rank_sum_test(x, y) -> float:
    """Two-sided Wilcoxon-Mann-Whitney p-value.

    Exact permutation enumeration of the rank sum when the pooled size is
    at most 12; otherwise the normal approximation with midrank tie
    correction and continuity correction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0 or y.size == 0:
        raise ValueError("both samples must be non-empty")
    nx, ny = x.size, y.size
    n = nx + ny
    pooled = np.concatenate([x, y])
    if np.all(pooled == pooled[0]):
        return 1.0

    # midranks
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(n)
    sorted_vals = pooled[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1

    w_obs = float(np.sum(ranks[:nx]))
    mu = nx * (n + 1) / 2.0

    if n <= EXACT_RANKSUM_LIMIT:
        dev = abs(w_obs - mu)
        count = 0
        total = 0
        for sel in combinations(range(n), nx):
            total += 1
            if abs(ranks[list(sel)].sum() - mu) >= dev - 1e-9:
                count += 1
        return count / total

    _, tie_counts = np.unique(sorted_vals, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts))
    var = nx * ny / 12.0 * ((n + 1) - tie_term / (n * (n - 1.0)))
    if var <= 0:
        return 1.0
    diff = w_obs - mu
    diff -= 0.5 * np.sign(diff)  # continuity correction toward the mean
    z = diff / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(abs(z))))


def welch_t_test(x, y) -> float:
    """Two-sided Welch's t-test with Satterthwaite degrees of freedom."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or y.size < 2:
        raise ValueError("both samples need n >= 2")
    vx = x.var(ddof=1)
    vy = y.var(ddof=1)
    mean_diff = x.mean() - y.mean()
    if vx == 0 and vy == 0:
        if mean_diff == 0:
            return 1.0
        warnings.warn("zero variance in both samples with unequal means; p -> 0 limit")
        return 0.0
    sx = vx / x.size
    sy = vy / y.size
    t_stat = mean_diff / math.sqrt(sx + sy)
    df = (sx + sy) ** 2 / (sx ** 2 / (x.size - 1) + sy ** 2 / (y.size - 1))
    return float(min(1.0, 2.0 * t_dist.sf(abs(t_stat), df)))


@dataclass(frozen=True)
class ReportRow:
    variable: str
    test: str
    statistic: float
    p_value: float
    note: str = ""


def compare_groups(values: dict[str, dict[int, float]],
                   categories: dict[str, dict[int, int]],
                   labels: dict[int, object]) -> list[ReportRow]:
    """Two-group report: rank-sum and Welch tests per numeric variable,
    Fisher's exact test (both sidednesses) per binary categorical variable.

    ``labels`` maps subject id to one of exactly two group labels and must
    cover every subject appearing in ``values``/``categories``.
    """
    ids = set()
    for mapping in list(values.values()) + list(categories.values()):
        ids.update(mapping)
    missing = sorted(i for i in ids if i not in labels)
    if missing:
        raise ValueError(f"labels missing for subjects {missing}")

    levels = sorted({str(v) for v in labels.values()})
    if len(levels) == 1:
        return [ReportRow("", "none", float("nan"), float("nan"),
                          f"single group {levels[0]!r}; no tests")]
    if len(levels) != 2:
        raise ValueError(f"expected two groups, got {levels}")
    g0, g1 = levels

    rows: list[ReportRow] = []
    for name in sorted(values):
        series = values[name]
        x = np.array([series[i] for i in sorted(series) if str(labels[i]) == g0])
        y = np.array([series[i] for i in sorted(series) if str(labels[i]) == g1])
        if x.size < 2 or y.size < 2:
            rows.append(ReportRow(name, "none", float("nan"), float("nan"),
                                  "a group has < 2 subjects; tests skipped"))
            continue
        rows.append(ReportRow(name, "rank_sum", float(np.median(x) - np.median(y)),
                              rank_sum_test(x, y), f"statistic = median({g0}) - median({g1})"))
        rows.append(ReportRow(name, "welch_t", float(x.mean() - y.mean()),
                              welch_t_test(x, y), f"statistic = mean({g0}) - mean({g1})"))

    for name in sorted(categories):
        series = categories[name]
        cat_levels = sorted(set(series.values()))
        if len(cat_levels) != 2:
            rows.append(ReportRow(name, "none", float("nan"), float("nan"),
                                  f"not binary ({len(cat_levels)} levels); skipped"))
            continue
        k0 = cat_levels[0]
        a = sum(1 for i, v in series.items() if str(labels[i]) == g0 and v == k0)
        b = sum(1 for i, v in series.items() if str(labels[i]) == g0 and v != k0)
        c = sum(1 for i, v in series.items() if str(labels[i]) == g1 and v == k0)
        d = sum(1 for i, v in series.items() if str(labels[i]) == g1 and v != k0)
        table = ContingencyTable2x2(a, b, c, d)
        note = f"rows {g0}/{g1}, columns {name}={k0}/other"
        for side in ("two_sided", "greater", "less"):
            rows.append(ReportRow(name, f"fisher_{side}", table.odds_ratio,
                                  fisher_exact(table, side), note))
    return rows


REPORT_HEADER = ("VARIABLE", "TEST", "STATISTIC", "P_VALUE", "NOTE")


def report_table(rows: list[ReportRow]) -> str:
    out = [",".join(REPORT_HEADER)]
    for r in rows:
        stat = "" if not np.isfinite(r.statistic) else repr(float(r.statistic))
        p = "" if not np.isfinite(r.p_value) else repr(float(r.p_value))
        note = r.note.replace(",", ";")
        out.append(",".join((r.variable, r.test, stat, p, note)))
    return "\n".join(out) + "\n"
