"""
One- and two-way ANOVA, the F survival function and a permutation-based
pairwise comparison with Bonferroni adjustment.
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import betainc

from .errors import DegenerateDataError, DomainError, PrecisionError
from .seeding import make_rng

logger = logging.getLogger(__name__)

# relative size under which a sum of squares counts as exactly zero
ZERO_SS = 1e-12
PERMUTATION_BATCH = 1000

ANOVA_COLUMNS = ["effect", "SS", "df", "MS", "F", "p"]


@dataclass(frozen=True)
class AnovaRow:
    effect: str
    ss: float
    df: int
    ms: float
    f: Optional[float] = None
    p: Optional[float] = None


@dataclass(frozen=True)
class AnovaTable:
    effects: Tuple[AnovaRow, ...]
    residual: AnovaRow
    grand_mean: float
    ss_total: float

    def __getitem__(self, effect: str) -> AnovaRow:
        for row in self.effects + (self.residual,):
            if row.effect == effect:
                return row
        raise KeyError(effect)

    def to_frame(self) -> pd.DataFrame:
        rows = [(r.effect, r.ss, r.df, r.ms, r.f, r.p) for r in self.effects + (self.residual,)]
        return pd.DataFrame(rows, columns=ANOVA_COLUMNS)


@dataclass
class FactorialTable:
    """Replicate values per (a, b) cell of a two-factor design"""
    factor_a_levels: List
    factor_b_levels: List
    cells: Dict[Tuple, List[float]] = field(default_factory=dict)
    factor_a_name: str = "A"
    factor_b_name: str = "B"

    def add(self, a, b, value: float):
        if a not in self.factor_a_levels:
            self.factor_a_levels.append(a)
        if b not in self.factor_b_levels:
            self.factor_b_levels.append(b)
        self.cells.setdefault((a, b), []).append(float(value))

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, a: str, b: str, value: str) -> "FactorialTable":
        table = cls([], [], factor_a_name=a, factor_b_name=b)
        for a_level, b_level, v in frame[[a, b, value]].itertuples(index=False):
            table.add(a_level, b_level, v)
        return table

    def replicates(self) -> int:
        counts = {len(self.cells.get((a, b), [])) for a in self.factor_a_levels for b in self.factor_b_levels}
        if len(counts) != 1 or 0 in counts:
            raise DomainError(f"unbalanced table (replicates per cell: {sorted(counts)}); "
                              "use one_way_anova per factor instead")
        return counts.pop()

    def to_array(self) -> np.ndarray:
        r = self.replicates()
        x = np.empty((len(self.factor_a_levels), len(self.factor_b_levels), r))
        for i, a in enumerate(self.factor_a_levels):
            for j, b in enumerate(self.factor_b_levels):
                x[i, j] = self.cells[(a, b)]
        return x


def f_sf(f: float, df1: float, df2: float) -> float:
    """Survival function of the F distribution"""
    if df1 < 1 or df2 < 1:
        raise DomainError(f"degrees of freedom must be >= 1, got ({df1}, {df2})")
    if f < 0 or math.isnan(f):
        raise DomainError(f"F must be nonnegative, got {f}")
    if f == 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return float(betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f)))


def _is_zero(ss: float, scale: float) -> bool:
    return ss <= ZERO_SS * max(scale, 1e-300)


def _effect_row(name: str, ss: float, df: int, residual_ss: float, residual_df: int, scale: float) -> AnovaRow:
    ss = max(ss, 0.0)
    if df == 0 or _is_zero(ss, scale):
        return AnovaRow(name, ss, df, ss / df if df else 0.0, 0.0, 1.0)
    ms = ss / df
    if _is_zero(residual_ss, scale) or residual_df == 0:
        return AnovaRow(name, ss, df, ms, math.inf, 0.0)
    f = ms / (residual_ss / residual_df)
    return AnovaRow(name, ss, df, ms, f, f_sf(f, df, residual_df))


def _finish(effects: List[AnovaRow], residual_ss: float, residual_df: int,
            grand_mean: float, ss_total: float) -> AnovaTable:
    if all(_is_zero(e.ss, ss_total) for e in effects) and _is_zero(residual_ss, ss_total):
        raise DegenerateDataError("every effect is 0/0: the data are constant")
    residual = AnovaRow("residual", max(residual_ss, 0.0), residual_df,
                        residual_ss / residual_df if residual_df else 0.0)
    return AnovaTable(tuple(effects), residual, grand_mean, ss_total)


def one_way_anova(groups: Sequence[Sequence[float]], name: str = "between") -> AnovaTable:
    if len(groups) < 2:
        raise DomainError(f"need at least 2 groups, got {len(groups)}")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if any(g.size < 2 for g in arrays):
        raise DomainError("every group needs at least 2 values")

    values = np.concatenate(arrays)
    grand = values.mean()
    ss_total = float(np.sum((values - grand) ** 2))
    ss_between = float(sum(g.size * (g.mean() - grand) ** 2 for g in arrays))
    ss_within = float(sum(np.sum((g - g.mean()) ** 2) for g in arrays))
    df_between = len(arrays) - 1
    df_within = values.size - len(arrays)
    if ss_total == 0.0:
        raise DegenerateDataError("every group is the same constant")
    effect = _effect_row(name, ss_between, df_between, ss_within, df_within, ss_total)
    return _finish([effect], ss_within, df_within, float(grand), ss_total)


def two_way_anova(table: FactorialTable, interaction: bool = False) -> AnovaTable:
    """Two-factor ANOVA on a balanced table.

    By default the interaction is pooled into the residual, which also
    allows a single replicate per cell; `interaction=True` needs at least
    two.
    """
    x = table.to_array()
    a, b, r = x.shape
    if a < 2 and b < 2:
        raise DomainError("need at least 2 levels on one factor")
    if interaction and r < 2:
        raise DomainError("the interaction model needs at least 2 replicates per cell")

    n = x.size
    grand = x.mean()
    mean_a = x.mean(axis=(1, 2))
    mean_b = x.mean(axis=(0, 2))
    cell = x.mean(axis=2)

    ss_total = float(np.sum((x - grand) ** 2))
    ss_a = float(b * r * np.sum((mean_a - grand) ** 2))
    ss_b = float(a * r * np.sum((mean_b - grand) ** 2))
    ss_ab = float(r * np.sum((cell - mean_a[:, None] - mean_b[None, :] + grand) ** 2))
    ss_within = float(np.sum((x - cell[:, :, None]) ** 2))
    if ss_total == 0.0:
        raise DegenerateDataError("every cell holds the same constant")

    if interaction:
        res_ss, res_df = ss_within, a * b * (r - 1)
        effects = [
            _effect_row(table.factor_a_name, ss_a, a - 1, res_ss, res_df, ss_total),
            _effect_row(table.factor_b_name, ss_b, b - 1, res_ss, res_df, ss_total),
            _effect_row(f"{table.factor_a_name}:{table.factor_b_name}", ss_ab, (a - 1) * (b - 1),
                        res_ss, res_df, ss_total),
        ]
    else:
        res_ss, res_df = ss_ab + ss_within, n - a - b + 1
        effects = [
            _effect_row(table.factor_a_name, ss_a, a - 1, res_ss, res_df, ss_total),
            _effect_row(table.factor_b_name, ss_b, b - 1, res_ss, res_df, ss_total),
        ]
    anova = _finish(effects, res_ss, res_df, float(grand), ss_total)
    logger.debug("two-way ANOVA %dx%dx%d: %s", a, b, r, format_report(anova))
    return anova


@dataclass(frozen=True)
class PairwiseResult:
    labels: Tuple[str, ...]
    raw: np.ndarray
    adjusted: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, j in combinations(range(len(self.labels)), 2):
            rows.append((self.labels[i], self.labels[j], self.raw[i, j], self.adjusted[i, j]))
        return pd.DataFrame(rows, columns=["group_a", "group_b", "p_raw", "p_bonferroni"])


def _permutation_p(x: np.ndarray, y: np.ndarray, n_perm: int, rng: np.random.Generator) -> float:
    pooled = np.concatenate([x, y])
    observed = abs(x.mean() - y.mean())
    tolerance = 1e-12 * max(1.0, observed)
    hits = 0
    done = 0
    while done < n_perm:
        batch = min(PERMUTATION_BATCH, n_perm - done)
        shuffled = rng.permuted(np.tile(pooled, (batch, 1)), axis=1)
        diff = np.abs(shuffled[:, :x.size].mean(axis=1) - shuffled[:, x.size:].mean(axis=1))
        hits += int(np.sum(diff >= observed - tolerance))
        done += batch
    return (hits + 1) / (n_perm + 1)


def permutation_pairwise(groups: Sequence[Sequence[float]], n_perm: int = 10000, seed: int = 0,
                         labels: Optional[Sequence[str]] = None) -> PairwiseResult:
    """Two-sided permutation test on the mean difference of every pair"""
    if len(groups) < 2:
        raise DomainError(f"need at least 2 groups, got {len(groups)}")
    if n_perm < 100:
        raise PrecisionError(f"n_perm={n_perm} is too coarse; use at least 100")
    labels = tuple(str(l) for l in labels) if labels is not None else tuple(str(i) for i in range(len(groups)))
    if len(labels) != len(groups):
        raise DomainError("one label per group is required")

    arrays = [np.asarray(g, dtype=float) for g in groups]
    k = len(arrays)
    n_pairs = k * (k - 1) // 2
    raw = np.ones((k, k))
    adjusted = np.ones((k, k))
    for i, j in combinations(range(k), 2):
        p = _permutation_p(arrays[i], arrays[j], n_perm, make_rng(seed, "pair", i, j))
        raw[i, j] = raw[j, i] = p
        adjusted[i, j] = adjusted[j, i] = min(1.0, p * n_pairs)
    return PairwiseResult(labels, raw, adjusted)


def format_p(p: float) -> str:
    if p < 1e-12:
        return "p<1e-12"
    if p < 0.001:
        return "p<0.001"
    return f"p={p:.3f}"


def format_report(table: AnovaTable) -> str:
    """One `effect: F(df1,df2)=..., p...` line per effect"""
    lines = []
    for row in table.effects:
        f = "inf" if math.isinf(row.f) else f"{row.f:.2f}"
        lines.append(f"{row.effect}: F({row.df},{table.residual.df})={f}, {format_p(row.p)}")
    return "\n".join(lines)


def group_values(frame: pd.DataFrame, factor: str, value: str) -> Mapping[str, List[float]]:
    """Values of `value` grouped by `factor`, in first-appearance order"""
    grouped = {}
    for level, v in frame[[factor, value]].itertuples(index=False):
        grouped.setdefault(level, []).append(float(v))
    return grouped
