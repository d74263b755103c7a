"""Saliency evaluation: pointing game, attention correctness, localization.

The pointing game counts whether the maximum-saliency cell falls inside
the ground-truth region (Acc = Hits / (Hits + Misses)). Attention
correctness integrates normalized saliency mass over the region. Both
are reported per noun category and on average, next to random / center /
uniform baselines. Temporal localization checks that the most salient
frame of a word lies inside the word's ground-truth frame span.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import saliency as sal
from . import seq2seq as s2s
from .numerics import ContractError, DimensionError
from .seq2seq import DescriptorSequence, ModelParams
from .synthworld import Scene


@dataclass(frozen=True)
class BoundingRegion:
    """Ground-truth cell set within a g x g grid, optionally with a frame span."""

    cells: tuple[tuple[int, int], ...]
    span: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.cells:
            raise ContractError("bounding region is empty")

    def indices(self, g: int) -> set[int]:
        out = set()
        for a, b in self.cells:
            if not (0 <= a < g and 0 <= b < g):
                raise ContractError(f"region cell ({a},{b}) outside {g}x{g} grid")
            out.add(a * g + b)
        return out


def _flat_row(row, g: int) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if row.ndim == 2:
        row = row.reshape(-1)
    if row.shape != (g * g,):
        raise DimensionError(
            f"saliency row has {row.size} cells, expected {g * g}"
        )
    return row


def pointing_game(row, region: BoundingRegion, g: int) -> bool:
    """Hit iff the maximum-saliency cell lies inside the region.

    Ties break toward the lowest row-major index; a degenerate all-equal
    row (the all-0.5 rescale convention) counts as a miss.
    """
    row = _flat_row(row, g)
    if np.all(row == row[0]):
        return False
    return int(np.argmax(row)) in region.indices(g)


def baseline_random(seed: int, g: int):
    """Uniformly random pointing: returns a callable yielding cell indices."""
    rng = np.random.default_rng(seed)

    def point() -> int:
        return int(rng.integers(0, g * g))

    return point


def baseline_center(g: int) -> int:
    """Center cell index; even grids break ties to the upper-left of center."""
    a = (g - 1) // 2
    return a * g + a


def attention_correctness(row, region: BoundingRegion, g: int) -> float:
    """Normalized saliency mass inside the region (1.0 when all mass is in)."""
    row = _flat_row(row, g)
    total = row.sum()
    if not np.isclose(total, 1.0, rtol=0.0, atol=1e-9):
        if total <= 0:
            raise ContractError("attention row has no mass to normalize")
        warnings.warn("attention row is not stochastic; re-normalizing",
                      stacklevel=2)
        row = row / total
    return float(row[sorted(region.indices(g))].sum())


def temporal_argmax(alpha_row, rng: np.random.Generator | None = None) -> int:
    """Most salient frame; exact ties are broken uniformly at random."""
    alpha_row = np.asarray(alpha_row)
    best = np.flatnonzero(alpha_row == alpha_row.max())
    if len(best) == 1 or rng is None:
        return int(best[0])
    return int(rng.choice(best))


def temporal_hit(alpha_row, span: tuple[int, int],
                 rng: np.random.Generator | None = None) -> bool:
    frame = temporal_argmax(alpha_row, rng)
    return span[0] <= frame < span[1]


def caption_accuracy(params: ModelParams, records,
                     max_len: int = 16) -> tuple[float, float]:
    """Greedy captions vs ground truth: (exact-match rate, token accuracy).

    Token accuracy aligns by position and divides matches by the longer
    of the two lengths, so it always dominates the exact-match rate.
    """
    exact = 0
    token_acc = 0.0
    for scene, seq in records:
        predicted = s2s.greedy_caption(params, seq, max_len)
        truth = scene.caption
        if predicted == truth:
            exact += 1
        matches = sum(p == t for p, t in zip(predicted, truth))
        token_acc += matches / max(len(predicted), len(truth), 1)
    n = len(records)
    return exact / n, token_acc / n


@dataclass
class CategoryStats:
    pointing_hits: int = 0
    correctness_sum: float = 0.0
    temporal_hits: int = 0
    temporal_total: int = 0
    restricted_hits: int = 0
    restricted_total: int = 0
    random_hits: int = 0
    center_hits: int = 0
    uniform_sum: float = 0.0
    count: int = 0

    def pointing(self) -> float:
        return self.pointing_hits / self.count if self.count else 0.0

    def correctness(self) -> float:
        return self.correctness_sum / self.count if self.count else 0.0


@dataclass
class EvalReport:
    grid_g: int
    frames: int
    categories: dict[str, CategoryStats] = field(default_factory=dict)
    caption_exact: float = 0.0
    caption_token_acc: float = 0.0
    scenes: int = 0
    phrases: int = 0

    def _total(self, attr) -> float:
        return float(sum(getattr(c, attr) for c in self.categories.values()))

    @property
    def pointing_avg(self) -> float:
        n = self._total("count")
        return self._total("pointing_hits") / n if n else 0.0

    @property
    def correctness_avg(self) -> float:
        n = self._total("count")
        return self._total("correctness_sum") / n if n else 0.0

    @property
    def random_pointing_avg(self) -> float:
        n = self._total("count")
        return self._total("random_hits") / n if n else 0.0

    @property
    def center_pointing_avg(self) -> float:
        n = self._total("count")
        return self._total("center_hits") / n if n else 0.0

    @property
    def uniform_correctness_avg(self) -> float:
        n = self._total("count")
        return self._total("uniform_sum") / n if n else 0.0

    @property
    def temporal_accuracy(self) -> float:
        n = self._total("temporal_total")
        return self._total("temporal_hits") / n if n else 0.0

    @property
    def temporal_restricted_accuracy(self) -> float:
        n = self._total("restricted_total")
        return self._total("restricted_hits") / n if n else 0.0


def evaluate_model(params: ModelParams, records, *,
                   baseline_seed: int = 123,
                   tie_break_seed: int = 321,
                   chunk_size: int | None = None,
                   max_len: int = 16) -> EvalReport:
    """Run the full saliency evaluation over (Scene, DescriptorSequence) pairs.

    Saliency maps are probed with the ground-truth caption as the query.
    Spatial pointing and attention correctness are measured at the middle
    frame of each object's ground-truth span (the still-image analogue);
    temporal localization uses the model's own most-salient frame.
    """
    if not records:
        raise ContractError("no records to evaluate")
    g = records[0][0].grid_size
    m = records[0][0].frames
    report = EvalReport(grid_g=g, frames=m, scenes=len(records))
    random_point = baseline_random(baseline_seed, g)
    center_idx = baseline_center(g)
    tie_rng = np.random.default_rng(tie_break_seed)
    cells = g * g

    for scene, seq in records:
        if seq.grids is None:
            raise ContractError("evaluation records need stored grids")
        saliency = sal.batch_probe(params, seq, scene.caption,
                                   include_spatial=True, chunk_size=chunk_size)
        for phrase in scene.phrases:
            noun = scene.caption[phrase.noun_index]
            stats = report.categories.setdefault(noun, CategoryStats())
            region = BoundingRegion(cells=phrase.cells, span=phrase.span)
            region_idx = region.indices(g)

            mid_frame = (phrase.span[0] + phrase.span[1] - 1) // 2
            row = saliency.spatial_scaled[phrase.noun_index, mid_frame]
            stats.count += 1
            report.phrases += 1
            if pointing_game(row, region, g):
                stats.pointing_hits += 1
            stats.correctness_sum += attention_correctness(
                row / row.sum() if row.sum() > 0 else np.full(cells, 1.0 / cells),
                region, g)
            stats.random_hits += random_point() in region_idx
            stats.center_hits += center_idx in region_idx
            stats.uniform_sum += len(region_idx) / cells

            alpha_row = saliency.temporal_alpha[phrase.noun_index]
            hit = temporal_hit(alpha_row, phrase.span, tie_rng)
            stats.temporal_total += 1
            stats.temporal_hits += hit
            if phrase.span != (0, m):
                stats.restricted_total += 1
                stats.restricted_hits += hit

    report.caption_exact, report.caption_token_acc = caption_accuracy(
        params, records, max_len)
    return report


def report_to_dict(report: EvalReport) -> dict:
    return {
        "grid_g": report.grid_g,
        "frames": report.frames,
        "scenes": report.scenes,
        "phrases": report.phrases,
        "caption": {
            "exact_match": report.caption_exact,
            "token_accuracy": report.caption_token_acc,
        },
        "pointing": {
            "average": report.pointing_avg,
            "baseline_random": report.random_pointing_avg,
            "baseline_center": report.center_pointing_avg,
            "per_category": {
                noun: stats.pointing()
                for noun, stats in sorted(report.categories.items())
            },
        },
        "attention_correctness": {
            "average": report.correctness_avg,
            "baseline_uniform": report.uniform_correctness_avg,
            "per_category": {
                noun: stats.correctness()
                for noun, stats in sorted(report.categories.items())
            },
        },
        "temporal_localization": {
            "accuracy": report.temporal_accuracy,
            "span_restricted_accuracy": report.temporal_restricted_accuracy,
            "span_restricted_count": int(sum(
                c.restricted_total for c in report.categories.values())),
        },
    }


def render_report(report: EvalReport) -> str:
    """Aligned plain-text table: per-category rows plus baselines."""
    nouns = sorted(report.categories)
    name_w = max([len(n) for n in nouns] + [16])
    lines = []
    header = (f"{'category':<{name_w}}  {'point':>6}  {'attn':>6}  "
              f"{'temporal':>8}  {'count':>5}")
    lines.append(header)
    lines.append("-" * len(header))
    for noun in nouns:
        c = report.categories[noun]
        temporal = (c.temporal_hits / c.temporal_total) if c.temporal_total else 0.0
        lines.append(
            f"{noun:<{name_w}}  {c.pointing():>6.3f}  {c.correctness():>6.3f}  "
            f"{temporal:>8.3f}  {c.count:>5d}"
        )
    lines.append("-" * len(header))
    lines.append(
        f"{'average':<{name_w}}  {report.pointing_avg:>6.3f}  "
        f"{report.correctness_avg:>6.3f}  {report.temporal_accuracy:>8.3f}  "
        f"{report.phrases:>5d}"
    )
    lines.append(
        f"{'baseline random':<{name_w}}  {report.random_pointing_avg:>6.3f}"
    )
    lines.append(
        f"{'baseline center':<{name_w}}  {report.center_pointing_avg:>6.3f}"
    )
    lines.append(
        f"{'baseline uniform':<{name_w}}  {'':>6}  "
        f"{report.uniform_correctness_avg:>6.3f}"
    )
    lines.append("")
    lines.append(f"temporal localization (span-restricted): "
                 f"{report.temporal_restricted_accuracy:.3f}")
    lines.append(f"caption exact-match: {report.caption_exact:.3f}")
    lines.append(f"caption token accuracy: {report.caption_token_acc:.3f}")
    return "\n".join(lines) + "\n"
