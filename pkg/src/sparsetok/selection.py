"""Keep-probability scoring and straight-through token selection.

The selectors come in four flavors: two learnable stochastic ones (top-K over
Gumbel-perturbed scores, and a per-token ratio-controlled gate), plus the two
baselines they are measured against (noise-free top-K and a fixed uniform
grid). All of them emit a SelectionMask whose `soft` tensor carries the
gradient path; `apply_ste` wires value-from-hard / derivative-from-soft.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ContractError, CapacityError, ShapeError
from .gumbel import sample_standard_gumbel
from .rng import SeededRng

STRATEGY_KINDS = ("gumbel_topk", "ratio_controlled", "deterministic_topk", "uniform_fixed")

# additive logit that removes padded slots from any softmax
_PAD_LOGIT = -1e30
# keeps natural_log off exact zeros without perturbing representable scores
_TINY = 1e-300

# column selector <(1,0), softmax(f(v))> that reads the keep entry
_KEEP_COLUMN = np.array([[1.0], [0.0]])


@dataclass
class StrategyConfig:
    """Which selector to run and its knobs (K or p, temperature, loss weight)."""

    kind: str
    k: int | None = None
    target_ratio: float | None = None
    tau: float = 0.1
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ContractError(f"unknown strategy kind {self.kind!r}")
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.kind == "ratio_controlled":
            if self.target_ratio is None or self.k is not None:
                raise ContractError("ratio_controlled is driven by target_ratio alone")
            if not 0 < self.target_ratio <= 1:
                raise ContractError("target_ratio must lie in (0, 1]")
        else:
            if self.k is None or self.target_ratio is not None:
                raise ContractError(f"{self.kind} is driven by K alone")
            if self.k < 1:
                raise ContractError("K must be positive")


class KeepProbPredictor:
    """Two-layer scorer f: R^d -> R^2 whose softmax yields keep probabilities."""

    def __init__(self, d: int, hidden: int | None = None):
        self.d = d
        self.hidden = hidden if hidden is not None else 2 * d
        self.w1 = Parameter("scorer.w1", np.zeros((d, self.hidden)))
        self.b1 = Parameter("scorer.b1", np.zeros(self.hidden))
        self.w2 = Parameter("scorer.w2", np.zeros((self.hidden, 2)))
        self.b2 = Parameter("scorer.b2", np.zeros(2))

    def init(self, rng: SeededRng, stddev: float = 0.02) -> "KeepProbPredictor":
        self.w1.value = rng.split(0).normals(self.w1.value.size, 0.0, stddev).reshape(self.w1.shape)
        self.w2.value = rng.split(1).normals(self.w2.value.size, 0.0, stddev).reshape(self.w2.shape)
        self.b1.value[:] = 0.0
        self.b2.value[:] = 0.0
        return self

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, tape: ad.Tape, tokens: Tensor) -> Tensor:
        if tokens.shape[1] != self.d:
            raise ShapeError(f"predictor expects width {self.d}, got {tokens.shape[1]}")
        h = ad.gelu(ad.add(ad.matmul(tokens, tape.param(self.w1)), tape.param(self.b1)))
        return ad.add(ad.matmul(h, tape.param(self.w2)), tape.param(self.b2))


@dataclass
class KeepScores:
    """Per-token keep probabilities with their 2-dim predictor logits."""

    logits: Tensor           # [n, 2]
    s: Tensor                # [n], zero at padded positions
    valid_mask: np.ndarray   # bool [n]

    @property
    def n(self) -> int:
        return self.s.data.size

    @property
    def valid_count(self) -> int:
        return int(self.valid_mask.sum())


@dataclass
class SelectionMask:
    """Hard 0/1 selection with the relaxed weights that carry gradients."""

    hard: np.ndarray          # float 0/1 [n]
    soft: Tensor              # [n]
    kept_indices: np.ndarray  # strictly increasing int64
    strategy_tag: str
    valid_count: int

    @property
    def n(self) -> int:
        return self.hard.size

    @property
    def kept_count(self) -> int:
        return self.kept_indices.size

    @property
    def keep_ratio(self) -> float:
        return self.kept_count / self.valid_count


def compute_keep_probabilities(tape: ad.Tape, tokens: Tensor,
                               predictor: KeepProbPredictor,
                               valid_mask: np.ndarray | None = None) -> KeepScores:
    """Score every token: softmax the 2-dim predictor output, keep entry 0.

    Padded positions get s forced to 0 and stay out of every downstream loss.
    """
    n = tokens.shape[0]
    valid = np.ones(n, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    logits = predictor.logits(tape, tokens)
    probs = ad.softmax_with_temperature(logits, axis=1, tau=1.0)
    s_all = ad.reshape(ad.matmul(probs, ad.constant(_KEEP_COLUMN)), (n,))
    s = ad.mask_multiply(s_all, valid.astype(np.float64))
    return KeepScores(logits=logits, s=s, valid_mask=valid)


def keep_scores_from_values(tape: ad.Tape, s_values, valid_mask=None) -> KeepScores:
    """Build KeepScores around given keep probabilities (tests and oracles).

    Logits (log s, log(1-s)) reproduce s exactly through the softmax path.
    """
    s = np.asarray(s_values, dtype=np.float64)
    n = s.size
    valid = np.ones(n, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    safe = np.clip(s, 1e-15, 1 - 1e-15)
    logit_rows = np.stack([np.log(safe), np.log(1 - safe)], axis=1)
    logits = tape.leaf(logit_rows)
    probs = ad.softmax_with_temperature(logits, axis=1, tau=1.0)
    s_all = ad.reshape(ad.matmul(probs, ad.constant(_KEEP_COLUMN)), (n,))
    return KeepScores(logits=logits, s=ad.mask_multiply(s_all, valid.astype(np.float64)),
                      valid_mask=valid)


def _top_k_of(values: np.ndarray, valid: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest valid entries, ties toward the lower index."""
    cand = np.where(valid)[0]
    order = np.argsort(-values[cand], kind="stable")
    return np.sort(cand[order[:k]])


def _check_k(k: int, valid_count: int) -> None:
    if not 1 <= k <= valid_count:
        raise ContractError(f"K={k} out of range for {valid_count} valid tokens")


def _hard_from_indices(n: int, kept: np.ndarray) -> np.ndarray:
    hard = np.zeros(n)
    hard[kept] = 1.0
    return hard


def _log_s(scores: KeepScores) -> Tensor:
    # pads carry s = 0; shift them to 1 so the log stays in-domain, then the
    # pad logit below removes them from the softmax entirely
    offs = np.where(scores.valid_mask, _TINY, 1.0)
    return ad.log(ad.add(scores.s, ad.constant(offs)))


def gumbel_topk_select(scores: KeepScores, k: int, tau: float, rng: SeededRng) -> SelectionMask:
    """Variant 1: keep the K tokens with the largest Gumbel-perturbed scores.

    The hard mask ranks log s_i + g_i; the soft path is the sequence-level
    Gumbel-Softmax at temperature tau over the same perturbed scores.
    """
    n, valid = scores.n, scores.valid_mask
    _check_k(k, scores.valid_count)
    g = np.zeros(n)
    g[valid] = sample_standard_gumbel(rng, scores.valid_count).values
    with np.errstate(divide="ignore"):
        ranking = np.where(valid, np.log(np.maximum(scores.s.data, _TINY)) + g, -np.inf)
    kept = _top_k_of(ranking, valid, k)

    noise = np.where(valid, g, _PAD_LOGIT)
    perturbed = ad.add(_log_s(scores), ad.constant(noise))
    soft = ad.softmax_with_temperature(perturbed, axis=0, tau=tau)
    return SelectionMask(_hard_from_indices(n, kept), soft, kept, "gumbel_topk",
                         scores.valid_count)


def ratio_controlled_select(scores: KeepScores, tau: float, rng: SeededRng) -> SelectionMask:
    """Variant 2: per-token binary Gumbel gate, kept when s_i^g > 0.5 (strict)."""
    n, valid = scores.n, scores.valid_mask
    nv = scores.valid_count
    g = sample_standard_gumbel(rng, 2 * nv).values
    g0 = np.zeros(n)
    g1 = np.zeros(n)
    g0[valid] = g[:nv]
    g1[valid] = g[nv:]

    keep_logit = ad.add(_log_s(scores), ad.constant(g0))
    one_minus = ad.add(ad.subtract(ad.constant(np.ones(n)), scores.s),
                       ad.constant(np.full(n, _TINY)))
    drop_logit = ad.add(ad.log(one_minus), ad.constant(g1))
    stacked = ad.transpose(ad.concat_rows(ad.reshape(keep_logit, (1, n)),
                                          ad.reshape(drop_logit, (1, n))))
    relaxed = ad.softmax_with_temperature(stacked, axis=1, tau=tau)
    s_g = ad.reshape(ad.matmul(relaxed, ad.constant(_KEEP_COLUMN)), (n,))
    soft = ad.mask_multiply(s_g, valid.astype(np.float64))

    kept = np.where(valid & (soft.data > 0.5))[0]
    return SelectionMask(_hard_from_indices(n, kept), soft, kept, "ratio_controlled", nv)


def deterministic_topk_select(scores: KeepScores, k: int) -> SelectionMask:
    """Baseline: top-K of the raw keep probabilities, no noise; soft = s."""
    _check_k(k, scores.valid_count)
    kept = _top_k_of(scores.s.data, scores.valid_mask, k)
    return SelectionMask(_hard_from_indices(scores.n, kept), scores.s, kept,
                         "deterministic_topk", scores.valid_count)


def uniform_fixed_select(n: int, k: int) -> SelectionMask:
    """Baseline: K points on a fixed uniform grid over [0, n-1].

    Rounded grid points are deduplicated, then backfilled with the smallest
    unused indices so the mask always holds exactly K tokens.
    """
    _check_k(k, n)
    grid = np.unique(np.rint(np.linspace(0.0, n - 1.0, k)).astype(np.int64))
    if grid.size < k:
        unused = np.setdiff1d(np.arange(n, dtype=np.int64), grid, assume_unique=True)
        grid = np.sort(np.concatenate([grid, unused[: k - grid.size]]))
    hard = _hard_from_indices(n, grid)
    return SelectionMask(hard, ad.constant(hard.copy()), grid, "uniform_fixed", n)


def inference_rank_topk(scores: KeepScores, k: int) -> SelectionMask:
    """Inference path: rank keep probabilities and take the top K, noise-free."""
    mask = deterministic_topk_select(scores, k)
    mask.strategy_tag = "inference"
    return mask


def inference_k_for(strategy: StrategyConfig, valid_count: int) -> int:
    """K used at inference: the trained K, or round(p*n) for ratio control."""
    if strategy.kind == "ratio_controlled":
        return min(max(1, round(strategy.target_ratio * valid_count)), valid_count)
    return strategy.k


def run_strategy(scores: KeepScores, strategy: StrategyConfig, rng: SeededRng) -> SelectionMask:
    if strategy.kind == "gumbel_topk":
        return gumbel_topk_select(scores, strategy.k, strategy.tau, rng)
    if strategy.kind == "ratio_controlled":
        return ratio_controlled_select(scores, strategy.tau, rng)
    if strategy.kind == "deterministic_topk":
        return deterministic_topk_select(scores, strategy.k)
    return uniform_fixed_select(scores.n, strategy.k)


def apply_ste(tokens: Tensor, mask: SelectionMask) -> Tensor:
    """Compact the kept tokens, values untouched, gradients through `soft`.

    Forward output row j is exactly token kept_indices[j]; backward behaves as
    if every token had been scaled by its soft weight, so keep scores receive
    task-loss gradients. An empty selection yields a [0, d] tensor the task
    model replaces with its null token.
    """
    if tokens.shape[0] != mask.n:
        raise ContractError(f"mask length {mask.n} != token count {tokens.shape[0]}")
    gate = ad.straight_through(mask.soft, mask.hard)
    return ad.gather_rows(ad.scale_rows(tokens, gate), mask.kept_indices)


def reencode_positions(mask: SelectionMask, positional_table: Tensor) -> Tensor:
    """Positional rows 0..K'-1 for the kept tokens in their original order."""
    k = mask.kept_count
    if k > positional_table.shape[0]:
        raise CapacityError(f"{k} kept tokens exceed positional capacity "
                            f"{positional_table.shape[0]}")
    return ad.gather_rows(positional_table, np.arange(k, dtype=np.int64))


def selection_loss(masks: list[SelectionMask], target_ratio: float) -> Tensor:
    """Mean squared deviation of the batch's realized keep ratio from target.

    The value uses hard counts; the gradient flows through each sequence's
    mean soft weight (same straight-through contract as apply_ste). Padded
    positions are excluded from the denominators.
    """
    if not 0 < target_ratio <= 1:
        raise ContractError("target_ratio must lie in (0, 1]")
    if not masks:
        raise ContractError("selection_loss needs at least one mask")
    total: Tensor | None = None
    for mask in masks:
        soft_ratio = ad.scale(ad.mean_all(mask.soft), mask.n / mask.valid_count)
        st_ratio = ad.straight_through(soft_ratio, np.array([mask.keep_ratio]))
        sq = ad.square(ad.subtract(ad.constant(np.array([target_ratio])), st_ratio))
        total = sq if total is None else ad.add(total, sq)
    return ad.scale(total, 1.0 / len(masks))


def total_loss(task_loss: Tensor, select_loss: Tensor, lam: float) -> Tensor:
    """L = L_task + lambda * L_select."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    return ad.add(task_loss, ad.scale(select_loss, lam))
