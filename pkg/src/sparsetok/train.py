"""End-to-end training of the selection + task pipeline on needle datasets.

One run = one seed, one strategy, one dataset. Plain momentum-free gradient
descent; every stochastic choice (split, shuffles, Gumbel noise) draws from
labelled sub-streams of the run seed so reruns are bit-identical.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .data import Example, load_dataset
from .errors import ConfigError
from .metrics import MetricsRow, timing_enabled, write_metrics_csv
from .model import TaskPerformer, TaskPerformerConfig, init_parameters, save_checkpoint
from .multimodal import ContextModel, MultiModalSequence, sparsify_pairs
from .rng import SeededRng
from .selection import (KeepProbPredictor, SelectionMask, StrategyConfig,
                        apply_ste, compute_keep_probabilities, inference_k_for,
                        inference_rank_topk, reencode_positions, run_strategy,
                        selection_loss, total_loss)

# stream labels under the run seed
_L_INIT_TASK, _L_INIT_SCORER, _L_INIT_CONTEXT = 0, 1, 2
_L_SPLIT, _L_SHUFFLE, _L_NOISE = 3, 4, 5

CHANNELS = ("both", "visual", "textual")
POSITION_MODES = ("compact", "original")


@dataclass
class RunConfig:
    dataset: str
    strategy: StrategyConfig
    model: TaskPerformerConfig = field(default_factory=TaskPerformerConfig)
    lr: float = 0.1  # plain SGD needs this much; 1e-2 cannot move the toy model
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    eval_fraction: float = 0.2
    out_dir: str | None = None
    channel: str = "both"
    positions: str = "compact"

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ConfigError(f"unknown channel {self.channel!r}")
        if self.positions not in POSITION_MODES:
            raise ConfigError(f"unknown positions mode {self.positions!r}")
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in (0, 1)")

    def config_dict(self) -> dict:
        s, m = self.strategy, self.model
        return {
            "dataset": self.dataset, "strategy": s.kind, "k": s.k,
            "target_ratio": s.target_ratio, "tau": s.tau, "lambda": s.lam,
            "lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size,
            "seed": self.seed, "eval_fraction": self.eval_fraction,
            "channel": self.channel, "positions": self.positions,
            "d_model": m.d_model, "heads": m.heads, "layers": m.layers,
            "max_len": m.max_len, "num_classes": m.num_classes, "ff_mult": m.ff_mult,
        }


class Pipeline:
    """The trainable pieces of one run: task model, and if the strategy is
    learnable, the scorer (plus the context model in multimodal runs)."""

    def __init__(self, cfg: RunConfig, header: dict):
        d = header["d"]
        self.multimodal = bool(header["multimodal"]) and cfg.channel == "both"
        self.cfg = cfg
        model_cfg = replace(cfg.model, d_in=d, num_classes=header["num_classes"])
        rng = SeededRng(cfg.seed)
        std = model_cfg.init_std
        self.task = init_parameters(model_cfg, rng.split(_L_INIT_TASK))
        self.needs_scorer = cfg.strategy.kind != "uniform_fixed"
        self.scorer = (KeepProbPredictor(d).init(rng.split(_L_INIT_SCORER), stddev=std)
                       if self.needs_scorer else None)
        self.context = (ContextModel(d).init(rng.split(_L_INIT_CONTEXT), stddev=std)
                        if self.multimodal else None)

    def parameters(self) -> list[Parameter]:
        out = list(self.task.parameters())
        if self.scorer is not None:
            out += self.scorer.parameters()
        if self.context is not None:
            out += self.context.parameters()
        return out

    def _positions(self, tape: Tape, mask: SelectionMask) -> Tensor:
        table = tape.param(self.task.pos_table)
        if self.cfg.positions == "compact":
            return reencode_positions(mask, table)
        return ad.gather_rows(table, mask.kept_indices)  # naive: keep original rows

    def _channel_tokens(self, ex: Example) -> np.ndarray:
        if self.cfg.channel == "textual":
            if ex.textual_tokens is None:
                raise ConfigError("channel=textual requires a multimodal dataset")
            return ex.textual_tokens
        return ex.tokens

    def _select(self, tape: Tape, scores, noise_rng: SeededRng | None) -> SelectionMask:
        strategy = self.cfg.strategy
        if noise_rng is None:  # inference: rank keep probabilities, no noise
            return inference_rank_topk(scores, inference_k_for(strategy, scores.valid_count))
        return run_strategy(scores, strategy, noise_rng)

    def forward_example(self, tape: Tape, ex: Example,
                        noise_rng: SeededRng | None) -> tuple[Tensor, SelectionMask]:
        """Class logits and the selection mask; noise_rng None = inference path."""
        strategy = self.cfg.strategy
        if self.multimodal:
            seq = MultiModalSequence(
                visual=ad.constant(ex.tokens), textual=ad.constant(ex.textual_tokens),
                pad_mask_visual=np.zeros(ex.tokens.shape[0], dtype=bool),
                pad_mask_textual=np.zeros(ex.tokens.shape[0], dtype=bool),
                n_visual=ex.tokens.shape[0], n_textual=ex.textual_tokens.shape[0])
            u = self.context.fuse(tape, seq)
            scores = compute_keep_probabilities(tape, u, self.scorer)
            mask = self._select(tape, scores, noise_rng)
            kept_v = apply_ste(seq.visual, mask)
            kept_w = apply_ste(seq.textual, mask)
            pos = self._positions(tape, mask)
            tokens = ad.concat_rows(kept_v, kept_w)
            positions = ad.concat_rows(pos, pos)  # shared table, per-stream re-encoding
            logits = self.task.forward(tape, tokens, positions)
            return logits, mask

        tokens = ad.constant(self._channel_tokens(ex))
        if strategy.kind == "uniform_fixed":
            from .selection import uniform_fixed_select
            mask = uniform_fixed_select(tokens.shape[0], strategy.k)
        else:
            scores = compute_keep_probabilities(tape, tokens, self.scorer)
            mask = self._select(tape, scores, noise_rng)
        kept = apply_ste(tokens, mask)
        logits = self.task.forward(tape, kept, self._positions(tape, mask))
        return logits, mask


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    pipeline: Pipeline
    metrics_path: str | None = None
    checkpoint_path: str | None = None

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]


def _recall(ex: Example, mask: SelectionMask, channel: str, multimodal_run: bool) -> float:
    if multimodal_run:
        truth = set(ex.informative_indices.tolist())
        truth |= set(ex.textual_informative_indices.tolist())
    elif channel == "textual":
        truth = set(ex.textual_informative_indices.tolist())
    else:
        truth = set(ex.informative_indices.tolist())
    if not truth:
        return 1.0
    kept = set(mask.kept_indices.tolist())
    return len(truth & kept) / len(truth)


def evaluate(pipeline: Pipeline, examples: list[Example]) -> tuple[float, float]:
    """(accuracy, selection recall) on the noise-free inference path.

    The tape is never entered, so nothing is recorded: evaluation is a pure
    forward pass.
    """
    correct = 0
    recall_sum = 0.0
    tape = Tape()
    for ex in examples:
        logits, mask = pipeline.forward_example(tape, ex, noise_rng=None)
        correct += int(np.argmax(logits.data) == ex.label)
        recall_sum += _recall(ex, mask, pipeline.cfg.channel, pipeline.multimodal)
    return correct / len(examples), recall_sum / len(examples)


def keep_fraction_of(strategy: StrategyConfig, n: int) -> float:
    if strategy.kind == "ratio_controlled":
        return strategy.target_ratio
    return strategy.k / n


def k_for_fraction(fraction: float, n: int) -> int:
    """Keep-fraction to token budget: K = max(1, round(fraction * n))."""
    return max(1, min(n, round(fraction * n)))


def train_run(cfg: RunConfig) -> TrainResult:
    """Train per cfg; returns per-epoch metrics and writes artifacts if out_dir set."""
    examples, header = load_dataset(cfg.dataset)
    if not examples:
        raise ConfigError(f"dataset {cfg.dataset} has no examples")
    if cfg.channel == "textual" and not header["multimodal"]:
        raise ConfigError("channel=textual requires a multimodal dataset")
    n_tokens = header["n"]
    strategy = cfg.strategy
    if strategy.k is not None and strategy.k > n_tokens:
        raise ConfigError(f"K={strategy.k} exceeds sequence length {n_tokens}")

    pipeline = Pipeline(cfg, header)
    params = pipeline.parameters()
    run_rng = SeededRng(cfg.seed)

    perm = run_rng.split(_L_SPLIT).permutation(len(examples))
    eval_count = max(1, round(len(examples) * cfg.eval_fraction))
    train_idx = perm[:-eval_count]
    eval_idx = perm[-eval_count:]
    train_set = [examples[i] for i in train_idx]
    eval_set = [examples[i] for i in eval_idx]

    needs_select_loss = strategy.kind == "ratio_controlled" and strategy.lam > 0
    rows: list[MetricsRow] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = run_rng.split(_L_SHUFFLE, epoch).permutation(len(train_set))
        loss_sum = 0.0
        ratio_sum = 0.0
        ratio_count = 0
        for batch_no, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            noise_rng = run_rng.split(_L_NOISE, epoch, batch_no)
            with Tape() as tape:
                ce_sum: Tensor | None = None
                masks: list[SelectionMask] = []
                for ex in batch:
                    logits, mask = pipeline.forward_example(tape, ex, noise_rng)
                    ce = ad.cross_entropy_loss(logits, ex.label)
                    ce_sum = ce if ce_sum is None else ad.add(ce_sum, ce)
                    masks.append(mask)
                task_loss = ad.scale(ce_sum, 1.0 / len(batch))
                if needs_select_loss:
                    sel = selection_loss(masks, strategy.target_ratio)
                    loss = total_loss(task_loss, sel, strategy.lam)
                else:
                    loss = task_loss
                tape.backward(loss)
                for p in params:
                    p.value = p.value - cfg.lr * tape.grad(p)
            loss_sum += loss.item() * len(batch)
            ratio_sum += sum(m.keep_ratio for m in masks)
            ratio_count += len(masks)
        accuracy, recall = evaluate(pipeline, eval_set)
        elapsed = time.perf_counter() - t0
        rows.append(MetricsRow(
            keep_fraction=keep_fraction_of(strategy, n_tokens),
            strategy=strategy.kind, tau=strategy.tau, lam=strategy.lam,
            seed=cfg.seed, epoch=epoch,
            train_loss=loss_sum / len(train_set),
            eval_accuracy=accuracy,
            mean_keep_ratio=ratio_sum / ratio_count,
            selection_recall=recall,
            wall_seconds=elapsed if timing_enabled() else 0.0,
        ))

    result = TrainResult(rows, pipeline)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        result.metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
        result.checkpoint_path = os.path.join(cfg.out_dir, "checkpoint.stkn")
        write_metrics_csv(result.metrics_path, rows, cfg.config_dict())
        save_checkpoint(result.checkpoint_path, params)
    return result
