"""Toy transformer classifier consuming sparsified token sequences.

Pre-norm encoder blocks, learnable positional embeddings assigned to the
compacted sequence, mean-pool head. Deterministic: no dropout — the only
training noise in the whole pipeline lives in the Gumbel selection.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import CapacityError, ContractError
from .rng import SeededRng

CHECKPOINT_MAGIC = b"STKN"
CHECKPOINT_VERSION = 1


@dataclass
class TaskPerformerConfig:
    d_in: int = 16
    d_model: int = 32
    heads: int = 2
    layers: int = 2
    max_len: int = 64
    num_classes: int = 4
    ff_mult: int = 4
    # 0.02 stalls under plain SGD at this scale; 0.2 trains reliably
    init_std: float = 0.2

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ContractError("d_model must be divisible by heads")


class MultiHeadAttention:
    """Bidirectional multi-head self-attention with a learned output bias."""

    def __init__(self, prefix: str, d: int, heads: int):
        self.d = d
        self.heads = heads
        self.dk = d // heads
        dk = self.dk
        p = Parameter
        self.wq = [p(f"{prefix}.h{h}.wq", np.zeros((d, dk))) for h in range(heads)]
        self.wk = [p(f"{prefix}.h{h}.wk", np.zeros((d, dk))) for h in range(heads)]
        self.wv = [p(f"{prefix}.h{h}.wv", np.zeros((d, dk))) for h in range(heads)]
        self.wo = [p(f"{prefix}.h{h}.wo", np.zeros((dk, d))) for h in range(heads)]
        self.bo = p(f"{prefix}.bias", np.zeros(d))

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for group in (self.wq, self.wk, self.wv, self.wo):
            out.extend(group)
        out.append(self.bo)
        return out

    def init(self, rng: SeededRng, stddev: float) -> None:
        for i, w in enumerate(self.wq + self.wk + self.wv + self.wo):
            w.value = rng.split(i).normals(w.value.size, 0.0, stddev).reshape(w.shape)

    def forward(self, tape: ad.Tape, x: Tensor, attn_bias: np.ndarray | None = None) -> Tensor:
        """Attention over x [n, d]; attn_bias (constant) masks padded keys."""
        scale = 1.0 / np.sqrt(self.dk)
        mixed: Tensor | None = None
        for h in range(self.heads):
            q = ad.matmul(x, tape.param(self.wq[h]))
            k = ad.matmul(x, tape.param(self.wk[h]))
            v = ad.matmul(x, tape.param(self.wv[h]))
            logits = ad.scale(ad.matmul(q, ad.transpose(k)), scale)
            if attn_bias is not None:
                logits = ad.add(logits, ad.constant(attn_bias))
            probs = ad.softmax_with_temperature(logits, axis=1, tau=1.0)
            head = ad.matmul(ad.matmul(probs, v), tape.param(self.wo[h]))
            mixed = head if mixed is None else ad.add(mixed, head)
        return ad.add(mixed, tape.param(self.bo))


class AttentionBlock:
    """One pre-norm encoder block: multi-head self-attention + feed-forward."""

    def __init__(self, prefix: str, d: int, heads: int, ff_mult: int):
        ff = ff_mult * d
        p = Parameter
        self.ln1_g = p(f"{prefix}.ln1.gain", np.ones(d))
        self.ln1_b = p(f"{prefix}.ln1.bias", np.zeros(d))
        self.attn = MultiHeadAttention(f"{prefix}.attn", d, heads)
        self.ln2_g = p(f"{prefix}.ln2.gain", np.ones(d))
        self.ln2_b = p(f"{prefix}.ln2.bias", np.zeros(d))
        self.ff_w1 = p(f"{prefix}.ff.w1", np.zeros((d, ff)))
        self.ff_b1 = p(f"{prefix}.ff.b1", np.zeros(ff))
        self.ff_w2 = p(f"{prefix}.ff.w2", np.zeros((ff, d)))
        self.ff_b2 = p(f"{prefix}.ff.b2", np.zeros(d))

    def parameters(self) -> list[Parameter]:
        return ([self.ln1_g, self.ln1_b] + self.attn.parameters()
                + [self.ln2_g, self.ln2_b,
                   self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2])

    def init(self, rng: SeededRng, stddev: float) -> None:
        self.attn.init(rng.split(0), stddev)
        for i, w in enumerate((self.ff_w1, self.ff_w2)):
            w.value = rng.split(1, i).normals(w.value.size, 0.0, stddev).reshape(w.shape)

    def forward(self, tape: ad.Tape, x: Tensor, attn_bias: np.ndarray | None = None) -> Tensor:
        h = ad.layer_norm(x, tape.param(self.ln1_g), tape.param(self.ln1_b))
        x = ad.add(x, self.attn.forward(tape, h, attn_bias))
        h = ad.layer_norm(x, tape.param(self.ln2_g), tape.param(self.ln2_b))
        ff = ad.matmul(ad.gelu(ad.add(ad.matmul(h, tape.param(self.ff_w1)),
                                      tape.param(self.ff_b1))),
                       tape.param(self.ff_w2))
        return ad.add(x, ad.add(ff, tape.param(self.ff_b2)))


class TaskPerformer:
    """Sequence classifier M: input projection, positions, blocks, mean pool."""

    def __init__(self, config: TaskPerformerConfig):
        self.config = config
        c = config
        self.in_w = Parameter("task.in.w", np.zeros((c.d_in, c.d_model)))
        self.in_b = Parameter("task.in.b", np.zeros(c.d_model))
        self.pos_table = Parameter("task.pos_table", np.zeros((c.max_len, c.d_model)))
        self.null_token = Parameter("task.null_token", np.zeros(c.d_in))
        self.blocks = [AttentionBlock(f"task.block{i}", c.d_model, c.heads, c.ff_mult)
                       for i in range(c.layers)]
        self.ln_f_g = Parameter("task.lnf.gain", np.ones(c.d_model))
        self.ln_f_b = Parameter("task.lnf.bias", np.zeros(c.d_model))
        self.head_w = Parameter("task.head.w", np.zeros((c.d_model, c.num_classes)))
        self.head_b = Parameter("task.head.b", np.zeros(c.num_classes))

    def parameters(self) -> list[Parameter]:
        out = [self.in_w, self.in_b, self.pos_table, self.null_token]
        for b in self.blocks:
            out.extend(b.parameters())
        out += [self.ln_f_g, self.ln_f_b, self.head_w, self.head_b]
        return out

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def positional_rows(self, tape: ad.Tape) -> Tensor:
        return tape.param(self.pos_table)

    def forward(self, tape: ad.Tape, kept_tokens: Tensor, positional_rows: Tensor) -> Tensor:
        """Class logits [C] for a compacted sequence [K', d_in].

        K' = 0 falls back to the learned null token at positional row 0, so an
        empty selection still produces finite, trainable logits.
        """
        kp = kept_tokens.shape[0]
        if kp > self.config.max_len:
            raise CapacityError(f"sequence of {kp} exceeds max_len {self.config.max_len}")
        if kp == 0:
            kept_tokens = ad.reshape(tape.param(self.null_token), (1, self.config.d_in))
            positional_rows = ad.gather_rows(tape.param(self.pos_table), np.array([0]))
            kp = 1
        x = ad.add(ad.matmul(kept_tokens, tape.param(self.in_w)), tape.param(self.in_b))
        x = ad.add(x, positional_rows)
        for block in self.blocks:
            x = block.forward(tape, x)
        x = ad.layer_norm(x, tape.param(self.ln_f_g), tape.param(self.ln_f_b))
        pooled = ad.matmul(ad.constant(np.full((1, kp), 1.0 / kp)), x)
        logits = ad.add(ad.matmul(pooled, tape.param(self.head_w)), tape.param(self.head_b))
        return ad.reshape(logits, (self.config.num_classes,))


def init_parameters(config: TaskPerformerConfig, rng: SeededRng,
                    stddev: float | None = None) -> TaskPerformer:
    """Fresh TaskPerformer: projection weights ~ N(0, stddev), biases zero,
    norm gains one; bit-identical for identical seeds."""
    if stddev is None:
        stddev = config.init_std
    model = TaskPerformer(config)
    model.in_w.value = rng.split(0).normals(model.in_w.value.size, 0.0, stddev).reshape(model.in_w.shape)
    model.pos_table.value = rng.split(1).normals(model.pos_table.value.size, 0.0, stddev).reshape(model.pos_table.shape)
    model.null_token.value = rng.split(2).normals(model.null_token.value.size, 0.0, stddev)
    for i, block in enumerate(model.blocks):
        block.init(rng.split(3, i), stddev)
    model.head_w.value = rng.split(4).normals(model.head_w.value.size, 0.0, stddev).reshape(model.head_w.shape)
    return model


# ---------------------------------------------------------------------------
# checkpoint format: "STKN", version u32, then per parameter
#   name_len u32 | name utf-8 | rank u32 | dims u32... | payload f64 LE

def save_checkpoint(path: str, parameters: list[Parameter]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for p in parameters:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.value.ndim))
            for dim in p.value.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        while True:
            raw = fh.read(4)
            if not raw:
                break
            (name_len,) = struct.unpack("<I", raw)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            payload = fh.read(8 * count)
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out


def restore_parameters(parameters: list[Parameter], arrays: dict[str, np.ndarray]) -> None:
    for p in parameters:
        if p.name not in arrays:
            raise ContractError(f"checkpoint is missing parameter {p.name}")
        if arrays[p.name].shape != p.value.shape:
            raise ContractError(f"checkpoint shape mismatch for {p.name}")
        p.value = arrays[p.name].astype(np.float64)
