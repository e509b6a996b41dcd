import numpy as np
import pytest

from sparsetok import autodiff as ad
from sparsetok.autodiff import Tape
from sparsetok.errors import CapacityError, ContractError
from sparsetok.model import (TaskPerformer, TaskPerformerConfig, init_parameters,
                             load_checkpoint, restore_parameters, save_checkpoint)
from sparsetok.rng import SeededRng

SMALL = TaskPerformerConfig(d_in=5, d_model=8, heads=2, layers=1, max_len=10,
                            num_classes=3, ff_mult=2)


def test_init_deterministic_under_seed():
    a = init_parameters(SMALL, SeededRng(5))
    b = init_parameters(SMALL, SeededRng(5))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        assert np.array_equal(pa.value, pb.value)


def test_zero_head_gives_uniform_logits_and_ln4_loss():
    cfg = TaskPerformerConfig(d_in=4, d_model=8, heads=2, layers=1, max_len=8,
                              num_classes=4, ff_mult=2)
    model = init_parameters(cfg, SeededRng(1))
    model.head_w.value[:] = 0.0
    model.head_b.value[:] = 0.0
    with Tape() as tape:
        tokens = ad.constant(SeededRng(2).normals(12).reshape(3, 4))
        pos = ad.gather_rows(tape.param(model.pos_table), np.arange(3))
        logits = model.forward(tape, tokens, pos)
        loss = ad.cross_entropy_loss(logits, 0)
    assert np.allclose(logits.data, logits.data[0])
    assert abs(loss.item() - 1.3862943611198906) < 1e-12


def test_default_parameter_count_is_frozen():
    # in 16*32+32, pos 64*32, null 16, per block 12608, final ln 64, head 132
    model = TaskPerformer(TaskPerformerConfig())
    per_block = (2 * 32          # ln1
                 + 2 * (3 * 32 * 16 + 16 * 32)   # two heads of q,k,v,o
                 + 32            # attention output bias
                 + 2 * 32        # ln2
                 + 32 * 128 + 128 + 128 * 32 + 32)  # feed-forward
    expected = (16 * 32 + 32) + 64 * 32 + 16 + 2 * per_block + 2 * 32 + (32 * 4 + 4)
    assert model.parameter_count() == expected == 28020


def test_forward_is_deterministic():
    model = init_parameters(SMALL, SeededRng(3))
    tokens_np = SeededRng(4).normals(20).reshape(4, 5)

    def run():
        with Tape() as tape:
            tokens = ad.constant(tokens_np)
            pos = ad.gather_rows(tape.param(model.pos_table), np.arange(4))
            return model.forward(tape, tokens, pos).data.copy()

    assert np.array_equal(run(), run())


def test_positional_sensitivity():
    model = init_parameters(SMALL, SeededRng(6), stddev=0.3)
    tokens_np = SeededRng(7).normals(20).reshape(4, 5)
    perm = np.array([2, 0, 3, 1])

    def logits_for(tok):
        with Tape() as tape:
            pos = ad.gather_rows(tape.param(model.pos_table), np.arange(4))
            return model.forward(tape, ad.constant(tok), pos).data.copy()

    assert not np.allclose(logits_for(tokens_np), logits_for(tokens_np[perm]))


def test_empty_selection_uses_null_token():
    model = init_parameters(SMALL, SeededRng(8))
    with Tape() as tape:
        empty = ad.Tensor(np.zeros((0, 5)))
        pos = ad.Tensor(np.zeros((0, 8)))
        logits = model.forward(tape, empty, pos)
    assert logits.shape == (3,)
    assert np.all(np.isfinite(logits.data))


def test_null_token_is_trainable_through_empty_path():
    model = init_parameters(SMALL, SeededRng(8))
    with Tape() as tape:
        logits = model.forward(tape, ad.Tensor(np.zeros((0, 5))),
                               ad.Tensor(np.zeros((0, 8))))
        tape.backward(ad.cross_entropy_loss(logits, 1))
        assert np.abs(tape.grad(model.null_token)).max() > 0


def test_capacity_error():
    model = init_parameters(SMALL, SeededRng(9))
    with Tape() as tape:
        tokens = ad.constant(np.zeros((11, 5)))
        pos = ad.constant(np.zeros((11, 8)))
        with pytest.raises(CapacityError):
            model.forward(tape, tokens, pos)


def test_input_token_gradient_matches_finite_differences():
    model = init_parameters(SMALL, SeededRng(10), stddev=0.4)
    point = SeededRng(11).normals(15).reshape(3, 5)

    def build(x):
        tape = ad.active_tape() or Tape()
        pos = ad.gather_rows(tape.param(model.pos_table), np.arange(3))
        return ad.cross_entropy_loss(model.forward(tape, x, pos), 2)

    assert ad.finite_difference_check(build, point, 1e-5) <= 1e-4


def test_d_model_heads_divisibility():
    with pytest.raises(ContractError):
        TaskPerformerConfig(d_model=30, heads=4)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = init_parameters(SMALL, SeededRng(12))
        path = tmp_path / "model.stkn"
        save_checkpoint(str(path), model.parameters())
        arrays = load_checkpoint(str(path))
        for p in model.parameters():
            assert np.array_equal(arrays[p.name], p.value)
        # byte-identical re-serialization
        clone = init_parameters(SMALL, SeededRng(99))
        restore_parameters(clone.parameters(), arrays)
        path2 = tmp_path / "model2.stkn"
        save_checkpoint(str(path2), clone.parameters())
        assert path.read_bytes() == path2.read_bytes()

    def test_header_layout(self, tmp_path):
        model = init_parameters(SMALL, SeededRng(13))
        path = tmp_path / "m.stkn"
        save_checkpoint(str(path), model.parameters())
        raw = path.read_bytes()
        assert raw[:4] == b"STKN"
        assert int.from_bytes(raw[4:8], "little") == 1

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.stkn"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ContractError):
            load_checkpoint(str(path))

    def test_missing_parameter_rejected(self, tmp_path):
        model = init_parameters(SMALL, SeededRng(14))
        path = tmp_path / "m.stkn"
        save_checkpoint(str(path), model.parameters()[:-1])
        arrays = load_checkpoint(str(path))
        with pytest.raises(ContractError):
            restore_parameters(model.parameters(), arrays)
