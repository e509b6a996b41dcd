import collections

import numpy as np
import pytest

from sparsetok.data import (NeedleGenerator, NeedleSpec, generate_dataset,
                            load_dataset, make_prototypes, nearest_prototype_oracle,
                            write_dataset)
from sparsetok.errors import ParseError, SchemaError
from sparsetok.rng import SeededRng


def test_generation_is_deterministic():
    spec = NeedleSpec()
    a = generate_dataset(spec, 20, seed=3)
    b = generate_dataset(spec, 20, seed=3)
    for ea, eb in zip(a, b):
        assert ea.label == eb.label
        assert np.array_equal(ea.tokens, eb.tokens)
        assert np.array_equal(ea.informative_indices, eb.informative_indices)


def test_prototype_separation():
    protos = make_prototypes(SeededRng(1).split(1), 4, 16)
    assert np.allclose(np.linalg.norm(protos, axis=1), 1.0)
    cos = protos @ protos.T
    assert cos[~np.eye(4, dtype=bool)].max() <= 0.3


def test_noiseless_informative_tokens_recover_label():
    spec = NeedleSpec(noise_std=0.0)
    gen = NeedleGenerator(spec, 5)
    for i in range(40):
        ex = gen.example(i)
        for idx in ex.informative_indices:
            # with distractors silenced, any informative token alone decides
            assert int(np.argmax(gen.prototypes @ ex.tokens[idx])) == ex.label


def test_oracle_ceiling_at_default_noise():
    spec = NeedleSpec()
    gen = NeedleGenerator(spec, 1)
    examples = generate_dataset(spec, 2000, seed=1)
    acc = np.mean([nearest_prototype_oracle(ex, gen.prototypes) == ex.label
                   for ex in examples])
    assert acc >= 0.97


def test_label_balance():
    examples = generate_dataset(NeedleSpec(), 2000, seed=9)
    counts = collections.Counter(ex.label for ex in examples)
    for c in range(4):
        assert abs(counts[c] / 2000 - 0.25) <= 0.05


def test_multimodal_channels_disjoint_and_split():
    spec = NeedleSpec(multimodal=True, noise_std=0.0)
    examples = generate_dataset(spec, 50, seed=2)
    gen = NeedleGenerator(spec, 2)
    for ex in examples:
        assert ex.textual_tokens is not None
        overlap = set(ex.informative_indices) & set(ex.textual_informative_indices)
        assert not overlap
        # visual channel encodes label // 2, textual label % 2
        v_mean = ex.tokens[ex.informative_indices].mean(axis=0)
        assert int(np.argmax(gen.prototypes[:2] @ v_mean)) == ex.label // 2
        t_mean = ex.textual_tokens[ex.textual_informative_indices].mean(axis=0)
        assert int(np.argmax(gen.textual_prototypes[:2] @ t_mean)) == ex.label % 2


def test_multimodal_channel_bits_recoverable_at_default_noise():
    spec = NeedleSpec(multimodal=True)
    examples = generate_dataset(spec, 400, seed=2)
    gen = NeedleGenerator(spec, 2)
    v_ok = t_ok = 0
    for ex in examples:
        v_mean = ex.tokens[ex.informative_indices].mean(axis=0)
        v_ok += int(np.argmax(gen.prototypes[:2] @ v_mean)) == ex.label // 2
        t_mean = ex.textual_tokens[ex.textual_informative_indices].mean(axis=0)
        t_ok += int(np.argmax(gen.textual_prototypes[:2] @ t_mean)) == ex.label % 2
    assert v_ok / 400 >= 0.9
    assert t_ok / 400 >= 0.9


def test_multimodal_needs_even_classes():
    with pytest.raises(SchemaError):
        NeedleSpec(multimodal=True, num_classes=3)


def test_too_many_informative_rejected():
    with pytest.raises(SchemaError):
        NeedleSpec(n=4, num_informative=3, multimodal=True, textual_informative=2)


class TestRoundTrip:
    def test_exact_field_round_trip(self, tmp_path):
        spec = NeedleSpec(multimodal=True)
        examples = generate_dataset(spec, 10, seed=7)
        path = tmp_path / "data.jsonl"
        write_dataset(examples, str(path), spec, 7)
        back, header = load_dataset(str(path))
        assert header["n"] == spec.n and header["multimodal"] is True
        assert len(back) == 10
        for a, b in zip(examples, back):
            assert a.id == b.id and a.label == b.label
            assert np.array_equal(a.tokens, b.tokens)
            assert np.array_equal(a.textual_tokens, b.textual_tokens)
            assert np.array_equal(a.informative_indices, b.informative_indices)
            assert np.array_equal(a.textual_informative_indices,
                                  b.textual_informative_indices)

    def test_write_is_byte_deterministic(self, tmp_path):
        spec = NeedleSpec()
        examples = generate_dataset(spec, 5, seed=3)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(examples, str(p1), spec, 3)
        write_dataset(examples, str(p2), spec, 3)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_dataset_with_header(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        write_dataset([], str(path), NeedleSpec(), 1)
        examples, header = load_dataset(str(path))
        assert examples == []
        assert header["num_classes"] == 4


class TestSchemaValidation:
    def header_line(self):
        return ('{"format_version":1,"n":4,"d":2,"num_classes":2,'
                '"multimodal":false,"seed":1}')

    def record(self, informative="[1,2]", tokens=None, label=0):
        tokens = tokens or "[[1,1],[2,2],[3,3],[4,4]]"
        return f'{{"id":0,"label":{label},"informative_indices":{informative},"tokens":{tokens}}}'

    def write(self, tmp_path, *lines):
        path = tmp_path / "d.jsonl"
        path.write_text("\n".join(lines) + "\n")
        return str(path)

    def test_unsorted_informative_rejected(self, tmp_path):
        path = self.write(tmp_path, self.header_line(), self.record(informative="[2,1]"))
        with pytest.raises(SchemaError, match="line 2"):
            load_dataset(path)

    def test_width_mismatch_rejected(self, tmp_path):
        path = self.write(tmp_path, self.header_line(),
                          self.record(tokens="[[1],[2],[3],[4]]"))
        with pytest.raises(SchemaError, match="line 2"):
            load_dataset(path)

    def test_label_out_of_range(self, tmp_path):
        path = self.write(tmp_path, self.header_line(), self.record(label=5))
        with pytest.raises(SchemaError, match="line 2"):
            load_dataset(path)

    def test_malformed_line_names_line_number(self, tmp_path):
        path = self.write(tmp_path, self.header_line(), self.record(),
                          '{"id": 1, not json')
        with pytest.raises(ParseError, match="line 3"):
            load_dataset(path)

    def test_missing_header_key(self, tmp_path):
        path = self.write(tmp_path, '{"format_version":1,"n":4}')
        with pytest.raises(SchemaError, match="header"):
            load_dataset(path)

    def test_wrong_format_version(self, tmp_path):
        header = self.header_line().replace('"format_version":1', '"format_version":9')
        path = self.write(tmp_path, header)
        with pytest.raises(SchemaError):
            load_dataset(path)
