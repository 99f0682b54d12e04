import numpy as np
import pytest

from statebench import formats as fm
from statebench import taskgen as tg
from statebench.errors import ConfigurationError

Z2 = tg.GroupSpec("cyclic", 2)
Z3 = tg.GroupSpec("cyclic", 3)
Z5 = tg.GroupSpec("cyclic", 5)
S3 = tg.GroupSpec("symmetric", 3)

PAPER_SAMPLE = tg.Sample(elements=(2, 1, 0, 3, 4), prefix_targets=(2, 3, 3, 1, 0))


def test_vocab_layout():
    v = fm.Vocabulary.for_group(Z5)
    assert (v.bos, v.sep, v.eos, v.pad) == (5, 6, 7, 8)
    assert v.size == 9
    assert v.element_token(4) == 4
    assert v.token_element(v.eos) is None
    assert v.token_element(3) == 3


def test_encode_outcome_paper_example():
    v = fm.Vocabulary.for_group(Z5)
    ex = fm.encode(PAPER_SAMPLE, "outcome", v)
    np.testing.assert_array_equal(ex.input_ids, [v.bos, 2, 1, 0, 3, 4, v.sep, 0])
    np.testing.assert_array_equal(ex.target_ids, [2, 1, 0, 3, 4, v.sep, 0, v.eos])
    np.testing.assert_array_equal(
        ex.loss_mask, [False] * 6 + [True, True]
    )


def test_encode_cot_paper_example():
    v = fm.Vocabulary.for_group(Z5)
    ex = fm.encode(PAPER_SAMPLE, "cot", v)
    np.testing.assert_array_equal(
        ex.input_ids, [v.bos, 2, 1, 0, 3, 4, v.sep, 2, 3, 3, 1, 0]
    )
    np.testing.assert_array_equal(
        ex.target_ids, [2, 1, 0, 3, 4, v.sep, 2, 3, 3, 1, 0, v.eos]
    )
    np.testing.assert_array_equal(ex.loss_mask, [False] * 6 + [True] * 6)


def test_encode_acot_paper_example():
    v = fm.Vocabulary.for_group(Z5)
    ex = fm.encode(PAPER_SAMPLE, "acot", v)
    # inputs carry only the raw elements: predictions are never fed back
    np.testing.assert_array_equal(ex.input_ids, [2, 1, 0, 3, 4])
    np.testing.assert_array_equal(ex.target_ids, [2, 3, 3, 1, 0])
    assert ex.loss_mask.all()


def test_encode_cot_identity_length2():
    v = fm.Vocabulary.for_group(Z3)
    sample = tg.Sample(elements=(0, 0), prefix_targets=(0, 0))
    ex = fm.encode(sample, "cot", v)
    np.testing.assert_array_equal(ex.target_ids[ex.loss_mask], [0, 0, v.eos])


def test_supervised_counts_match_formulas():
    v = fm.Vocabulary.for_group(Z3)
    for n in range(2, 9):
        seq = tuple(int(x) for x in np.random.default_rng(n).integers(0, 3, n))
        sample = tg.Sample(elements=seq, prefix_targets=tuple(tg.prefix_targets(Z3, seq)))
        for fmt in fm.FORMATS:
            ex = fm.encode(sample, fmt, v)
            assert int(ex.loss_mask.sum()) == fm.supervised_count(fmt, n)
            assert len(ex.input_ids) == fm.encoded_length(fmt, n)


def test_encode_split_matches_scalar_encode():
    train, _ = tg.build_dataset(tg.DatasetSpec(Z3, 5, "uniform", 30, seed=8))
    v = fm.Vocabulary.for_group(Z3)
    for fmt in fm.FORMATS:
        batch = fm.encode_split(train, fmt, v)
        for i in range(len(train)):
            ex = fm.encode(train.sample(i), fmt, v)
            t = len(ex.input_ids)
            np.testing.assert_array_equal(batch.input_ids[i, :t], ex.input_ids)
            np.testing.assert_array_equal(batch.target_ids[i, :t], ex.target_ids)
            np.testing.assert_array_equal(batch.loss_mask[i, :t], ex.loss_mask)
            assert not batch.loss_mask[i, t:].any()
            assert (batch.input_ids[i, t:] == v.pad).all()


def test_no_supervised_position_targets_pad():
    train, _ = tg.build_dataset(tg.DatasetSpec(Z2, 6, "uniform", 40, seed=9))
    v = fm.Vocabulary.for_group(Z2)
    for fmt in fm.FORMATS:
        batch = fm.encode_split(train, fmt, v)
        assert (batch.target_ids[batch.loss_mask] != v.pad).all()


def test_decode_answer_rules():
    v = fm.Vocabulary.for_group(Z5)
    assert fm.decode_answer([0, v.eos], "outcome", v) == 0
    assert fm.decode_answer([v.sep], "outcome", v) is fm.MALFORMED
    assert fm.decode_answer([2, 3, 1, v.eos], "cot", v) == 1
    assert fm.decode_answer([2, 3, 1], "cot", v) == 1  # missing EOS: last emitted
    assert fm.decode_answer([v.eos], "cot", v) is fm.MALFORMED
    assert fm.decode_answer([2, 3, v.sep, v.eos], "cot", v) is fm.MALFORMED
    assert fm.decode_answer([1, 4, 2], "acot", v) == 2
    assert fm.decode_answer([1, 4, v.pad], "acot", v) is fm.MALFORMED
    assert fm.decode_answer([], "cot", v) is fm.MALFORMED


def test_decode_roundtrip_teacher_targets():
    rng = np.random.default_rng(10)
    for group in (Z2, Z5, S3):
        v = fm.Vocabulary.for_group(group)
        cap = tg.train_capacity(group, "uniform", 6)
        train, _ = tg.build_dataset(
            tg.DatasetSpec(group, 6, "uniform", min(cap, 3400), seed=11)
        )
        for fmt in fm.FORMATS:
            batch = fm.encode_split(train, fmt, v)
            for i in range(len(train)):
                region = batch.target_ids[i][batch.loss_mask[i]]
                got = fm.decode_answer(region, fmt, v)
                assert got == train.sample(i).final_target


def test_chance_rates():
    assert fm.chance_rate("outcome", Z2) == 0.5
    assert fm.chance_rate("cot", Z5) == 0.2
    assert fm.chance_rate("acot", tg.GroupSpec("symmetric", 5)) == 1 / 120


def test_random_guessing_hits_chance_rate():
    # uniform guesses over group elements: accuracy ~ 1/m within 3 sigma
    rng = np.random.default_rng(12)
    group = Z5
    v = fm.Vocabulary.for_group(group)
    train, _ = tg.build_dataset(tg.DatasetSpec(group, 5, "uniform", 1000, seed=13))
    hits = 0
    for i in range(len(train)):
        n = int(train.lengths[i])
        guesses = rng.integers(0, group.order, size=fm.supervised_count("cot", n))
        if fm.decode_answer(guesses, "cot", v) == train.sample(i).final_target:
            hits += 1
    p = fm.chance_rate("cot", group)
    sigma = (p * (1 - p) / len(train)) ** 0.5
    assert abs(hits / len(train) - p) < 3 * sigma


def test_unknown_format_rejected():
    v = fm.Vocabulary.for_group(Z2)
    sample = tg.Sample(elements=(0, 1), prefix_targets=(0, 1))
    with pytest.raises(ConfigurationError):
        fm.encode(sample, "scratchpad", v)


def test_format_table_lists_all_formats():
    text = fm.format_table(Z5)
    for fmt in fm.FORMATS:
        assert fmt in text
    assert "PAD=8" in text
