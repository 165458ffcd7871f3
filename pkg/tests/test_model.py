import math

import numpy as np
import pytest

from phrasemt import model as md, numerics as nm
from phrasemt.data import BOS_ID, DOLLAR_ID, EOS_ID, NUM_RESERVED
from phrasemt.model import ModelConfig, ModelParams
from phrasemt.numerics import Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    with nm.precision(64, verify=True):
        yield


def tiny_config(**overrides):
    base = dict(
        src_vocab_size=NUM_RESERVED + 3,
        tgt_vocab_size=NUM_RESERVED + 3,
        d=8,
        l_src=2,
        l_tgt=2,
        encoder_layers=1,
        tgt_encoder_layers=1,
        decoder_layers=1,
        heads=2,
        dropout=0.0,
        max_decode_len=10,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, **overrides):
    return ModelParams(tiny_config(**overrides), np.random.default_rng(seed))


def toks(*ids):
    return [NUM_RESERVED + i for i in ids]


# ---------------------------------------------------------------------------
# config and parameter registry
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(md.ModelError):
        tiny_config(l_src=0).validate()
    with pytest.raises(md.ModelError):
        tiny_config(max_decode_len=0).validate()
    with pytest.raises(md.ModelError):
        tiny_config(d=6, heads=4).validate()
    with pytest.raises(md.ModelError):
        tiny_config(src_vocab_size=3).validate()


def test_named_parameters_register_each_tensor_once():
    params = tiny_model()
    named = params.named_parameters()
    seen = set()
    for name, t in named.items():
        assert id(t) not in seen, f"{name} registered twice"
        seen.add(id(t))
        assert t.requires_grad
    # Spot checks that all components are present.
    assert any(n.startswith("sent0") for n in named)
    assert any(n.startswith("span") for n in named)
    assert any(n.startswith("dec") for n in named)
    assert "out_w" in named


# ---------------------------------------------------------------------------
# span table
# ---------------------------------------------------------------------------


def test_span_enumeration_t3_l2():
    assert md.admissible_spans(3, 2) == [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2)]
    assert md.span_count(3, 2) == 5


def test_span_enumeration_single_token():
    assert md.admissible_spans(1, 4) == [(0, 0)]


def test_span_count_formula():
    # T=5, L=3: 3+3+3+2+1
    assert md.span_count(5, 3) == 12
    assert len(md.admissible_spans(5, 3)) == 12


def test_encode_source_phrases_builds_full_table():
    params = tiny_model()
    table = md.encode_source_phrases(params, toks(0, 1, 2))
    assert table.source_len == 3
    assert table.spans == md.admissible_spans(3, 2)
    assert table.vectors.shape == (5, 8)


def test_encode_source_rejects_empty_and_out_of_range():
    params = tiny_model()
    with pytest.raises(md.ModelError):
        md.encode_source_phrases(params, [])
    with pytest.raises(md.ModelError):
        md.encode_source_phrases(params, [999])


def test_span_vectors_independent_of_grouping():
    # The batched-by-length construction must match encoding each span alone.
    from phrasemt.blocks import bi_encode, encode_spans

    params = tiny_model(seed=3)
    src = toks(0, 1, 2, 0)
    table = md.encode_source_phrases(params, src)

    ids = np.asarray(src)
    emb = nm.take(params.src_embed, ids.reshape(1, -1))
    states = nm.reshape(bi_encode(params.sent_encoder, emb), (len(src), 8))
    for pos, (i, j) in enumerate(table.spans):
        single = encode_spans(params.span_encoder, nm.reshape(states[i : j + 1, :], (1, j - i + 1, 8)))
        np.testing.assert_allclose(table.vectors.data[pos], single.data[0], atol=1e-12)


# ---------------------------------------------------------------------------
# target prefixes
# ---------------------------------------------------------------------------


def test_prefix_states_count_and_start_state():
    params = tiny_model()
    states = md.encode_target_prefixes(params, [])
    assert states.shape == (1, 8)
    states = md.encode_target_prefixes(params, toks(0, 1, 2))
    assert states.shape == (4, 8)


def test_prefix_states_are_causal():
    params = tiny_model(seed=1)
    base = md.encode_target_prefixes(params, toks(0, 1, 2)).data
    poked = md.encode_target_prefixes(params, toks(0, 2, 2)).data
    np.testing.assert_array_equal(base[:2], poked[:2])
    assert np.abs(base[2:] - poked[2:]).max() > 0


def test_prefix_states_ignore_segmentation():
    # States are a function of the flat prefix; there is no segmentation
    # input to vary, which is itself the guarantee. Feeding the same
    # prefix twice must be bit-identical.
    params = tiny_model(seed=2)
    a = md.encode_target_prefixes(params, toks(1, 0)).data
    b = md.encode_target_prefixes(params, toks(1, 0)).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_attention_single_span_gets_weight_one():
    params = tiny_model()
    table = md.encode_source_phrases(params, toks(1))
    assert len(table) == 1
    state = md.encode_target_prefixes(params, [])
    att = md.attention_state(params, state[0, :], table, prefix_len=0)
    assert att.weights.shape == (1,)
    assert att.weights[0] == pytest.approx(1.0)
    assert att.vector.shape == (8,)


def test_attention_weights_sum_to_one():
    params = tiny_model(seed=5)
    table = md.encode_source_phrases(params, toks(0, 1, 2, 0, 1))
    states = md.encode_target_prefixes(params, toks(2, 2))
    _, weights = md.attend(params, states, table)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)


def test_duplicate_span_vector_splits_weight():
    params = tiny_model(seed=6)
    table = md.encode_source_phrases(params, toks(0, 1))
    dup = md.PhraseEncodingTable(
        source_len=table.source_len,
        spans=table.spans + [table.spans[0]],
        vectors=nm.concat([table.vectors, table.vectors[0:1, :]], axis=0),
    )
    state = md.encode_target_prefixes(params, toks(2))
    att = md.attention_state(params, state[1, :], dup, prefix_len=1)
    assert att.weights[0] == pytest.approx(att.weights[-1], rel=1e-9)


def test_attention_depends_only_on_prefix_not_segmentation():
    # Identical prefix states in a batch yield bit-identical rows.
    params = tiny_model(seed=7)
    table = md.encode_source_phrases(params, toks(0, 1, 2))
    states = md.encode_target_prefixes(params, toks(1, 1))
    pair = nm.take(states, np.array([2, 2]))
    a, w = md.attend(params, pair, table)
    np.testing.assert_array_equal(a.data[0], a.data[1])
    np.testing.assert_array_equal(w.data[0], w.data[1])


# ---------------------------------------------------------------------------
# segment scoring
# ---------------------------------------------------------------------------


def zero_output_model(**overrides):
    """Model whose output layer is zeroed: every symbol gets prob 1/V."""
    params = tiny_model(**overrides)
    params.out_w.data[...] = 0.0
    params.out_b.data[...] = 0.0
    return params


def test_uniform_stub_segment_scores():
    # With a constant output distribution every symbol costs ln(1/V), so a
    # two-token segment plus terminator costs 3 ln(1/V).
    params = zero_output_model()
    v = params.config.tgt_vocab_size
    table = md.encode_source_phrases(params, toks(0))
    state = md.encode_target_prefixes(params, toks(0, 1))
    attn, _ = md.attend(params, nm.take(state, np.array([0])), table)
    cum, dollar, eos = md.segment_prefix_logprobs(params, attn, np.array([toks(0, 1)]))
    expected_two_tokens = 2 * math.log(1.0 / v)
    assert cum.data[0, 1] == pytest.approx(expected_two_tokens, rel=1e-12)
    assert (cum.data[0, 1] + dollar.data[0, 1]) == pytest.approx(3 * math.log(1.0 / v), rel=1e-12)
    assert eos.data[0, 1] == pytest.approx(math.log(1.0 / v), rel=1e-12)


def test_cumulative_scores_telescope():
    params = tiny_model(seed=8)
    table = md.encode_source_phrases(params, toks(0, 1))
    states = md.encode_target_prefixes(params, toks(0, 1))
    attn, _ = md.attend(params, nm.take(states, np.array([0])), table)
    windows = np.array([toks(0, 1)])
    cum, _, _ = md.segment_prefix_logprobs(params, attn, windows)
    solo, _, _ = md.segment_prefix_logprobs(params, attn, windows[:, :1])
    step = cum.data[0, 1] - cum.data[0, 0]
    assert cum.data[0, 0] == pytest.approx(solo.data[0, 0], abs=1e-12)
    assert np.isfinite(step)


def test_window_extension_preserves_prefix_scores():
    params = tiny_model(seed=9, l_tgt=3)
    table = md.encode_source_phrases(params, toks(0, 1))
    states = md.encode_target_prefixes(params, toks(0, 1, 2))
    attn, _ = md.attend(params, nm.take(states, np.array([0])), table)
    short = md.segment_prefix_logprobs(params, attn, np.array([toks(0, 1)]))
    long = md.segment_prefix_logprobs(params, attn, np.array([toks(0, 1, 2)]))
    for a, b in zip(short, long):
        np.testing.assert_array_equal(a.data[0], b.data[0, :2])


def test_window_rejects_overlong():
    params = tiny_model()
    attn = Tensor(np.zeros((1, 8)))
    with pytest.raises(md.ModelError, match="window"):
        md.segment_prefix_logprobs(params, attn, np.array([toks(0, 1, 0)]))


def test_decoder_distribution_is_normalized():
    # Ordinary tokens plus both terminators live in one softmax.
    params = tiny_model(seed=10)
    table = md.encode_source_phrases(params, toks(0, 1))
    states = md.encode_target_prefixes(params, toks(0))
    attn, _ = md.attend(params, nm.take(states, np.array([0])), table)
    dist = md.next_symbol_logprobs(params, attn[0, :], [])
    assert dist.shape == (params.config.tgt_vocab_size,)
    assert np.exp(dist).sum() == pytest.approx(1.0, abs=1e-9)
    assert {DOLLAR_ID, EOS_ID, BOS_ID}.issubset(set(range(len(dist))))


def test_token_eval_counter():
    params = tiny_model(l_tgt=2)
    table = md.encode_source_phrases(params, toks(0, 1))
    states = md.encode_target_prefixes(params, toks(0, 1))
    attn, _ = md.attend(params, nm.take(states, np.array([0, 1])), table)
    params.reset_counters()
    md.segment_prefix_logprobs(params, attn, np.array([toks(0, 1), toks(1, 0)]))
    assert params.decoder_token_evals == 4


# ---------------------------------------------------------------------------
# segmentation type
# ---------------------------------------------------------------------------


def test_segmentation_checks():
    seg = md.Segmentation([toks(0), toks(1, 2)])
    seg.check(toks(0, 1, 2), l_tgt=2)
    with pytest.raises(md.ModelError):
        md.Segmentation([toks(0, 1, 2)]).check(toks(0, 1, 2), l_tgt=2)
    with pytest.raises(md.ModelError):
        md.Segmentation([toks(0)]).check(toks(1), l_tgt=2)
