import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phrasemt import lattice as lt, numerics as nm
from phrasemt.data import NUM_RESERVED
from phrasemt.lattice import (
    LatticeError,
    SegmentScoreTable,
    alpha_forward,
    brute_force_marginal,
    build_segment_scores,
    compositions,
    forward_lattice,
    sequence_nll,
)
from phrasemt.model import ModelConfig, ModelParams


@pytest.fixture(autouse=True)
def float64_mode():
    with nm.precision(64, verify=True):
        yield


def toks(*ids):
    return [NUM_RESERVED + i for i in ids]


def tiny_model(seed=0, **overrides):
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
    return ModelParams(ModelConfig(**base), np.random.default_rng(seed))


def uniform_table(t_prime, l_tgt, per_symbol):
    """Every symbol (tokens and terminators) has the same probability."""
    log_p = math.log(per_symbol)
    dollar, eos = {}, {}
    for j in range(1, t_prime + 1):
        for j0 in range(max(0, j - l_tgt), j):
            dollar[(j0, j)] = (j - j0 + 1) * log_p
            if j == t_prime:
                eos[j0] = (j - j0 + 1) * log_p
    return SegmentScoreTable.from_arrays(t_prime, l_tgt, dollar, eos)


def random_table(rng, t_prime, l_tgt):
    dollar, eos = {}, {}
    for j in range(1, t_prime + 1):
        for j0 in range(max(0, j - l_tgt), j):
            dollar[(j0, j)] = float(-rng.exponential(2.0))
            if j == t_prime:
                eos[j0] = float(-rng.exponential(2.0))
    return SegmentScoreTable.from_arrays(t_prime, l_tgt, dollar, eos)


# ---------------------------------------------------------------------------
# compositions (the enumeration substrate)
# ---------------------------------------------------------------------------


def test_composition_count_t4_l2():
    # Parts <= 2 summing to 4: Fibonacci-style count of 5.
    assert len(list(compositions(4, 2))) == 5


def test_composition_count_t1():
    assert list(compositions(1, 3)) == [[1]]


def test_compositions_cover_and_respect_bound():
    for parts in compositions(6, 3):
        assert sum(parts) == 6
        assert all(1 <= p <= 3 for p in parts)


# ---------------------------------------------------------------------------
# alpha recursion vs hand values and the enumeration oracle
# ---------------------------------------------------------------------------


def test_alpha_uniform_quarter_stub():
    # Four equiprobable symbols; T'=2, L=2. Two segmentations:
    #   [y1 $][y2 eos] = (1/4 * 1/4) * (1/4 * 1/4)
    #   [y1 y2 eos]    = 1/4 * 1/4 * 1/4
    # total 5/256 = 0.01953125.
    table = uniform_table(2, 2, 0.25)
    expected = (0.25 * 0.25) * (0.25 * 0.25) + 0.25**3
    assert expected == 0.01953125
    assert alpha_forward(table).item() == pytest.approx(math.log(0.01953125), abs=1e-12)
    assert brute_force_marginal(table) == pytest.approx(0.01953125, abs=1e-15)


def test_alpha_single_token_is_eos_score():
    rng = np.random.default_rng(0)
    table = random_table(rng, 1, 2)
    assert alpha_forward(table).item() == pytest.approx(table.eos_final[0].item(), abs=1e-12)


def test_alpha_lattice_initial_condition_and_bound():
    rng = np.random.default_rng(1)
    table = random_table(rng, 5, 2)
    lat = forward_lattice(table)
    assert lat.log_alpha[0].item() == 0.0
    for cell in lat.log_alpha[1:]:
        assert cell.item() <= 1e-9


def test_alpha_matches_brute_force_on_random_tables():
    rng = np.random.default_rng(2)
    for _ in range(100):
        t_prime = int(rng.integers(1, 9))
        l_tgt = int(rng.integers(1, 4))
        table = random_table(rng, t_prime, l_tgt)
        dp = alpha_forward(table).item()
        exact = brute_force_marginal(table)
        assert math.exp(dp) == pytest.approx(exact, rel=1e-12)


@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_alpha_brute_force_property(t_prime, l_tgt, seed):
    table = random_table(np.random.default_rng(seed), t_prime, l_tgt)
    dp = alpha_forward(table).item()
    assert abs(dp - math.log(brute_force_marginal(table))) < 1e-9


def test_window_restriction_matches_padded_unrestricted_dp():
    # Giving over-length segments -inf and widening the window must not
    # change the result.
    rng = np.random.default_rng(3)
    t_prime, l_tgt = 6, 2
    table = random_table(rng, t_prime, l_tgt)
    nm.set_verification(False)
    wide = SegmentScoreTable(t_prime, t_prime)
    for j in range(1, t_prime + 1):
        for j0 in range(j):
            if (j0, j) in table.dollar:
                wide.dollar[(j0, j)] = table.dollar[(j0, j)]
            else:
                wide.dollar[(j0, j)] = nm.Tensor(np.asarray(-np.inf))
            if j == t_prime:
                if j0 in table.eos_final:
                    wide.eos_final[j0] = table.eos_final[j0]
                else:
                    wide.eos_final[j0] = nm.Tensor(np.asarray(-np.inf))
    assert alpha_forward(wide).item() == pytest.approx(alpha_forward(table).item(), abs=1e-12)


def test_brute_force_guards_large_instances():
    rng = np.random.default_rng(4)
    with pytest.raises(LatticeError, match="too large"):
        brute_force_marginal(random_table(rng, 21, 2))


def test_forward_rejects_incomplete_table():
    table = SegmentScoreTable(2, 2)
    with pytest.raises(LatticeError, match="missing"):
        alpha_forward(table)


# ---------------------------------------------------------------------------
# model-backed tables
# ---------------------------------------------------------------------------


def test_build_segment_scores_token_eval_count():
    params = tiny_model()
    params.reset_counters()
    build_segment_scores(params, toks(0, 1), toks(0, 1, 2, 0))
    # T'=4, L=2: 2+2+2+1.
    assert params.decoder_token_evals == 7


def test_build_segment_scores_single_token_target():
    params = tiny_model()
    table = build_segment_scores(params, toks(0), toks(1))
    assert set(table.dollar) == {(0, 1)}
    assert set(table.eos_final) == {0}


def test_model_segment_scores_are_log_probabilities():
    params = tiny_model(seed=5)
    table = build_segment_scores(params, toks(0, 1, 2), toks(2, 1, 0))
    for entry in list(table.dollar.values()) + list(table.eos_final.values()):
        assert entry.item() <= 0.0


def test_build_rejects_empty_target():
    params = tiny_model()
    with pytest.raises(LatticeError):
        build_segment_scores(params, toks(0), [])


def test_sequence_nll_uniform_stub_value():
    # Zeroed output layer gives each of the V symbols probability 1/V;
    # the T'=2, L=2 marginal is then p^4 + p^3 for p = 1/V.
    params = tiny_model()
    params.out_w.data[...] = 0.0
    params.out_b.data[...] = 0.0
    v = params.config.tgt_vocab_size
    p = 1.0 / v
    expected = -math.log(p**4 + p**3)
    nll = sequence_nll(params, toks(0), toks(0, 1))
    assert nll.item() == pytest.approx(expected, rel=1e-12)


def test_sequence_nll_nonnegative():
    params = tiny_model(seed=6)
    nll = sequence_nll(params, toks(0, 1), toks(1, 2, 0))
    assert nll.item() >= 0.0


def test_sequence_nll_gradients_flow_to_all_components():
    params = tiny_model(seed=7)
    with nm.recording() as tape:
        nll = sequence_nll(params, toks(0, 1, 2), toks(1, 0))
        tape.backward(nll)
    named = params.named_parameters()
    touched = [name for name, p in named.items() if p.grad is not None and np.abs(p.grad).max() > 0]
    for component in ("src_embed", "tgt_embed", "span.proj_w", "attn.query_w", "out_w"):
        assert any(name.startswith(component) for name in touched), component
    params.zero_grad()


def test_sequence_nll_gradient_check_small():
    # Spot-check a few representative parameters end to end; the full
    # sweep lives in the acceptance suite.
    params = tiny_model(seed=8)
    src, tgt = toks(0, 1), toks(1, 0)

    def f():
        return sequence_nll(params, src, tgt)

    points = [
        params.attn_comb_w,
        params.out_b,
        params.span_encoder.proj_w,
        params.decoder.layers[0].cross_attn.wv,
    ]
    assert nm.gradient_check(f, points) < 1e-4
