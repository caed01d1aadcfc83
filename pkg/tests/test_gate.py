import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xcache.fingerprint import Fingerprint
from xcache.gate import (
    GateConfig,
    GateMetrics,
    Step0Mode,
    ThresholdState,
    adaptive_threshold,
    cosine_similarity,
    decide,
    gate_metrics,
    max_token_deviation,
    update_ema,
)

EPS = 1e-6


def fp(*spatial, global_=(1.0, 2.0), condition=(0.5, -0.5)):
    entries = tuple(np.asarray(e, dtype=float) for e in spatial) + (
        np.asarray(global_, dtype=float),
        np.asarray(condition, dtype=float),
    )
    names = tuple(f"spatial:g{i}" for i in range(len(spatial))) + ("global", "condition")
    return Fingerprint(names, entries, len(spatial))


def naive_cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- cosine ---------------------------------------------------------------------


def test_identical_fingerprints_cosine_one():
    a = fp([1.0, 2.0, 3.0], [0.5, 0.1])
    per, s = cosine_similarity(a, a)
    assert per == [1.0, 1.0, 1.0, 1.0] and s == 1.0


def test_scaled_entry_keeps_cosine_one():
    a = fp([1.0, 2.0, 3.0], [0.5, 0.1])
    b = fp([2.0, 4.0, 6.0], [0.5, 0.1])
    per, s = cosine_similarity(a, b)
    assert per[0] == pytest.approx(1.0, abs=1e-15) and s == pytest.approx(1.0, abs=1e-15)


def test_orthogonal_slot_dominates_min():
    per, s = cosine_similarity(fp([1.0, 0.0], [3.0]), fp([0.0, 1.0], [3.0]))
    assert per[0] == 0.0 and s == 0.0


def test_cosine_aggregate_covers_global_and_condition():
    a = fp([1.0, 1.0], condition=(1.0, 0.0))
    b = fp([1.0, 1.0], condition=(0.0, 1.0))
    per, s = cosine_similarity(a, b)
    assert per[-1] == 0.0 and s == 0.0
    c = fp([1.0, 1.0], global_=(1.0, 0.0))
    d = fp([1.0, 1.0], global_=(-1.0, 0.0))
    assert cosine_similarity(c, d)[1] == -1.0


def test_zero_vector_cosine_convention():
    z = fp([1.0], condition=(0.0, 0.0))
    assert cosine_similarity(z, z)[0][-1] == 1.0
    assert cosine_similarity(z, fp([1.0], condition=(1.0, 0.0)))[0][-1] == 0.0


def test_structure_mismatch_rejected():
    with pytest.raises(ValueError, match="structure"):
        cosine_similarity(fp([1.0, 2.0]), fp([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError, match="structure"):
        max_token_deviation(fp([1.0]), fp([1.0], [2.0]))


vectors = st.lists(st.floats(-100, 100, allow_nan=False, allow_infinity=False), min_size=3, max_size=3)


@given(vectors, vectors, vectors, vectors)
def test_aggregate_is_exact_min_and_matches_oracle(a1, a2, b1, b2):
    a, b = fp(a1, a2), fp(b1, b2)
    per, s = cosine_similarity(a, b)
    assert s == min(per)
    for x, y, got in zip(a.entries, b.entries, per):
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx > 0 and ny > 0:
            assert got == pytest.approx(np.clip(naive_cos(x, y), -1, 1), abs=1e-9)
        assert -1.0 <= got <= 1.0


@given(vectors, vectors, st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(a1, b1, k):
    a, b = fp(a1), fp(b1)
    ka = Fingerprint(a.names, tuple(k * e for e in a.entries), a.n_spatial)
    kb = Fingerprint(b.names, tuple(k * e for e in b.entries), b.n_spatial)
    for u, v in zip(cosine_similarity(a, b)[0], cosine_similarity(ka, kb)[0]):
        assert u == pytest.approx(v, abs=1e-9)


# -- deviation ------------------------------------------------------------------


def test_identical_fingerprints_zero_deviation():
    a = fp([1.0, -2.0], [3.0])
    assert max_token_deviation(a, a) == ([0.0, 0.0], 0.0)


def test_single_coordinate_deviation():
    cached = fp(np.ones(6))
    cur = np.ones(6)
    cur[2] += 0.5
    per, d = max_token_deviation(fp(cur), cached, EPS)
    assert per[0] == 0.5 / (1.0 + EPS) and d == per[0]


def test_deviation_takes_max_over_groups():
    cached = fp(np.ones(4), np.ones(4))
    cur = fp(np.ones(4) + [0.2, 0, 0, 0], np.ones(4) + [0, 1.8, 0, 0])
    per, d = max_token_deviation(cur, cached, 0.0)
    assert per == pytest.approx([0.2, 1.8]) and d == per[1]


def test_deviation_ignores_global_and_condition():
    a = fp([1.0, 1.0], global_=(100.0, 0.0), condition=(9.0, 9.0))
    b = fp([1.0, 1.0], global_=(0.0, 100.0), condition=(-9.0, 9.0))
    assert max_token_deviation(a, b)[1] == 0.0


@given(vectors, vectors, st.floats(1e-2, 1e2))
def test_deviation_scale_invariance(a1, b1, k):
    a, b = fp(a1), fp(b1)
    ka = Fingerprint(a.names, tuple(k * e for e in a.entries), a.n_spatial)
    kb = Fingerprint(b.names, tuple(k * e for e in b.entries), b.n_spatial)
    d1 = max_token_deviation(a, b, 0.0)[1] if np.any(b.spatial[0]) else None
    if d1 is not None:
        assert max_token_deviation(ka, kb, 0.0)[1] == pytest.approx(d1, rel=1e-9)


def test_gate_metrics_bundle():
    a, b = fp([1.0, 0.0]), fp([1.0, 1.0])
    m = gate_metrics(a, b)
    assert m.s_cos == cosine_similarity(a, b)[1]
    assert m.d_max == max_token_deviation(a, b)[1]


# -- EMA and threshold ----------------------------------------------------------


def test_ema_initializes_to_first_observation():
    s = update_ema(ThresholdState(), 0, 1, 0.98, 0.3)
    assert s.get(0, 1) == 0.98


def test_ema_update_by_hand():
    s = update_ema(ThresholdState(), 0, 1, 0.98, 0.3)
    update_ema(s, 0, 1, 0.90, 0.3)
    assert s.get(0, 1) == pytest.approx(0.956, abs=1e-12)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20))
def test_ema_alpha_one_tracks_latest(values):
    s = ThresholdState()
    for v in values:
        update_ema(s, 2, 3, v, 1.0)
    assert s.get(2, 3) == values[-1]


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 1.0), st.integers(1, 40))
def test_ema_converges_geometrically(start, target, alpha, n):
    s = ThresholdState()
    update_ema(s, 0, 0, start, alpha)
    for _ in range(n):
        update_ema(s, 0, 0, target, alpha)
    expected_gap = abs(start - target) * (1 - alpha) ** n
    assert abs(s.get(0, 0) - target) == pytest.approx(expected_gap, abs=1e-12)


def test_ema_positions_are_independent():
    s = ThresholdState()
    update_ema(s, 0, 1, 0.5, 0.3)
    update_ema(s, 1, 0, 0.9, 0.3)
    assert s.get(0, 1) == 0.5 and s.get(1, 0) == 0.9 and s.get(0, 0) is None


def test_threshold_examples():
    s = ThresholdState({(0, 1): 0.999, (0, 2): 0.95})
    assert adaptive_threshold(s, 0, 1, 0.97, 0.02) == pytest.approx(0.979, abs=1e-12)
    assert adaptive_threshold(s, 0, 2, 0.97, 0.02) == 0.97
    assert adaptive_threshold(s, 3, 3, 0.97, 0.02) == 0.97


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 1.0), st.floats(0, 0.5))
def test_threshold_monotone_and_floored(e1, e2, floor, margin):
    lo, hi = sorted((e1, e2))
    t_lo = adaptive_threshold(ThresholdState({(0, 0): lo}), 0, 0, floor, margin)
    t_hi = adaptive_threshold(ThresholdState({(0, 0): hi}), 0, 0, floor, margin)
    assert floor <= t_lo <= t_hi


# -- decision -------------------------------------------------------------------


def _m(s, d):
    return GateMetrics(s, [s], d, [d])


@pytest.mark.parametrize(
    "s,tau,d,tau_dev,skip",
    [
        (0.98, 0.97, 1.5, 2.0, True),
        (0.96, 0.97, 0.0, 2.0, False),
        (1.0, 0.97, 2.5, 2.0, False),
        (0.97, 0.97, 0.0, 2.0, True),  # cosine test is inclusive
        (1.0, 0.97, 2.0, 2.0, False),  # deviation test is strict
    ],
)
def test_decide_table(s, tau, d, tau_dev, skip):
    assert decide(_m(s, d), tau, tau_dev) is skip


@given(st.floats(-1, 1), st.floats(0, 1), st.floats(0, 5), st.floats(0.01, 5))
def test_decide_is_conjunction(s, tau, d, tau_dev):
    assert decide(_m(s, d), tau, tau_dev) == ((s >= tau) and (d < tau_dev))


# -- config ---------------------------------------------------------------------


def test_gate_config_defaults():
    c = GateConfig()
    assert (c.tau_floor, c.margin, c.ema_alpha, c.tau_dev) == (0.97, 0.02, 0.3, 2.0)
    assert c.epsilon == 1e-6 and c.step0_mode is Step0Mode.OFF and c.step0_strict_threshold == 0.999


@pytest.mark.parametrize(
    "kwargs",
    [
        {"tau_floor": 0.0},
        {"tau_floor": 1.5},
        {"margin": -0.1},
        {"ema_alpha": 0.0},
        {"ema_alpha": 1.1},
        {"tau_dev": 0.0},
        {"epsilon": 0.0},
        {"step0_mode": "sometimes"},
    ],
)
def test_gate_config_validation(kwargs):
    with pytest.raises(ValueError):
        GateConfig(**kwargs)


def test_gate_config_accepts_mode_strings():
    assert GateConfig(step0_mode="strict").step0_mode is Step0Mode.STRICT
