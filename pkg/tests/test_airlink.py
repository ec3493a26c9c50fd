import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msra.airlink import (QPSK, activity_from_choices, block_sparse_symbols, draw_activity, modulate_frame,
                          read_trial_dump, stacked_measurement_matrix, superpose_data, superpose_preambles,
                          write_trial_dump)
from msra.channel import channel_from_taps, gen_channel
from msra.config import SystemConfig
from msra.waveform import build_preamble_matrix, build_signature_pool, gen_base_pool, gen_zc_preambles

from conftest import small_wb


def pools(cfg):
    base = gen_base_pool(cfg)
    return base, build_signature_pool(base, cfg), gen_zc_preambles(cfg)


def test_activity_fixed_edge_cases(rng):
    c = small_wb(n_active=0)
    d = draw_activity(c, rng)
    assert d.n_users == 0 and d.support.size == 0 and d.collided.size == 0
    d = draw_activity(c.replace(n_active=1), rng)
    assert d.n_users == 1 and d.support.size == 1 and d.collided.size == 0


def test_activity_structure():
    d = activity_from_choices([3, 5, 3, 9, 9, 9])
    np.testing.assert_array_equal(d.support, [3, 5, 9])
    np.testing.assert_array_equal(d.collided, [3, 9])
    np.testing.assert_array_equal(d.user_collided(), [True, False, True, True, True, True])


def test_poisson_collision_rate_matches_analytic():
    c = SystemConfig(N_T=1024, N_p=1024, N_s=1024, N_zc=1021, N_sc_p=1021, activity="poisson", n_active=17)
    rng = np.random.default_rng(11)
    users = coll = 0
    for _ in range(100_000):
        d = draw_activity(c, rng)
        users += d.n_users
        coll += int(d.user_collided().sum())
    assert abs(coll / users - (1 - np.exp(-17 / 1024))) < 0.001


def test_qpsk_symbols_unit_modulus_and_uniform(rng):
    c = small_wb(upsilon=4, N_c=8)
    f = modulate_frame(c, 125_000, rng)
    s = f.symbols.ravel()
    assert s.size == 1_000_000
    np.testing.assert_allclose(np.abs(s), 1, atol=1e-15)
    freq = np.array([(s == q).mean() for q in QPSK])
    assert np.all(np.abs(freq - 0.25) < 0.002)


def test_pilot_symbol_forced(rng):
    f = modulate_frame(small_wb(), 6, rng, pilot=True)
    assert np.all(f.symbols[:, 0, 0] == 1)


def test_preamble_observation_examples(rng):
    c = small_wb()
    _, _, pool = pools(c)
    empty = activity_from_choices([])
    ch = gen_channel(c, 0, rng)
    assert not superpose_preambles(empty, ch, pool, 0.0, rng).any()
    nb = SystemConfig(mode="NB", tau=1, M=8, N_s=32, N_T=32, N_p=32, N_zc=31, N_sc_p=32, N_sc_d=16,
                      upsilon=4, N_c=8)
    pool1 = gen_zc_preambles(nb)
    one = activity_from_choices([7])
    y = superpose_preambles(one, channel_from_taps([1.0], nb), pool1, 0.0, rng)
    np.testing.assert_array_equal(y, pool1.preambles[:, 7])


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_preamble_observation_matrix_form(seed):
    c = small_wb(tau=3)
    rng = np.random.default_rng(seed)
    _, _, pool = pools(c)
    P = build_preamble_matrix(pool, c.tau)
    d = activity_from_choices(rng.integers(0, c.N_T, 5))
    ch = gen_channel(c, d.n_users, rng)
    hbar = np.zeros(c.N_T * c.tau, dtype=complex)
    for k, m in enumerate(d.chosen):
        hbar[m * c.tau:(m + 1) * c.tau] += ch.taps[k]
    y = superpose_preambles(d, ch, pool, 0.0, rng)
    assert np.linalg.norm(y - P.matrix @ hbar) <= 1e-10 * max(1.0, np.linalg.norm(y))


def test_single_user_data_noiseless(rng):
    c = small_wb()
    base, sigs, _ = pools(c)
    d = activity_from_choices([4])
    ch = channel_from_taps(np.array([[1.0, 0.0]]), c)
    f = modulate_frame(c, 1, rng)
    y = superpose_data(d, ch, sigs, base, f, 0.0, rng)
    np.testing.assert_allclose(np.linalg.norm(y, axis=2), 1, atol=1e-12)
    for i in range(c.N_g):
        for l in range(c.upsilon):
            np.testing.assert_allclose(y[i, l], base.sequences[:, sigs.assignments[4, l]] * f.symbols[0, i, l])


def test_ssra_uses_one_sequence_per_group(rng):
    c = small_wb(spreading="SSRA")
    base, sigs, _ = pools(c)
    d = activity_from_choices([2])
    ch = channel_from_taps(np.array([[1.0, 0.0]]), c)
    f = modulate_frame(c, 1, rng)
    y = superpose_data(d, ch, sigs, base, f, 0.0, rng)
    unit = y[0] / f.symbols[0, 0][:, None]
    for l in range(1, c.upsilon):
        np.testing.assert_allclose(unit[l], unit[0], atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_data_observation_matrix_form(seed):
    c = small_wb()
    rng = np.random.default_rng(seed)
    base, sigs, _ = pools(c)
    chosen = rng.choice(c.N_T, 4, replace=False)
    d = activity_from_choices(chosen)
    ch = gen_channel(c, 4, rng)
    f = modulate_frame(c, 4, rng, signature=chosen)
    y = superpose_data(d, ch, sigs, base, f, 0.0, rng)
    gains = np.zeros((c.N_T, c.N_g, c.M), dtype=complex)
    gains[chosen] = ch.group_gains
    for i in range(c.N_g):
        A = stacked_measurement_matrix(gains, sigs, base, i)
        x = block_sparse_symbols(d, f, c.N_T, i)
        blocks = np.flatnonzero(np.abs(x.reshape(c.N_T, -1)).sum(axis=1))
        np.testing.assert_array_equal(blocks, np.sort(chosen))
        assert np.count_nonzero(x) <= c.upsilon * d.support.size
        assert np.linalg.norm(A @ x - y[i].reshape(-1)) <= 1e-10 * np.linalg.norm(y[i])


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(1, 5))
@settings(max_examples=25, deadline=None)
def test_superposition_linearity(seed, k1, k2):
    c = small_wb()
    rng = np.random.default_rng(seed)
    base, sigs, pool = pools(c)
    chosen = rng.integers(0, c.N_T, k1 + k2)
    ch = gen_channel(c, k1 + k2, rng)
    f = modulate_frame(c, k1 + k2, rng, signature=chosen)
    both = activity_from_choices(chosen)

    def part(sl):
        d = activity_from_choices(chosen[sl])
        sub_ch = type(ch)(ch.taps[sl], ch.freq[sl], ch.group_gains[sl])
        sub_f = type(f)(f.symbols[sl], f.signature[sl])
        return (superpose_data(d, sub_ch, sigs, base, sub_f, 0.0, rng),
                superpose_preambles(d, sub_ch, pool, 0.0, rng))

    yd, yp = superpose_data(both, ch, sigs, base, f, 0.0, rng), superpose_preambles(both, ch, pool, 0.0, rng)
    a, b = part(slice(0, k1)), part(slice(k1, None))
    assert np.abs(yd - a[0] - b[0]).max() <= 1e-12 * max(1, np.abs(yd).max())
    assert np.abs(yp - a[1] - b[1]).max() <= 1e-12 * max(1, np.abs(yp).max())


def test_narrowband_single_symbol_model(rng):
    # tau = 1, upsilon = 1: y_i = S H d_i with S the spreading columns and H the flat gains
    c = SystemConfig(mode="NB", tau=1, M=8, N_s=32, N_T=32, N_p=32, N_zc=31, N_sc_p=32, N_sc_d=16,
                     upsilon=1, N_c=4)
    base, sigs, _ = pools(c)
    chosen = np.array([1, 6, 20])
    ch = gen_channel(c, 3, rng)
    f = modulate_frame(c, 3, rng, signature=chosen)
    y = superpose_data(activity_from_choices(chosen), ch, sigs, base, f, 0.0, rng)
    S = base.sequences[:, sigs.assignments[chosen, 0]]
    H = np.diag(ch.taps[:, 0])
    for i in range(c.N_g):
        np.testing.assert_allclose(y[i, 0], S @ H @ f.symbols[:, i, 0], atol=1e-12)


def test_trial_dump_round_trip(tmp_path, rng):
    c = small_wb()
    base, sigs, pool = pools(c)
    d = activity_from_choices([1, 5, 5])
    ch = gen_channel(c, 3, rng)
    f = modulate_frame(c, 3, rng, signature=d.chosen)
    from msra.airlink import SlotObservation
    obs = SlotObservation(superpose_preambles(d, ch, pool, c.sigma2, rng),
                          superpose_data(d, ch, sigs, base, f, c.sigma2, rng), c.sigma2)
    write_trial_dump(tmp_path / "trial_0000.txt", d, ch, obs, {"trial": 0})
    d2, obs2, meta = read_trial_dump(tmp_path / "trial_0000.txt")
    np.testing.assert_array_equal(d2.chosen, d.chosen)
    np.testing.assert_array_equal(obs2.y_p, obs.y_p)
    np.testing.assert_array_equal(obs2.y_data, obs.y_data)
    assert obs2.sigma2 == obs.sigma2 and meta["trial"] == "0"
    np.testing.assert_array_equal(obs.stacked(1), np.concatenate(list(obs.y_data[1])))
