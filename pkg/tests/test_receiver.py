import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msra.airlink import SlotObservation, activity_from_choices, modulate_frame, superpose_data
from msra.channel import channel_from_taps, gen_channel
from msra.config import SystemConfig
from msra.harness import build_context, simulate_trial
from msra.receiver import (ReceiverContext, assemble_measurement, batched_ls, default_threshold, detect, finalize,
                           freq_lift, initial_aud, iorls, layered_ls, ls_channel_estimate, qpsk_decide,
                           stop_schedule, stop_threshold, unit_channel_measurement, update_weights, wsomp, wsomp_groups)
from msra.recipes import wb_preset
from msra.waveform import PreambleMatrix, SignaturePool, build_preamble_matrix, gen_zc_preambles

from conftest import small_nb, small_wb


def cplx(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# stage 1


def test_initial_aud_empty_on_zero():
    ctx = build_context(small_wb())
    assert initial_aud(np.zeros(61, complex), ctx.P, 1e-3).size == 0
    with pytest.raises(ValueError):
        initial_aud(np.zeros(61, complex), ctx.P, 0.0)


def test_initial_aud_matched_peak():
    ctx = build_context(small_wb())
    y = ctx.P.block(9) @ np.ones(ctx.cfg.tau)  # unit taps: matched energy tau
    assert 9 in initial_aud(y, ctx.P, 0.5 * ctx.cfg.tau)


def test_default_threshold_formula():
    cfg = small_wb(xi_scale=0.25)
    ctx = build_context(cfg)
    c = float((np.abs(ctx.P.matrix) ** 2).sum(axis=0).mean())
    assert default_threshold(cfg, ctx.P) == pytest.approx(0.25 * cfg.sigma2 * cfg.tau * c)
    assert c == pytest.approx(1.0)


def _stage1_run(trials):
    cfg = wb_preset("full").replace(activity="fixed", n_active=24)
    ctx = build_context(cfg)
    missed = total = 0
    sizes = []
    for s in range(trials):
        d = simulate_trial(ctx, s)
        u = initial_aud(d.obs.y_p, ctx.P, default_threshold(cfg, ctx.P))
        missed += np.setdiff1d(d.draw.support, u).size
        total += d.draw.support.size
        sizes.append(u.size)
    return missed / total, float(np.mean(sizes))


@pytest.fixture(scope="module")
def stage1_calibration():
    return _stage1_run(1000)


def test_stage1_true_preamble_miss_rate(stage1_calibration):
    assert stage1_calibration[0] < 1e-3


@pytest.mark.xfail(strict=True, reason="preamble cross-interference at N_a=24 exceeds the low tail of true-block "
                                       "energy, so no threshold gives both miss < 1e-3 and |U1| <= 4 N_a")
def test_stage1_hypothesis_size(stage1_calibration):
    assert 24 <= stage1_calibration[1] <= 96


# ---------------------------------------------------------------------------
# channel estimation


def _preamble_setup(rng, k=3):
    cfg = small_wb(tau=3)
    P = build_preamble_matrix(gen_zc_preambles(cfg), cfg.tau)
    sup = np.sort(rng.choice(cfg.N_T, k, replace=False))
    taps = cplx(rng, k, cfg.tau)
    hbar = np.zeros(cfg.N_T * cfg.tau, complex)
    for j, m in enumerate(sup):
        hbar[m * cfg.tau:(m + 1) * cfg.tau] = taps[j]
    return cfg, P, sup, taps, P.matrix @ hbar


def test_ls_exact_on_true_support(rng):
    cfg, P, sup, taps, y = _preamble_setup(rng)
    est, diag = ls_channel_estimate(y, P, sup)
    np.testing.assert_allclose(est, taps, rtol=1e-8)
    assert not diag["underdetermined"] and diag["rank"] == sup.size * cfg.tau


def test_ls_superset_keeps_true_blocks(rng):
    cfg, P, sup, taps, y = _preamble_setup(rng)
    extra = np.setdiff1d(rng.choice(cfg.N_T, 6, replace=False), sup)
    U = np.sort(np.concatenate([sup, extra]))
    est, _ = ls_channel_estimate(y, P, U)
    oracle = np.linalg.lstsq(P.matrix[:, P.block_columns(sup)], y, rcond=None)[0].reshape(-1, cfg.tau)
    pos = np.searchsorted(U, sup)
    np.testing.assert_allclose(est[pos], oracle, atol=1e-6)
    assert np.abs(np.delete(est, pos, axis=0)).max() < 1e-6


def test_ls_noise_energy_matches_pinv_trace(rng):
    cfg = small_wb(tau=3)
    P = build_preamble_matrix(gen_zc_preambles(cfg), cfg.tau)
    U = np.array([0, 4, 11, 17])
    sub = P.matrix[:, P.block_columns(U)]
    pinv = np.linalg.pinv(sub)
    expected = np.trace(pinv @ pinv.conj().T).real
    sigma2 = 0.3
    energy = []
    for _ in range(4000):
        w = np.sqrt(sigma2 / 2) * cplx(rng, 61)
        est, diag = ls_channel_estimate(w, P, U)
        energy.append((np.abs(est) ** 2).sum())
    assert np.mean(energy) / sigma2 == pytest.approx(expected, rel=0.05)
    assert diag["unit_error_var"].sum() == pytest.approx(expected, rel=1e-9)


def test_ls_empty_and_flags():
    cfg = small_wb()
    P = build_preamble_matrix(gen_zc_preambles(cfg), cfg.tau)
    est, diag = ls_channel_estimate(np.ones(61, complex), P, [])
    assert est.shape == (0, cfg.tau) and diag["rank"] == 0
    big = np.arange(32)  # 64 unknowns, 61 equations
    _, diag = ls_channel_estimate(np.ones(61, complex), P, big)
    assert diag["underdetermined"]


def test_freq_lift_examples(rng):
    cfg = small_wb(tau=3)
    np.testing.assert_allclose(freq_lift(np.array([[1, 0, 0]]), cfg), np.ones((1, cfg.N_sc_d)))
    assert not freq_lift(np.zeros((2, 3)), cfg).any()
    taps = cplx(rng, 3)
    n = np.arange(cfg.N_sc_d)
    direct = sum(taps[t] * np.exp(-2j * np.pi * n * t / cfg.N_sc_d) for t in range(3))
    np.testing.assert_allclose(freq_lift(taps[None], cfg)[0], direct, atol=1e-12)


# ---------------------------------------------------------------------------
# measurement assembly


def test_assembly_reproduces_noiseless_data(rng):
    cfg = small_wb()
    ctx = build_context(cfg)
    chosen = np.array([3, 8, 20])
    ch = gen_channel(cfg, 3, rng)
    f = modulate_frame(cfg, 3, rng, signature=chosen)
    y = superpose_data(activity_from_choices(chosen), ch, ctx.signatures, ctx.base, f, 0.0, rng)
    ens = assemble_measurement(ch.freq, chosen, ctx.signatures, ctx.base, cfg)
    for i in range(cfg.N_g):
        A = ens.stacked(i)
        x = f.symbols[:, i, :].reshape(-1)  # block j holds user j's group i
        np.testing.assert_allclose(A @ x, y[i].reshape(-1), atol=1e-9)
        for l in range(cfg.upsilon):
            np.testing.assert_array_equal(ens.layer(i, l), A[l * cfg.M:(l + 1) * cfg.M, l::cfg.upsilon])


def test_unit_channel_columns_are_sequences():
    cfg = small_nb()
    ctx = build_context(cfg)
    U = np.array([0, 5, 7])
    ens = unit_channel_measurement(U, ctx.signatures, ctx.base, cfg)
    for l in range(cfg.upsilon):
        np.testing.assert_allclose(ens.phi[0, l], ctx.base.sequences[:, ctx.signatures.assignments[U, l]])


# ---------------------------------------------------------------------------
# wSOMP


def reference_somp(y, phi, k):
    """Plain SOMP on the stacked dictionary: unweighted block scores, k steps."""
    ups, M, n = phi.shape
    A = np.zeros((ups * M, ups * n), complex)
    for l in range(ups):
        A[l * M:(l + 1) * M, l::ups] = phi[l]
    yv = y.reshape(-1)
    r = yv.copy()
    sel = []
    for _ in range(k):
        score = [np.sum(np.abs(A[:, m * ups:(m + 1) * ups].conj().T @ r) ** 2)
                 / np.sum(np.abs(A[:, m * ups:(m + 1) * ups]) ** 2) if m not in sel else -1 for m in range(n)]
        sel.append(int(np.argmax(score)))
        cols = [m * ups + l for m in sel for l in range(ups)]
        r = yv - A[:, cols] @ np.linalg.pinv(A[:, cols]) @ yv
    return sel


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_uniform_weights_is_somp(seed):
    rng = np.random.default_rng(seed)
    phi = cplx(rng, 3, 8, 20)
    y = cplx(rng, 3, 8)
    sel, _, _ = wsomp(y, phi, np.ones(20), 0.0, 4)
    assert sel.tolist() == reference_somp(y, phi, 4)


def test_single_user_recovered_in_one_step(rng):
    phi = cplx(rng, 4, 16, 30)
    x = cplx(rng, 4)
    y = phi[:, :, 12] * x[:, None]
    sel, xh, hist = wsomp(y, phi, np.ones(30), 1e-20, 5)
    assert sel.tolist() == [12]
    assert hist[-1] < 1e-10
    np.testing.assert_allclose(xh[12], x, rtol=1e-10)


def test_zero_weights_select_nothing(rng):
    phi = cplx(rng, 2, 8, 10)
    y = cplx(rng, 2, 8)
    sel, xh, hist = wsomp(y, phi, np.zeros(10), 0.0, 5)
    assert sel.size == 0 and not xh.any() and hist == [pytest.approx(np.vdot(y, y).real)]


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_ls_orthogonality_and_monotone_residual(seed, k):
    rng = np.random.default_rng(seed)
    phi = cplx(rng, 3, 12, 25)
    y = cplx(rng, 3, 12)
    sel, _, hist = wsomp(y, phi, rng.random(25) + 0.1, 0.0, k)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
    _, r = layered_ls(y, phi, list(sel))
    for l in range(3):
        g = phi[l][:, sel].conj().T @ r[l]
        assert np.abs(g).max() <= 1e-9 * np.linalg.norm(phi[l]) * np.linalg.norm(y)


@given(st.integers(0, 2 ** 32 - 1), st.booleans())
@settings(max_examples=30, deadline=None)
def test_group_batch_equals_per_group(seed, with_mismatch):
    rng = np.random.default_rng(seed)
    n_g, ups, M, n = 4, 2, 8, 16
    phi = cplx(rng, n_g, ups, M, n)
    y = cplx(rng, n_g, ups, M)
    w = np.round(rng.random(n) * 4) / 4
    sched = np.linspace(20, 2, M + 1)
    mis = rng.random(n) * 0.1 if with_mismatch else None
    got = wsomp_groups(y, phi, w, sched, M, mis)
    for i in range(n_g):
        if mis is None:
            level = sched
        else:
            def level(sel, i=i):
                j = len(sel)
                return sched[j] + (M - j) / M * ups * mis[list(sel)].sum()
        ref, _, _ = wsomp(y[i], phi[i], w, level, M)
        assert got[i].tolist() == ref.tolist()


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_batched_ls_matches_pinv(seed, j):
    rng = np.random.default_rng(seed)
    a = cplx(rng, 3, 10, j)
    a[0, :, -1] = a[0, :, 0]  # one rank-deficient stack
    b = cplx(rng, 3, 10)
    x = batched_ls(a, b)
    for s in range(3):
        np.testing.assert_allclose(a[s] @ x[s], a[s] @ np.linalg.pinv(a[s], rcond=1e-10) @ b[s], atol=1e-9)


# ---------------------------------------------------------------------------
# weights and IORLS


def test_update_weights_examples():
    sup = [{0, 1}, {0, 2}, {0, 1}, {0}]
    w = update_weights(sup, 4, 4)
    np.testing.assert_allclose(w, [1, 0.5, 0.25, 0])
    w = update_weights([{2}, {2}, {2}, set()], 3, 4)
    assert w[2] == 0.75


def _nb_ctx(**kw):
    return build_context(small_nb(**kw))


def test_iorls_single_group_is_one_pass():
    cfg = small_nb(upsilon=8, N_c=8)
    ctx = build_context(cfg)
    d = simulate_trial(ctx, 4)
    ens = unit_channel_measurement(np.arange(cfg.N_T), ctx.signatures, ctx.base, cfg)
    st_ = iorls(d.obs.y_data, ens, cfg)
    assert st_.outer_iter == 1 and st_.converged and len(st_.per_group_supports) == 1
    one, _, _ = wsomp(d.obs.y_data[0], ens.phi[0], np.ones(cfg.N_T), stop_schedule(cfg, max_atoms=cfg.M), cfg.M)
    np.testing.assert_array_equal(st_.final_support, np.sort(one))


def test_iorls_noiseless_perfect_ce_recovers_support():
    cfg = SystemConfig(mode="NB", tau=1, M=16, N_s=128, N_T=128, N_p=128, N_zc=127, N_sc_p=128, N_sc_d=32,
                       upsilon=16, N_c=16, single_stage=True, n_active=8, snr_db=200.0, stop_rule="projected")
    ctx = build_context(cfg)
    ok = 0
    rng = np.random.default_rng(1)
    for _ in range(500):
        chosen = rng.choice(cfg.N_T, 8, replace=False)
        ch = gen_channel(cfg, 8, rng)
        f = modulate_frame(cfg, 8, rng, signature=chosen)
        y = superpose_data(activity_from_choices(chosen), ch, ctx.signatures, ctx.base, f, 0.0, rng)
        freq = np.zeros((cfg.N_T, cfg.N_sc_d), complex)
        freq[chosen] = ch.freq
        freq[freq == 0] = 1.0  # unused candidates keep a unit channel
        ens = assemble_measurement(freq, np.arange(cfg.N_T), ctx.signatures, ctx.base, cfg)
        st_ = iorls(y, ens, cfg, sigma2=1e-30)
        ok += np.array_equal(st_.final_support, np.sort(chosen))
    assert ok >= 495


def test_iorls_recovers_atom_missed_by_a_minority_of_groups():
    # search seeded trials for a round-one miss in fewer than half the groups
    cfg = small_nb(upsilon=2, N_c=8, n_active=5, snr_db=8.0)
    ctx = build_context(cfg)
    found = False
    for s in range(400):
        d = simulate_trial(ctx, s)
        rep, st_ = detect(d.obs, ctx)
        sup = set(d.draw.support.tolist())
        miss = [len(sup - g) > 0 for g in st_.first_round_supports]
        if 0 < sum(miss) < cfg.N_g / 2 and st_.outer_iter > 1 and sup <= set(rep.final_support.tolist()):
            found = True
            break
    assert found


@given(st.integers(0, 10 ** 6))
@settings(max_examples=20, deadline=None)
def test_detection_state_invariants(seed):
    ctx = build_context(small_wb(n_active=4, snr_db=5.0))
    d = simulate_trial(ctx, seed)
    rep, st_ = detect(d.obs, ctx)
    u1 = set(st_.hypothesis_u1.tolist())
    assert set(st_.final_support.tolist()) <= u1
    assert all(g <= u1 for g in st_.per_group_supports)
    q = st_.weights * ctx.cfg.N_g
    np.testing.assert_allclose(q, np.round(q), atol=1e-12)
    assert ((st_.weights >= 0) & (st_.weights <= 1)).all()
    outside = np.setdiff1d(np.arange(ctx.cfg.N_T), rep.final_support)
    assert not rep.x_hat[:, outside].any()


# ---------------------------------------------------------------------------
# final estimation and whole-receiver properties


def test_perfect_detection_noiseless_zero_ser(rng):
    cfg = small_wb(snr_db=300.0)
    ctx = build_context(cfg)
    d = simulate_trial(ctx, 3)
    rep = finalize(d.obs, d.draw.support, ctx.P, ctx.signatures, ctx.base, cfg)
    users = [k for k in range(d.draw.n_users) if d.draw.chosen[k] not in d.draw.collided]
    for k in users:
        np.testing.assert_array_equal(rep.decisions[:, d.draw.chosen[k]], d.frames.symbols[k])


def test_oracle_mode_bypasses_detection():
    ctx = build_context(small_wb())
    d = simulate_trial(ctx, 2)
    rep, st_ = detect(d.obs, ctx, oracle_support=d.draw.support)
    np.testing.assert_array_equal(rep.final_support, d.draw.support)
    assert rep.diagnostics["oracle"]


def test_empty_final_support_reported():
    cfg = small_wb()
    ctx = build_context(cfg)
    obs = SlotObservation(np.zeros(61, complex), np.zeros((cfg.N_g, cfg.upsilon, cfg.M), complex), cfg.sigma2)
    rep = finalize(obs, [], ctx.P, ctx.signatures, ctx.base, cfg)
    assert rep.no_users_detected and rep.diagnostics["no_users_detected"]


def test_report_record_line():
    ctx = build_context(small_wb())
    rep, _ = detect(simulate_trial(ctx, 1).obs, ctx)
    rec = rep.to_record()
    assert "\n" not in rec
    assert rec.split(";")[0].startswith("support=")
    assert [f.split("=")[0] for f in rec.split(";")] == ["support", "n_u1", "outer", "converged", "residuals"]


def test_qpsk_decide():
    x = np.array([0.3 + 0.1j, -2 - 5j, 0])
    np.testing.assert_allclose(qpsk_decide(x), [(1 + 1j) / np.sqrt(2), (-1 - 1j) / np.sqrt(2), 0])


@pytest.mark.parametrize("single_stage", [False, True])
def test_ssra_msra_identical_at_upsilon_one(single_stage):
    kw = dict(upsilon=1, N_c=4, n_active=4)
    make = small_nb if single_stage else small_wb
    m, s = build_context(make(**kw)), build_context(make(spreading="SSRA", **kw))
    # with one sequence per signature, use the same rows so the pools coincide
    s = ReceiverContext(s.cfg, s.base, SignaturePool(m.signatures.assignments, "SSRA"), s.P, s.preambles)
    for seed in range(5):
        dm, ds = simulate_trial(m, seed), simulate_trial(s, seed)
        rm, _ = detect(dm.obs, m)
        rs, _ = detect(ds.obs, s)
        assert rm.to_record() == rs.to_record()
        assert rm.x_hat.tobytes() == rs.x_hat.tobytes()


def test_permutation_equivariance():
    cfg = small_wb(n_active=4, snr_db=15.0)
    ctx = build_context(cfg)
    perm = np.random.default_rng(8).permutation(cfg.N_T)  # new index j holds old signature perm[j]
    inv = np.argsort(perm)
    tau = cfg.tau
    cols = (perm[:, None] * tau + np.arange(tau)[None, :]).ravel()
    P2 = PreambleMatrix(ctx.P.matrix[:, cols], tau)
    sig2 = SignaturePool(ctx.signatures.assignments[perm], ctx.signatures.mode)
    ctx2 = ReceiverContext(cfg, ctx.base, sig2, P2, None)
    for seed in range(6):
        d = simulate_trial(ctx, seed)
        r1, _ = detect(d.obs, ctx)
        r2, _ = detect(d.obs, ctx2)
        np.testing.assert_array_equal(np.sort(perm[r2.final_support]), r1.final_support)
        np.testing.assert_array_equal(inv[r1.final_support].size, r2.final_support.size)


def test_stop_threshold_rules():
    cfg = small_wb(stop_rule="gaussian")
    s2, M, ups = cfg.sigma2, cfg.M, cfg.upsilon
    assert stop_threshold(cfg) == pytest.approx(ups * s2 * (M + 2 * np.sqrt(M * np.log(M))))
    assert stop_threshold(cfg.replace(stop_rule="arbitrary")) == pytest.approx(ups * s2 * M)
    n = ups * (M - 3)
    proj = cfg.replace(stop_rule="projected")
    assert stop_threshold(proj, n_selected=3) == pytest.approx(s2 * (n + 2 * np.sqrt(n * np.log(n))))
    assert stop_threshold(proj, n_selected=M) == 0.0
    np.testing.assert_allclose(stop_schedule(proj, max_atoms=4), [stop_threshold(proj, n_selected=j) for j in range(5)])
