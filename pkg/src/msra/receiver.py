"""Two-stage active-user detection: preamble thresholding, LS channel
estimation, weighted SOMP inside an IORLS outer loop, and final detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .airlink import QPSK, SlotObservation
from .channel import group_subcarriers, taps_to_freq
from .config import SystemConfig
from .waveform import BasePool, PreambleMatrix, PreamblePool, SignaturePool

PINV_RCOND = 1e-10
COND_LIMIT = 1e8


@dataclass
class DetectionState:
    hypothesis_u1: np.ndarray  # signature indices passed by stage 1
    weights: np.ndarray  # aligned with hypothesis_u1
    per_group_supports: list  # sets of signature indices, one per group
    final_support: np.ndarray
    outer_iter: int = 0
    converged: bool = True
    first_round_supports: list = field(default_factory=list)


@dataclass(frozen=True)
class MeasurementEnsemble:
    """Estimated per-layer dictionaries for every hypothesised signature.

    ``phi[i, l, :, j]`` is ``diag(h_i^(m)) s_{m,l}`` for ``m = candidates[j]``.
    """

    candidates: np.ndarray
    phi: np.ndarray  # (N_g, upsilon, M, |U|)
    ce_var: np.ndarray | None = None  # per-subcarrier channel-estimate error variance per candidate

    @property
    def column_block_index(self) -> dict:
        ups = self.phi.shape[1]
        return {int(m): range(j * ups, (j + 1) * ups) for j, m in enumerate(self.candidates)}

    def layer(self, i: int, l: int) -> np.ndarray:
        return self.phi[i, l]

    def stacked(self, i: int) -> np.ndarray:
        """``A_hat_i``: ``(upsilon*M, upsilon*|U|)`` with block-diagonal column blocks."""
        _, ups, M, n_u = self.phi.shape
        A = np.zeros((ups * M, ups * n_u), dtype=complex)
        for l in range(ups):
            A[l * M:(l + 1) * M, l::ups] = self.phi[i, l]
        return A

    @classmethod
    def from_stacked(cls, candidates, stacked: list, upsilon: int, M: int) -> "MeasurementEnsemble":
        n_u = len(candidates)
        phi = np.empty((len(stacked), upsilon, M, n_u), dtype=complex)
        for i, A in enumerate(stacked):
            for l in range(upsilon):
                phi[i, l] = A[l * M:(l + 1) * M, l::upsilon]
        return cls(np.asarray(candidates), phi)


@dataclass
class DetectionReport:
    final_support: np.ndarray
    channel_taps: np.ndarray  # (|final|, tau); empty in single-stage mode
    channel_freq: np.ndarray  # (|final|, N_g, M) group gains used for detection
    x_hat: np.ndarray  # (N_g, N_T, upsilon), zero outside the final support
    decisions: np.ndarray  # nearest-QPSK of the symbol estimates (zeros outside)
    diagnostics: dict = field(default_factory=dict)

    @property
    def no_users_detected(self) -> bool:
        return self.final_support.size == 0

    def to_record(self) -> str:
        """One line: ``support=<m,..>;n_u1=..;outer=..;converged=..;residuals=<..>``."""
        d = self.diagnostics
        res = ",".join(f"{v:.6e}" for v in d.get("final_residuals", []))
        return (f"support={','.join(str(int(m)) for m in self.final_support)};"
                f"n_u1={d.get('n_u1', 0)};outer={d.get('outer_iter', 0)};"
                f"converged={int(d.get('converged', True))};residuals={res}")


# ---------------------------------------------------------------------------
# stage 1


def block_energies(y_p: np.ndarray, P: PreambleMatrix) -> np.ndarray:
    """``||P_m^H y_p||^2`` for every preamble block ``m``."""
    c = P.matrix.conj().T @ y_p
    return (np.abs(c.reshape(-1, P.tau)) ** 2).sum(axis=1)


def default_threshold(cfg: SystemConfig, P: PreambleMatrix | None = None) -> float:
    """``xi_scale * sigma2 * tau * c``, ``c`` the mean squared column norm of ``P`` (1 for unit preambles)."""
    c = 1.0 if P is None else float((np.abs(P.matrix) ** 2).sum(axis=0).mean())
    return cfg.xi_scale * cfg.sigma2 * cfg.tau * c


def initial_aud(y_p: np.ndarray, P: PreambleMatrix, xi: float) -> np.ndarray:
    """Indices ``m`` with ``||P_m^H y_p||^2 >= xi``; may be empty."""
    if xi <= 0:
        raise ValueError("xi must be > 0")
    return np.flatnonzero(block_energies(y_p, P) >= xi)


def cap_hypothesis(y_p: np.ndarray, P: PreambleMatrix, U, limit: int | None = None) -> np.ndarray:
    """Keep the ``limit`` highest-energy blocks of ``U`` (default ``floor(N_zc/tau)``).

    Keeps the stage-1 LS problem determined when the threshold admits too many.
    """
    U = np.asarray(U, dtype=int)
    limit = P.matrix.shape[0] // P.tau if limit is None else limit
    if U.size <= limit:
        return U
    e = block_energies(y_p, P)[U]
    return np.sort(U[np.argsort(-e, kind="stable")[:limit]])


def ls_channel_estimate(y_p: np.ndarray, P: PreambleMatrix, U) -> tuple[np.ndarray, dict]:
    """Time-domain LS estimates ``(P_U)^+ y_p``, returned as ``(|U|, tau)``.

    Singular values below ``1e-10`` of the largest are cut; the condition number
    and an underdetermined flag are reported in the diagnostics.
    """
    U = np.asarray(U, dtype=int)
    tau = P.tau
    if U.size == 0:
        return np.zeros((0, tau), dtype=complex), {"cond": 1.0, "underdetermined": False, "ill_conditioned": False,
                                                   "rank": 0, "unit_error_var": np.zeros(0)}
    sub = P.matrix[:, P.block_columns(U)]
    sol, rank, sv, var = _lstsq(sub, y_p)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    diag = {
        "cond": cond,
        "underdetermined": sub.shape[1] > sub.shape[0],
        "ill_conditioned": cond > COND_LIMIT,
        "rank": int(rank),
        # per-candidate sum of tap-error variances per unit noise power
        "unit_error_var": var.reshape(U.size, tau).sum(axis=1),
    }
    return sol.reshape(U.size, tau), diag


def _lstsq(a: np.ndarray, b: np.ndarray):
    """Minimum-norm LS via a truncated SVD; falls back to the QR-iteration SVD driver.

    Also returns the diagonal of ``pinv(a) pinv(a)^H``: the error variance of
    each unknown per unit noise power.
    """
    try:
        u, sv, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        u, sv, vh = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
    keep = sv > PINV_RCOND * sv[0] if sv.size and sv[0] > 0 else np.zeros(sv.size, dtype=bool)
    coef = (u[:, keep].conj().T @ b) / sv[keep]
    v = vh[keep].conj().T
    var = (np.abs(v) ** 2 / sv[keep] ** 2).sum(axis=1)
    return v @ coef, int(keep.sum()), sv, var


def freq_lift(taps: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Frequency-domain estimates over the ``N_sc_d`` data subcarriers."""
    return taps_to_freq(np.asarray(taps), cfg.N_sc_d)


def prune_hypothesis(y_p: np.ndarray, P: PreambleMatrix, U, sigma2: float) -> np.ndarray:
    """Greedy block-OMP over the stage-1 set, stopped at the Gaussian noise level."""
    U = np.asarray(U, dtype=int)
    n = y_p.size
    stop = sigma2 * (n + 2 * np.sqrt(n * np.log(n)))
    chosen: list[int] = []
    r = y_p.copy()
    remaining = list(U)
    while remaining and np.vdot(r, r).real > stop and P.tau * (len(chosen) + 1) <= n:
        e = [np.sum(np.abs(P.block(m).conj().T @ r) ** 2) for m in remaining]
        chosen.append(remaining.pop(int(np.argmax(e))))
        sub = P.matrix[:, P.block_columns(chosen)]
        coef = _lstsq(sub, y_p)[0]
        r = y_p - sub @ coef
    return np.array(sorted(chosen), dtype=int)


# ---------------------------------------------------------------------------
# measurement assembly


def assemble_measurement(freq: np.ndarray, U, signatures: SignaturePool, base: BasePool,
                         cfg: SystemConfig) -> MeasurementEnsemble:
    """Build ``phi[i, l, :, j] = h_hat_i^(U_j) * s_{U_j, l}`` for all groups and layers."""
    U = np.asarray(U, dtype=int)
    sub = group_subcarriers(cfg)
    gains = np.asarray(freq)[:, sub]  # (|U|, N_g, M)
    seqs = base.sequences[:, signatures.assignments[U]]  # (M, |U|, ups)
    phi = np.einsum("jim,mjl->ilmj", gains, seqs)
    return MeasurementEnsemble(U, phi)


def unit_channel_measurement(U, signatures: SignaturePool, base: BasePool, cfg: SystemConfig) -> MeasurementEnsemble:
    """Flat unit channel for every candidate (narrowband single-stage receiver)."""
    U = np.asarray(U, dtype=int)
    return assemble_measurement(np.ones((U.size, cfg.N_sc_d), dtype=complex), U, signatures, base, cfg)


# ---------------------------------------------------------------------------
# stage 2


def stop_threshold(cfg: SystemConfig, sigma2: float | None = None, n_selected: int = 0) -> float:
    """Residual energy at which wSOMP stops.

    ``gaussian``: ``upsilon sigma2 (M + 2 sqrt(M ln M))``; ``arbitrary``:
    ``upsilon sigma2 M``; ``projected``: the Gaussian form
    ``sigma2 (n + 2 sqrt(n ln n))`` on the ``n = upsilon (M - n_selected)``
    dimensions left once ``n_selected`` atoms have been fitted per layer
    (``iorls`` adds the expected channel-estimate mismatch of the fitted atoms).
    """
    s2 = cfg.sigma2 if sigma2 is None else sigma2
    M, ups = cfg.M, cfg.upsilon
    if cfg.stop_rule == "arbitrary":
        return ups * s2 * M
    if cfg.stop_rule == "projected":
        n = ups * max(M - n_selected, 0)
        return s2 * (n + 2 * np.sqrt(n * np.log(n))) if n > 1 else s2 * n
    return ups * s2 * (M + 2 * np.sqrt(M * np.log(M))) if M > 1 else ups * s2 * M


def stop_schedule(cfg: SystemConfig, sigma2: float | None = None, max_atoms: int | None = None) -> np.ndarray:
    """``stop_threshold`` for ``0..max_atoms`` selected atoms."""
    k = cfg.M if max_atoms is None else max_atoms
    return np.array([stop_threshold(cfg, sigma2, j) for j in range(k + 1)])


def batched_ls(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """LS coefficients for a stack of tall systems ``a[..., M, J] x = b[..., M]``.

    Reduced QR per matrix; stacks whose ``R`` is numerically singular fall
    back to the truncated pseudo-inverse.
    """
    q, rr = np.linalg.qr(a)
    d = np.abs(np.diagonal(rr, axis1=-2, axis2=-1))
    ok = d.min(axis=-1) > PINV_RCOND * np.maximum(d.max(axis=-1), 1e-300)
    rhs = np.einsum("...mj,...m->...j", q.conj(), b)
    out = np.empty(a.shape[:-2] + a.shape[-1:], dtype=complex)
    if ok.all() and a.shape[-1] <= a.shape[-2]:
        return np.linalg.solve(rr, rhs[..., None])[..., 0]
    bad = ~ok if a.shape[-1] <= a.shape[-2] else np.ones(ok.shape, dtype=bool)
    good = ~bad
    if good.any():
        out[good] = np.linalg.solve(rr[good], rhs[good][..., None])[..., 0]
    out[bad] = np.einsum("...jm,...m->...j", np.linalg.pinv(a[bad], rcond=PINV_RCOND), b[bad])
    return out


def layered_ls(y: np.ndarray, phi: np.ndarray, cols) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer LS on the selected columns; returns ``(coef (ups, |J|), residual (ups, M))``.

    The stacked block matrix restricted to whole signature blocks is block
    diagonal over layers, so its pseudo-inverse splits into one per layer.
    """
    sub = phi[:, :, cols]
    coef = batched_ls(sub, y)
    return coef, y - np.einsum("lmj,lj->lm", sub, coef)


def wsomp(y: np.ndarray, phi: np.ndarray, weights, xi2: float, max_atoms: int, rtol: float = 1e-12):
    """Weighted SOMP over the block dictionary of one symbol group.

    ``y`` is ``(upsilon, M)`` and ``phi`` is ``(upsilon, M, U)``.  The block score
    is ``w_m^2 * sum_l |phi_l[:, m]^H r_l|^2 / ||block m||_F^2``; zero-weight
    blocks are never selected.  ``xi2`` is a scalar stop level, a schedule
    indexed by the number of atoms already selected, or a callable of the
    selected positions.  Returns ``(positions, x_hat (U, upsilon),
    residual_norm2_history)``.
    """
    y = np.asarray(y)
    n_u = phi.shape[2]
    w = np.asarray(weights, dtype=float)
    norms2 = (np.abs(phi) ** 2).sum(axis=(0, 1))
    eligible = (w > 0) & (norms2 > 0)
    w2 = w ** 2
    safe = np.where(norms2 > 0, norms2, 1.0)
    r = y.copy()
    e0 = float(np.vdot(y, y).real)
    history = [e0]
    selected: list[int] = []
    coef = np.zeros((y.shape[0], 0), dtype=complex)
    if callable(xi2):
        level = xi2
    else:
        sched = np.broadcast_to(np.asarray(xi2, dtype=float), (max_atoms + 1,)) if np.ndim(xi2) == 0 else np.asarray(xi2)

        def level(sel):
            return sched[len(sel)]
    floor = rtol * e0
    while len(selected) < max_atoms and history[-1] > max(level(selected), floor) and eligible.any():
        corr = np.einsum("lmu,lm->lu", phi.conj(), r)
        score = w2 * (np.abs(corr) ** 2).sum(axis=0) / safe
        score[~eligible] = -np.inf
        j = int(np.argmax(score))
        selected.append(j)
        eligible[j] = False
        coef, r = layered_ls(y, phi, selected)
        history.append(float(np.vdot(r, r).real))
    x_hat = np.zeros((n_u, y.shape[0]), dtype=complex)
    if selected:
        x_hat[selected] = coef.T
    return np.array(selected, dtype=int), x_hat, history


def wsomp_groups(y: np.ndarray, phi: np.ndarray, weights, sched, max_atoms: int,
                 mismatch: np.ndarray | None = None, rtol: float = 1e-12) -> list[np.ndarray]:
    """``wsomp`` run on every group at once; returns the selected positions per group.

    ``y`` is ``(N_g, upsilon, M)`` and ``phi`` ``(N_g, upsilon, M, U)``.  All
    running groups advance in lockstep, so their LS problems are solved as one
    batch.  ``sched[j]`` is the stop level after ``j`` atoms; with
    ``mismatch`` (per candidate) the level grows by
    ``(M - j)/M * upsilon * sum(mismatch[selected])``.
    """
    n_g, ups, M, n_u = phi.shape
    w2 = np.asarray(weights, dtype=float) ** 2
    norms2 = (np.abs(phi) ** 2).sum(axis=(1, 2))  # (N_g, U)
    eligible = (w2 > 0)[None, :] & (norms2 > 0)
    safe = np.where(norms2 > 0, norms2, 1.0)
    r = np.array(y, dtype=complex)
    res = (np.abs(r) ** 2).sum(axis=(1, 2))
    floor = rtol * res
    sel = np.zeros((n_g, max_atoms), dtype=int)
    running = np.ones(n_g, dtype=bool)
    mis_sum = np.zeros(n_g)
    count = np.zeros(n_g, dtype=int)
    phic = phi.conj()
    # orthonormal basis of the selected columns per group and layer; the LS
    # residual is y minus its projection onto that span
    basis = np.zeros((n_g, ups, M, max_atoms), dtype=complex)
    for step in range(max_atoms):
        level = np.full(n_g, sched[step])
        if mismatch is not None:
            level = level + (M - step) / M * ups * mis_sum
        running &= (res > np.maximum(level, floor)) & eligible.any(axis=1)
        g = np.flatnonzero(running)
        if g.size == 0:
            break
        if g.size == n_g:
            g = slice(None)
        corr = np.einsum("glmu,glm->glu", phic[g], r[g])
        score = w2[None, :] * (np.abs(corr) ** 2).sum(axis=1) / safe[g]
        score[~eligible[g]] = -np.inf
        j = np.argmax(score, axis=1)
        rows = np.arange(n_g) if isinstance(g, slice) else g
        sel[rows, step] = j
        eligible[rows, j] = False
        count[g] += 1
        if mismatch is not None:
            mis_sum[g] += mismatch[j]
        a = np.take_along_axis(phi[g], np.broadcast_to(j[:, None, None, None], (j.size, ups, M, 1)), axis=3)[..., 0]
        a_norm = np.linalg.norm(a, axis=2)
        q = basis[g, :, :, :step]
        for _ in range(2):  # Gram-Schmidt with one reorthogonalization pass
            a = a - np.einsum("glmk,glk->glm", q, np.einsum("glmk,glm->glk", q.conj(), a))
        n = np.linalg.norm(a, axis=2)
        dependent = n <= PINV_RCOND * np.maximum(a_norm, 1e-300)
        a = np.where(dependent[..., None], 0.0, a / np.where(dependent, 1.0, n)[..., None])
        basis[rows, :, :, step] = a
        rg = r[g]
        rg = rg - a * np.einsum("glm,glm->gl", a.conj(), rg)[..., None]
        r[g] = rg
        res[g] = (np.abs(rg) ** 2).sum(axis=(1, 2))
    return [sel[i, :count[i]].copy() for i in range(n_g)]


def update_weights(per_group_supports, n_candidates: int, n_groups: int) -> np.ndarray:
    """``w_m`` = fraction of groups whose support contains candidate position ``m``."""
    counts = np.zeros(n_candidates)
    for sup in per_group_supports:
        counts[np.asarray(list(sup), dtype=int)] += 1
    return counts / n_groups


def iorls(y_data: np.ndarray, ensemble: MeasurementEnsemble, cfg: SystemConfig,
          max_outer: int | None = None, sigma2: float | None = None) -> DetectionState:
    """Parallel wSOMP over the groups, alternated with weight updates.

    Stops once every group reports the same support; otherwise after
    ``max_outer`` rounds the majority set ``{w > 1/2}`` is returned (flagged).
    """
    cand = ensemble.candidates
    n_u = cand.size
    n_g = y_data.shape[0]
    max_outer = cfg.max_outer if max_outer is None else max_outer
    max_atoms = min(n_u, cfg.M)
    sched = stop_schedule(cfg, sigma2, max_atoms)
    # channel-estimate mismatch of fitted atoms stays in the residual
    mismatch = ensemble.ce_var if cfg.stop_rule == "projected" else None
    w = np.ones(n_u)
    first: list = []
    if n_u == 0:
        return DetectionState(cand, w, [set() for _ in range(n_g)], np.array([], dtype=int), 0, True, [])
    supports: list = []
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        supports = [set(s.tolist()) for s in wsomp_groups(y_data, ensemble.phi, w, sched, max_atoms, mismatch)]
        if it == 1:
            first = [set(cand[list(s)].tolist()) for s in supports]
        w = update_weights(supports, n_u, n_g)
        if all(s == supports[0] for s in supports):
            converged = True
            break
    if converged:
        final_pos = sorted(supports[0])
    else:
        final_pos = np.flatnonzero(w > 0.5).tolist()
    per_group = [set(cand[list(s)].tolist()) for s in supports]
    return DetectionState(cand, w, per_group, np.sort(cand[final_pos]).astype(int), it, converged, first)


# ---------------------------------------------------------------------------
# final estimation


def qpsk_decide(x: np.ndarray) -> np.ndarray:
    """Nearest QPSK point; exact zeros stay zero."""
    out = (np.sign(x.real) + 1j * np.sign(x.imag)) / np.sqrt(2)
    return np.where(x == 0, 0, out)


def finalize(obs: SlotObservation, support, P: PreambleMatrix | None, signatures: SignaturePool,
             base: BasePool, cfg: SystemConfig, diagnostics: dict | None = None) -> DetectionReport:
    """Second-round CE on ``support``, block LS symbol estimates and hard QPSK decisions."""
    F = np.asarray(sorted(int(m) for m in support), dtype=int)
    n_g, ups, M = obs.y_data.shape
    x_hat = np.zeros((n_g, cfg.N_T, ups), dtype=complex)
    diag = dict(diagnostics or {})
    if F.size == 0:
        diag["no_users_detected"] = True
        return DetectionReport(F, np.zeros((0, cfg.tau), complex), np.zeros((0, n_g, M), complex),
                               x_hat, x_hat.copy(), diag)
    if cfg.two_stage:
        taps, ce = ls_channel_estimate(obs.y_p, P, F)
        diag["ce_final"] = ce
        fr = freq_lift(taps, cfg)
        ens = assemble_measurement(fr, F, signatures, base, cfg)
        gains = fr[:, group_subcarriers(cfg)]
    else:
        ens = unit_channel_measurement(F, signatures, base, cfg)
    residuals = []
    cols = list(range(F.size))
    for i in range(n_g):
        coef, r = layered_ls(obs.y_data[i], ens.phi[i], cols)
        x_hat[i, F] = coef.T
        residuals.append(float(np.vdot(r, r).real))
    if not cfg.two_stage:
        # first symbol of each frame is a known unit pilot: it carries the flat channel
        h = x_hat[0, F, 0].copy()
        h = np.where(h == 0, 1, h)
        x_hat[:, F, :] /= h[None, :, None]
        gains = np.broadcast_to(h[:, None, None], (F.size, n_g, M))
        taps = h[:, None]
    diag["final_residuals"] = residuals
    return DetectionReport(F, taps, gains, x_hat, qpsk_decide(x_hat), diag)


@dataclass(frozen=True)
class ReceiverContext:
    """Pools shared by every trial of a configuration."""

    cfg: SystemConfig
    base: BasePool
    signatures: SignaturePool
    P: PreambleMatrix | None
    preambles: PreamblePool | None = None


def detect(obs: SlotObservation, ctx: ReceiverContext, oracle_support=None,
           xi: float | None = None) -> tuple[DetectionReport, DetectionState]:
    """Run the whole receiver on one slot.

    With ``oracle_support`` both detection stages are bypassed and only the
    final estimation runs on the given signatures.
    """
    cfg = ctx.cfg
    if oracle_support is not None:
        sup = np.asarray(sorted(int(m) for m in oracle_support), dtype=int)
        state = DetectionState(sup, np.ones(sup.size), [], sup, 0, True, [])
        return finalize(obs, sup, ctx.P, ctx.signatures, ctx.base, cfg, {"oracle": True}), state
    diag: dict = {}
    if cfg.two_stage:
        thr = default_threshold(cfg, ctx.P) if xi is None else xi
        u1 = initial_aud(obs.y_p, ctx.P, thr)
        u1 = cap_hypothesis(obs.y_p, ctx.P, u1)
        if cfg.prune and u1.size:
            u1 = prune_hypothesis(obs.y_p, ctx.P, u1, obs.sigma2)
        taps, ce = ls_channel_estimate(obs.y_p, ctx.P, u1)
        diag["ce_stage1"] = ce
        ens = assemble_measurement(freq_lift(taps, cfg), u1, ctx.signatures, ctx.base, cfg)
        ens = MeasurementEnsemble(ens.candidates, ens.phi, obs.sigma2 * ce["unit_error_var"])
    else:
        u1 = np.arange(cfg.N_T)
        ens = unit_channel_measurement(u1, ctx.signatures, ctx.base, cfg)
    state = iorls(obs.y_data, ens, cfg, sigma2=obs.sigma2)
    diag.update(n_u1=int(u1.size), outer_iter=state.outer_iter, converged=state.converged)
    return finalize(obs, state.final_support, ctx.P, ctx.signatures, ctx.base, cfg, diag), state
