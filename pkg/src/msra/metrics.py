"""Empirical trial scoring, aggregation and the analytic misdetection bounds."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from .waveform import babel_coherence_2, isometry_constant, recovery_margin

CSV_SCHEMA = "# msra-summary v1"
CSV_COLUMNS = ("axis_value", "metric", "value", "ci_low", "ci_high", "trials")


# ---------------------------------------------------------------------------
# trial outcomes


@dataclass
class TrialOutcome:
    collided: np.ndarray  # per user
    preamble_detected: np.ndarray
    signature_detected: np.ndarray
    all_symbols_correct: np.ndarray
    n_support: int = 0
    n_u1: int = 0
    n_final: int = 0
    misses: int = 0
    false_alarms: int = 0
    ser_errors: int = 0  # over users whose transmission did not collide
    ser_symbols: int = 0
    ser_all_errors: int = 0  # over every active user
    ser_all_symbols: int = 0
    group_misses: int = 0  # first-round groups whose support missed a true signature
    n_groups: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return int(self.collided.size)

    @property
    def success(self) -> np.ndarray:
        return ~self.collided & self.signature_detected & self.preamble_detected

    @property
    def misdetected(self) -> bool:
        return self.misses > 0


def score_trial(chosen, support, u1, final, true_symbols, decisions, first_round_supports=(),
                pilot: bool = False) -> TrialOutcome:
    """Compare a detection against the ground truth of one trial.

    ``true_symbols`` is ``(K, N_g, upsilon)`` and ``decisions`` ``(N_g, N_T, upsilon)``.
    A missed user has every symbol counted as an error.
    """
    chosen = np.asarray(chosen, dtype=int)
    support = np.asarray(support, dtype=int)
    u1 = np.asarray(u1, dtype=int)
    final = np.asarray(final, dtype=int)
    vals, counts = np.unique(chosen, return_counts=True)
    collided_sigs = vals[counts >= 2]
    collided = np.isin(chosen, collided_sigs)
    pre = np.isin(chosen, u1)
    sig = np.isin(chosen, final)
    n_sym_user = int(np.prod(true_symbols.shape[1:])) if chosen.size else 0
    if pilot:
        n_sym_user -= 1
    errors = np.zeros(chosen.size, dtype=int)
    for k, m in enumerate(chosen):
        if not sig[k]:
            errors[k] = n_sym_user
            continue
        wrong = decisions[:, m, :] != true_symbols[k]
        if pilot:
            wrong[0, 0] = False
        errors[k] = int(wrong.sum())
    ok = errors == 0
    keep = ~collided
    first_miss = sum(1 for s in first_round_supports if not set(support.tolist()) <= s)
    return TrialOutcome(
        collided=collided, preamble_detected=pre, signature_detected=sig, all_symbols_correct=ok,
        n_support=int(support.size), n_u1=int(u1.size), n_final=int(final.size),
        misses=int(np.setdiff1d(support, final).size), false_alarms=int(np.setdiff1d(final, support).size),
        ser_errors=int(errors[keep].sum()), ser_symbols=int(keep.sum() * n_sym_user),
        ser_all_errors=int(errors.sum()), ser_all_symbols=int(chosen.size * n_sym_user),
        group_misses=first_miss, n_groups=len(first_round_supports),
    )


# ---------------------------------------------------------------------------
# aggregation


def wilson_interval(k: float, n: float, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        return (0.0, 1.0)
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if k <= 0 else max(0.0, centre - half)
    hi = 1.0 if k >= n else min(1.0, centre + half)
    return (lo, hi)


@dataclass(frozen=True)
class MetricRow:
    metric: str
    value: float
    ci_low: float
    ci_high: float
    trials: int


def _prop(name, k, n, trials):
    lo, hi = wilson_interval(k, n)
    return MetricRow(name, (k / n) if n else 0.0, lo, hi, trials)


def aggregate(outcomes) -> list[MetricRow]:
    """Summary rows with 95% Wilson intervals.

    ``p_mis`` counts trials missing at least one transmitted signature;
    ``failure_rate`` and ``collision_rate`` are pooled over users; ``ser`` is
    over users whose transmission did not collide.
    """
    outcomes = list(outcomes)
    n = len(outcomes)
    users = sum(o.n_users for o in outcomes)
    failed = sum(int((~o.success).sum()) for o in outcomes)
    coll = sum(int(o.collided.sum()) for o in outcomes)
    mis_trials = sum(1 for o in outcomes if o.misdetected)
    pre_miss = sum(int((~o.preamble_detected).sum()) for o in outcomes)
    ser_e = sum(o.ser_errors for o in outcomes)
    ser_n = sum(o.ser_symbols for o in outcomes)
    sera_e = sum(o.ser_all_errors for o in outcomes)
    sera_n = sum(o.ser_all_symbols for o in outcomes)
    g_miss = sum(o.group_misses for o in outcomes)
    g_n = sum(o.n_groups for o in outcomes)
    fa = np.array([o.false_alarms for o in outcomes], dtype=float)
    u1 = np.array([o.n_u1 for o in outcomes], dtype=float)

    def mean_row(name, v):
        if v.size == 0:
            return MetricRow(name, 0.0, 0.0, 0.0, n)
        m = float(v.mean())
        half = 1.959963984540054 * float(v.std(ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
        return MetricRow(name, m, m - half, m + half, n)

    return [
        _prop("p_mis", mis_trials, n, n),
        _prop("failure_rate", failed, users, n),
        _prop("collision_rate", coll, users, n),
        _prop("preamble_miss_rate", pre_miss, users, n),
        _prop("ser", ser_e, ser_n, n),
        _prop("ser_all", sera_e, sera_n, n),
        _prop("group_mis_rate", g_miss, g_n, n),
        mean_row("false_alarms", fa),
        mean_row("n_u1", u1),
    ]


def rows_by_metric(rows) -> dict:
    return {r.metric: r for r in rows}


def write_summary_csv(points, path=None) -> str:
    """``points`` is a sequence of ``(axis_value, rows)``; returns the CSV text."""
    buf = io.StringIO()
    buf.write(CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for axis_value, rows in points:
        for r in rows:
            w.writerow([_fmt(axis_value), r.metric, _fmt(r.value), _fmt(r.ci_low), _fmt(r.ci_high), r.trials])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.10g}"


def read_summary_csv(path) -> list[dict]:
    with open(path) as fh:
        head = fh.readline().strip()
        if head != CSV_SCHEMA:
            raise ValueError(f"unexpected schema line {head!r}")
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# analytic expressions


def analytic_collision_rate(mean_active: float, n_rr: int) -> float:
    """``1 - exp(-mean_active / n_rr)`` for Poisson arrivals."""
    if mean_active < 0 or n_rr < 1:
        raise ValueError("need mean_active >= 0 and n_rr >= 1")
    return -math.expm1(-mean_active / n_rr)


@dataclass(frozen=True)
class BoundInputs:
    c_lambda: float
    d_lambda: float
    eta: float
    gamma_lambda: float
    upsilon: int
    n_support: int
    n_u1: int
    n_total: int
    cross_max: float = 0.0  # max cross-correlation sum before the noise scaling
    omega_max2: float = 0.0
    eta_empirical_p99: float = float("nan")
    rank_deficient: bool = False

    @property
    def applicable(self) -> bool:
        return self.eta < (self.c_lambda - self.d_lambda) * math.sqrt(2 / math.pi) * self.upsilon

    @property
    def premise_gamma_disagree(self) -> bool:
        """The applicability premise and the sign of ``gamma`` point different ways."""
        return self.applicable != (self.gamma_lambda > 0)


def _projector_complement(phi_j: np.ndarray, M: int) -> np.ndarray:
    if phi_j.shape[1] == 0:
        return np.eye(M, dtype=complex)
    return np.eye(M, dtype=complex) - phi_j @ np.linalg.pinv(phi_j, rcond=1e-10)


def _unit(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=0)
    return a / np.where(n > 0, n, 1)


def _layer_terms(layers, support, J, others):
    """Per-layer self terms ``||Q phi_m|| / ||phi_m||`` and cross sums."""
    rest = [m for m in support if m not in set(J)]
    self_terms = []
    cross = []
    for phi in layers:
        phi = _unit(np.asarray(phi))
        Q = _projector_complement(phi[:, list(J)], phi.shape[0])
        q_rest = Q @ phi[:, rest]
        self_terms.append(np.linalg.norm(q_rest, axis=0))
        if others:
            q_k = Q @ phi[:, others]
            nk = np.linalg.norm(q_k, axis=0)
            g = np.abs(phi[:, rest].conj().T @ q_k) / np.where(nk > 0, nk, 1)  # (|rest|, |others|)
            cross.append((g ** 2).sum(axis=0))
        else:
            cross.append(np.zeros(0))
    return rest, np.array(self_terms), np.array(cross)


def compute_bound_inputs(layers, support, J=(), sigma2: float = 0.0, n_total: int | None = None,
                         n_noise_draws: int = 0, rng: np.random.Generator | None = None) -> BoundInputs:
    """Evaluate ``c``, ``d``, ``eta`` and ``gamma`` on per-layer dictionaries.

    ``layers`` are the ``(M, U)`` dictionaries restricted to the stage-1
    hypothesis; columns outside ``support`` are the false-alarm atoms.  ``eta``
    is the expected noise-to-residual correlation energy
    ``sigma2 * sum_l sum_m ||Q_J phi_m||^2`` over all candidate atoms and
    ``|omega_max|^2`` is the expected maximum of ``|others|`` exponential
    variables of mean ``upsilon*sigma2`` (harmonic-number form).
    """
    layers = [np.asarray(phi) for phi in layers]
    ups = len(layers)
    n_u = layers[0].shape[1]
    support = sorted(int(m) for m in support)
    J = sorted(int(m) for m in J)
    others = [k for k in range(n_u) if k not in set(support)]
    rest, self_terms, cross = _layer_terms(layers, support, J, others)
    c = float((self_terms ** 2).sum(axis=0).min()) if rest else float(ups)
    cross_max = float(cross.sum(axis=0).max()) if others and rest else 0.0
    harmonic = float(np.sum(1.0 / np.arange(1, len(others) + 1))) if others else 0.0
    omega2 = ups * sigma2 * harmonic
    d = omega2 * cross_max
    proj_energy = 0.0
    rank_def = False
    for phi in layers:
        phi = _unit(phi)
        if J and isometry_constant(phi, J) >= 1.0:
            rank_def = True
        Q = _projector_complement(phi[:, J], phi.shape[0])
        proj_energy += float((np.abs(Q @ phi) ** 2).sum())
    eta = sigma2 * proj_energy
    eta_p99 = float("nan")
    if n_noise_draws and sigma2 > 0:
        rng = rng or np.random.default_rng(0)
        M = layers[0].shape[0]
        draws = np.zeros(n_noise_draws)
        for phi in layers:
            phi = _unit(phi)
            Q = _projector_complement(phi[:, J], M)
            w = np.sqrt(sigma2 / 2) * (rng.standard_normal((M, n_noise_draws))
                                       + 1j * rng.standard_normal((M, n_noise_draws)))
            draws += (np.abs(phi.conj().T @ (Q @ w)) ** 2).sum(axis=0)
        eta_p99 = float(np.percentile(draws, 99))
    den = c + d
    gamma = (c - d - eta / math.sqrt(2 * ups / math.pi)) / den if den > 0 else float("nan")
    return BoundInputs(c, d, eta, gamma, ups, len(support), n_u, n_total if n_total is not None else n_u,
                       cross_max, omega2, eta_p99, rank_def)


@dataclass(frozen=True)
class BoundResult:
    raw: float
    clamped: float
    applicable: bool


def bound_single_group(inputs: BoundInputs) -> BoundResult:
    """``|U1| * 2^|support| * exp(-upsilon * gamma^2 / pi)``; raw value may exceed 1."""
    if not inputs.applicable or not math.isfinite(inputs.gamma_lambda):
        return BoundResult(float("nan"), float("nan"), False)
    log_b = (math.log(max(inputs.n_u1, 1)) + inputs.n_support * math.log(2)
             - inputs.upsilon * inputs.gamma_lambda ** 2 / math.pi)
    raw = math.exp(min(log_b, 700.0))
    return BoundResult(raw, min(1.0, raw), True)


@dataclass(frozen=True)
class FrameBound:
    exact_tail: float
    intermediate: float  # dominant-term bound on the tail
    substituted: float  # after inserting the single-group bound constants
    closed_form: float
    K1: float
    K2: float
    K3: float
    p_single: float
    applicable: bool


def binomial_tail(p: float, n_groups: int) -> float:
    """Probability that at least ``ceil(N_g/2)`` of ``N_g`` independent groups fail."""
    k0 = math.ceil(n_groups / 2)
    return float(binom.sf(k0 - 1, n_groups, p))


def bound_frame(inputs: BoundInputs, n_groups: int, p_single: float | None = None) -> FrameBound:
    """Frame-level misdetection bound ``K3 * exp(-(K2*upsilon - 1) * N_g / 2)``.

    ``K1 = N_T 2^|support|``, ``K2 = gamma^2/pi`` and
    ``K3 = (N_g/2) (2e)^(N_g/2) K1``.  ``p_single`` defaults to
    ``min(1, K1 exp(-K2 upsilon))``; the exact binomial tail at that value and
    the intermediate expressions are returned for cross-checking.
    """
    nan = float("nan")
    if not inputs.applicable or not math.isfinite(inputs.gamma_lambda):
        return FrameBound(nan, nan, nan, nan, nan, nan, nan, nan, False)
    h = n_groups / 2
    log_k1 = math.log(inputs.n_total) + inputs.n_support * math.log(2)
    K2 = inputs.gamma_lambda ** 2 / math.pi
    log_k3 = math.log(h) + h * math.log(2 * math.e) + log_k1
    if p_single is None:
        p_single = min(1.0, math.exp(min(log_k1 - K2 * inputs.upsilon, 0.0)))
    tail = binomial_tail(p_single, n_groups)
    inter = h * (2 * math.e) ** h * (p_single * (1 - p_single)) ** h
    e = math.exp(min(log_k1 - K2 * inputs.upsilon * h, 700.0))
    subst = h * (2 * math.e) ** h * e * (1 - e)
    closed = math.exp(min(log_k3 - (K2 * inputs.upsilon - 1) * h, 700.0))
    return FrameBound(tail, inter, subst, closed, math.exp(min(log_k1, 700.0)), K2,
                      math.exp(min(log_k3, 700.0)), p_single, True)


@dataclass(frozen=True)
class ChainReport:
    cross_lhs: float  # worst false-atom correlation with the unidentified support
    cross_rhs: float  # coherence / isometry bound on it
    self_lhs: float  # weakest residual self-correlation of an unidentified atom
    self_rhs: float
    margin: float  # combined recovery-margin constraint at the full support
    rank_deficient: bool

    @property
    def cross_holds(self) -> bool:
        return self.cross_lhs <= self.cross_rhs * (1 + 1e-12) + 1e-12

    @property
    def self_holds(self) -> bool:
        return self.self_lhs >= self.self_rhs - 1e-12 * max(1.0, abs(self.self_rhs))


def _mu_delta(phi: np.ndarray, J) -> tuple[float, float]:
    if not J:
        return 0.0, 0.0
    return babel_coherence_2(phi, J), isometry_constant(phi, J)


def constraint_chain_check(layers, support, J, eta: float = 0.0) -> ChainReport:
    """Both sides of the cross-term and self-term coherence inequalities at ``J``.

    Cross term: ``max_k sum_l sum_{m in support\\J} |<phi_m, Q_J phi_k>|^2`` against
    ``sum_l mu2_l(J) / (1 - delta_l(J))``.  Self term:
    ``min_m sum_l |<phi_m, Q_J phi_m>|`` against
    ``upsilon - sum_l mu2_l(J)^2 / (1 - delta_l(J))``.  ``margin`` is the
    recovery margin over ``support`` with ``eta``.
    """
    layers = [np.asarray(phi) for phi in layers]
    ups = len(layers)
    n_u = layers[0].shape[1]
    support = sorted(int(m) for m in support)
    J = sorted(int(m) for m in J)
    others = [k for k in range(n_u) if k not in set(support)]
    rest, self_terms, cross = _layer_terms(layers, support, J, others)
    md = [_mu_delta(phi, J) for phi in layers]
    rank_def = any(dl >= 1.0 for _, dl in md)
    with np.errstate(divide="ignore"):
        cross_rhs = float(sum(mu / (1 - dl) for mu, dl in md))
        self_rhs = float(ups - sum(mu ** 2 / (1 - dl) for mu, dl in md))
    cross_lhs = float(cross.sum(axis=0).max()) if others and rest else 0.0
    self_lhs = float(self_terms.sum(axis=0).min()) if rest else float(ups)
    margin = recovery_margin(layers, support, eta).margin
    return ChainReport(cross_lhs, cross_rhs, self_lhs, self_rhs, margin, rank_def)
