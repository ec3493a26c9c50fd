"""User activity, QPSK frames and the superposed preamble and data observations."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import ChannelRealization, awgn
from .config import SystemConfig
from .waveform import BasePool, PreamblePool, SignaturePool

QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2)


@dataclass(frozen=True)
class ActivityDraw:
    chosen: np.ndarray  # signature index per active user
    support: np.ndarray  # sorted distinct chosen indices
    collided: np.ndarray  # sorted indices chosen by >= 2 users

    @property
    def n_users(self) -> int:
        return self.chosen.size

    def user_collided(self) -> np.ndarray:
        return np.isin(self.chosen, self.collided)


@dataclass(frozen=True)
class TxFrame:
    symbols: np.ndarray  # (K, N_g, upsilon)
    signature: np.ndarray  # (K,)


@dataclass(frozen=True)
class SlotObservation:
    y_p: np.ndarray  # (N_zc,)
    y_data: np.ndarray  # (N_g, upsilon, M)
    sigma2: float

    def stacked(self, i: int) -> np.ndarray:
        """``y_i``: the ``upsilon`` per-symbol vectors of group ``i`` concatenated."""
        return self.y_data[i].reshape(-1)


def activity_from_choices(chosen) -> ActivityDraw:
    chosen = np.asarray(chosen, dtype=np.int64)
    vals, counts = np.unique(chosen, return_counts=True)
    return ActivityDraw(chosen, vals, vals[counts >= 2])


def draw_activity(cfg: SystemConfig, rng: np.random.Generator) -> ActivityDraw:
    """Each active user picks a signature uniformly and independently."""
    if cfg.activity == "poisson":
        n = int(rng.poisson(cfg.n_active))
    else:
        n = int(cfg.n_active)
    return activity_from_choices(rng.integers(0, cfg.N_T, size=n))


def modulate_frame(cfg: SystemConfig, n_users: int, rng: np.random.Generator, signature=None,
                   pilot: bool = False) -> TxFrame:
    """Uniform i.i.d. unit-power QPSK; ``pilot`` forces the first symbol of every frame to 1."""
    idx = rng.integers(0, 4, size=(n_users, cfg.N_g, cfg.upsilon))
    sym = QPSK[idx]
    if pilot and n_users:
        sym[:, 0, 0] = 1.0
    sig = np.zeros(n_users, dtype=np.int64) if signature is None else np.asarray(signature, dtype=np.int64)
    return TxFrame(sym, sig)


def circular_convolve(p: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Direct circular convolution of a length-N sequence with ``len(h) <= N`` taps."""
    out = np.zeros(p.shape[0], dtype=complex)
    for t, ht in enumerate(h):
        out += ht * np.roll(p, t)
    return out


def superpose_preambles(draw: ActivityDraw, channels: ChannelRealization, pool: PreamblePool,
                        sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """``y_p = sum_k p^(k) (*) h^(k) + w_p`` with circular convolution."""
    y = np.zeros(pool.N_zc, dtype=complex)
    taps = channels.taps
    for k, m in enumerate(draw.chosen):
        y += circular_convolve(pool.preambles[:, m], taps[k])
    return y + awgn(pool.N_zc, sigma2, rng)


def superpose_data(draw: ActivityDraw, channels: ChannelRealization, signatures: SignaturePool,
                   base: BasePool, frames: TxFrame, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """``y_{i,l} = sum_k diag(h_i^(k)) s_{k,l} d_{i,l}^(k) + w_{i,l}``, shape ``(N_g, upsilon, M)``."""
    sym = frames.symbols
    _, n_g, ups = sym.shape
    M = base.M
    if draw.n_users:
        seqs = base.sequences[:, signatures.assignments[draw.chosen]]  # (M, K, ups)
        y = np.einsum("kim,mkl,kil->ilm", channels.group_gains, seqs, sym)
    else:
        y = np.zeros((n_g, ups, M), dtype=complex)
    return y + awgn((n_g, ups, M), sigma2, rng)


def stacked_measurement_matrix(group_gains_by_signature: np.ndarray, signatures: SignaturePool,
                               base: BasePool, i: int) -> np.ndarray:
    """``A_i = [H_{i,1} S^(1), ..., H_{i,N_T} S^(N_T)]``, shape ``(upsilon*M, upsilon*N_T)``.

    ``group_gains_by_signature`` is ``(N_T, N_g, M)`` with zeros for unused signatures.
    """
    n_t = len(signatures)
    ups, M = signatures.upsilon, base.M
    A = np.zeros((ups * M, ups * n_t), dtype=complex)
    for m in range(n_t):
        g = group_gains_by_signature[m, i]
        for l, n in enumerate(signatures.assignments[m]):
            A[l * M:(l + 1) * M, m * ups + l] = g * base.sequences[:, n]
    return A


def block_sparse_symbols(draw: ActivityDraw, frames: TxFrame, n_t: int, i: int) -> np.ndarray:
    """``x_i`` with block ``m`` holding group ``i`` of the user on signature ``m``.

    Only meaningful without collisions.
    """
    ups = frames.symbols.shape[2]
    x = np.zeros(n_t * ups, dtype=complex)
    for k, m in enumerate(draw.chosen):
        x[m * ups:(m + 1) * ups] += frames.symbols[k, i]
    return x


# ---------------------------------------------------------------------------
# trial dumps


def _cplx(v) -> str:
    return " ".join(f"{z.real:.16e} {z.imag:.16e}" for z in np.ravel(v))


def write_trial_dump(path: str | Path, draw: ActivityDraw, channels: ChannelRealization,
                     obs: SlotObservation, extra: dict | None = None) -> None:
    """Fixed-precision text record of one trial for receiver regression tests."""
    import hashlib

    digest = hashlib.sha256(np.ascontiguousarray(channels.taps).tobytes()).hexdigest()[:16]
    n_g, ups, M = obs.y_data.shape
    with open(path, "w") as fh:
        fh.write("# msra-trial v1\n")
        for k, v in (extra or {}).items():
            fh.write(f"meta {k} {v}\n")
        fh.write("chosen " + " ".join(str(int(m)) for m in draw.chosen) + "\n")
        fh.write(f"channels_digest {digest}\n")
        fh.write(f"sigma2 {obs.sigma2:.16e}\n")
        fh.write(f"shape {n_g} {ups} {M} {obs.y_p.size}\n")
        fh.write("y_p " + _cplx(obs.y_p) + "\n")
        fh.write("y_data " + _cplx(obs.y_data) + "\n")


def read_trial_dump(path: str | Path) -> tuple[ActivityDraw, SlotObservation, dict]:
    rec: dict[str, list[str]] = {}
    meta: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        if key == "meta":
            meta[rest[0]] = rest[1] if len(rest) > 1 else ""
        else:
            rec[key] = rest

    def cplx(tokens):
        v = np.array(tokens, dtype=float)
        return v[0::2] + 1j * v[1::2]

    n_g, ups, M, n_zc = (int(t) for t in rec["shape"])
    draw = activity_from_choices([int(t) for t in rec.get("chosen", [])])
    obs = SlotObservation(cplx(rec["y_p"]), cplx(rec["y_data"]).reshape(n_g, ups, M), float(rec["sigma2"][0]))
    meta["channels_digest"] = rec["channels_digest"][0]
    return draw, obs, meta
