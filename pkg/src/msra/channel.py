"""Block-fading Rayleigh channels and complex white Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig


@dataclass(frozen=True)
class ChannelRealization:
    """Channels of ``K`` users stacked along the first axis.

    ``taps`` is ``(K, tau)``, ``freq`` is ``(K, N_sc_d)`` and ``group_gains``
    is ``(K, N_g, M)``: the subcarrier slice seen by each symbol group.
    """

    taps: np.ndarray
    freq: np.ndarray
    group_gains: np.ndarray

    def __len__(self):
        return self.taps.shape[0]

    def user(self, k: int) -> "ChannelRealization":
        return ChannelRealization(self.taps[k:k + 1], self.freq[k:k + 1], self.group_gains[k:k + 1])


def group_subcarriers(cfg: SystemConfig) -> np.ndarray:
    """Subcarrier indices of each symbol group, shape ``(N_g, M)``.

    ``distributed``: chips sit on a comb of stride ``N_sc_d // M`` and group
    ``i`` uses offset ``i mod stride``, so every group spans the whole band.
    ``localized``: group ``i`` takes the ``i``-th block of ``M`` contiguous
    subcarriers when all groups fit side by side, otherwise every group reuses
    the first block on later OFDM symbols.
    """
    M, n_g, n_sc = cfg.M, cfg.N_g, cfg.N_sc_d
    if cfg.subcarrier_map == "distributed":
        stride = n_sc // M
        return (np.arange(n_g)[:, None] % stride) + stride * np.arange(M)[None, :]
    if M * n_g <= n_sc:
        return np.arange(M * n_g).reshape(n_g, M)
    return np.tile(np.arange(M), (n_g, 1))


def taps_to_freq(taps: np.ndarray, n_sc: int) -> np.ndarray:
    """DFT of the zero-padded tap vectors (last axis), ``w_{m,n} = exp(-j 2 pi m n / n_sc)``."""
    return np.fft.fft(taps, n=n_sc, axis=-1)


def channel_from_taps(taps: np.ndarray, cfg: SystemConfig) -> ChannelRealization:
    taps = np.atleast_2d(np.asarray(taps, dtype=complex))
    freq = taps_to_freq(taps, cfg.N_sc_d)
    sub = group_subcarriers(cfg)
    return ChannelRealization(taps, freq, freq[:, sub])


def gen_channel(cfg: SystemConfig, user_count: int, rng: np.random.Generator) -> ChannelRealization:
    """i.i.d. CN(0, 1/tau) taps (flat power profile, unit mean energy)."""
    if user_count < 0:
        raise ValueError("user_count must be >= 0")
    shape = (user_count, cfg.tau)
    taps = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5 / cfg.tau)
    return channel_from_taps(taps.reshape(shape), cfg)


def circulant(first_column: np.ndarray) -> np.ndarray:
    c = np.asarray(first_column)
    n = c.size
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return c[idx]


def awgn(shape, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. CN(0, sigma2) samples; ``sigma2 = 0`` gives zeros."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    if sigma2 == 0:
        return np.zeros(shape, dtype=complex)
    s = np.sqrt(sigma2 / 2)
    return s * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
