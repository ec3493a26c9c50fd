"""Spreading pools, signatures, Zadoff-Chu preambles and coherence diagnostics.

Matrices hold atoms as columns.  Signature and preamble indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np

from .config import SystemConfig, derive_seed, is_prime


@dataclass(frozen=True)
class BasePool:
    sequences: np.ndarray  # (M, N_s), unit-norm columns
    seed_lineage: tuple

    @property
    def M(self) -> int:
        return self.sequences.shape[0]

    def __len__(self):
        return self.sequences.shape[1]


@dataclass(frozen=True)
class SignaturePool:
    assignments: np.ndarray  # (N_T, upsilon) indices into the base pool
    mode: str

    @property
    def upsilon(self) -> int:
        return self.assignments.shape[1]

    def __len__(self):
        return self.assignments.shape[0]

    def spreading_matrix(self, base: BasePool, m: int) -> np.ndarray:
        """Block-diagonal ``(upsilon*M, upsilon)`` spreading matrix of signature ``m``."""
        M, ups = base.M, self.upsilon
        out = np.zeros((ups * M, ups), dtype=complex)
        for l, n in enumerate(self.assignments[m]):
            out[l * M:(l + 1) * M, l] = base.sequences[:, n]
        return out


@dataclass(frozen=True)
class PreamblePool:
    preambles: np.ndarray  # (N_zc, N_p)
    roots_and_shifts: np.ndarray  # (N_p, 2): ZC root, cyclic shift

    @property
    def N_zc(self) -> int:
        return self.preambles.shape[0]

    def __len__(self):
        return self.preambles.shape[1]


@dataclass(frozen=True)
class PreambleMatrix:
    matrix: np.ndarray  # (N_zc, tau*N_p)
    tau: int

    @property
    def n_blocks(self) -> int:
        return self.matrix.shape[1] // self.tau

    def block_columns(self, blocks) -> np.ndarray:
        blocks = np.asarray(blocks, dtype=int)
        return (blocks[:, None] * self.tau + np.arange(self.tau)).ravel()

    def block(self, m: int) -> np.ndarray:
        return self.matrix[:, m * self.tau:(m + 1) * self.tau]


@dataclass(frozen=True)
class CoherenceReport:
    mu2: np.ndarray  # per layer
    delta: np.ndarray  # per layer
    margin: float
    support: tuple
    rank_deficient: bool


# ---------------------------------------------------------------------------
# generators


def gen_base_pool(cfg: SystemConfig, seed: int | tuple = ("base",)) -> BasePool:
    """Draw ``N_s`` i.i.d. CN(0,1) sequences of length ``M``, each scaled to unit norm."""
    path = seed if isinstance(seed, tuple) else (seed,)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.master_seed, *path)))
    z = (rng.standard_normal((cfg.M, cfg.N_s)) + 1j * rng.standard_normal((cfg.M, cfg.N_s))) / np.sqrt(2)
    z /= np.linalg.norm(z, axis=0, keepdims=True)
    z.setflags(write=False)
    return BasePool(z, (cfg.master_seed, *path))


def build_signature_pool(base: BasePool, cfg: SystemConfig, seed: int | tuple = ("signatures",)) -> SignaturePool:
    """MSRA rows draw ``upsilon`` distinct base indices; SSRA row ``m`` repeats ``m mod N_s``."""
    n_s, ups = len(base), cfg.upsilon
    if cfg.spreading == "SSRA":
        rows = np.repeat((np.arange(cfg.N_T) % n_s)[:, None], ups, axis=1)
    else:
        if ups > n_s:
            raise ValueError(f"MSRA needs upsilon <= N_s, got {ups} > {n_s}")
        path = seed if isinstance(seed, tuple) else (seed,)
        rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.master_seed, *path)))
        # the ups smallest of n_s uniform keys: a uniform draw without replacement per row
        keys = rng.random((cfg.N_T, n_s))
        rows = np.argsort(keys, axis=1)[:, :ups]
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    rows.setflags(write=False)
    return SignaturePool(rows, cfg.spreading)


def zc_sequence(root: int, n_zc: int) -> np.ndarray:
    n = np.arange(n_zc)
    return np.exp(-1j * np.pi * root * n * (n + 1) / n_zc) / np.sqrt(n_zc)


def gen_zc_preambles(cfg: SystemConfig, seed=None) -> PreamblePool:
    """Root-major enumeration: roots ascending, cyclic shifts ``0, tau, 2*tau, ...``.

    ``seed`` is accepted for interface symmetry; the enumeration is deterministic.
    """
    n_zc, tau, n_p = cfg.N_zc, cfg.tau, cfg.N_p
    if not is_prime(n_zc):
        raise ValueError(f"N_zc={n_zc} must be prime")
    per_root = n_zc // tau
    if n_p > (n_zc - 1) * per_root:
        raise ValueError(f"N_p={n_p} exceeds capacity {(n_zc - 1) * per_root}")
    out = np.empty((n_zc, n_p), dtype=complex)
    record = np.empty((n_p, 2), dtype=np.int64)
    roots = (u for u in range(1, n_zc) if gcd(u, n_zc) == 1)
    m = 0
    while m < n_p:
        u = next(roots)
        x = zc_sequence(u, n_zc)
        for c in range(per_root):
            if m == n_p:
                break
            out[:, m] = np.roll(x, c * tau)
            record[m] = (u, c * tau)
            m += 1
    out.setflags(write=False)
    return PreamblePool(out, record)


def build_preamble_matrix(pool: PreamblePool, tau: int) -> PreambleMatrix:
    """Column ``m*tau + t`` is preamble ``m`` circularly delayed by ``t`` samples."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    p = pool.preambles
    cols = np.stack([np.roll(p, t, axis=0) for t in range(tau)], axis=2)  # (N_zc, N_p, tau)
    mat = cols.reshape(p.shape[0], -1)
    mat.setflags(write=False)
    return PreambleMatrix(mat, tau)


def layer_ensembles(base: BasePool, sigs: SignaturePool) -> np.ndarray:
    """Per-layer dictionaries, shape ``(upsilon, M, N_T)``; layer ``l`` column ``m`` is ``s_{m,l}``."""
    return np.transpose(base.sequences[:, sigs.assignments], (2, 0, 1))


def signature_atoms(base: BasePool, sigs: SignaturePool) -> np.ndarray:
    """Stacked unit-norm signature atoms, shape ``(upsilon*M, N_T)``.

    Column ``m`` concatenates ``s_{m,1}, ..., s_{m,upsilon}``: the signature as
    seen through a group of equal unit symbols.
    """
    layers = layer_ensembles(base, sigs)
    ups, M, n_t = layers.shape
    return layers.reshape(ups * M, n_t) / np.sqrt(ups)


# ---------------------------------------------------------------------------
# coherence diagnostics


def _normalized(columns: np.ndarray) -> np.ndarray:
    a = np.asarray(columns)
    norms = np.linalg.norm(a, axis=0)
    if np.any(norms == 0):
        raise ValueError("zero-norm atom: normalized inner product undefined")
    return a / norms


def _support_mask(n: int, support) -> np.ndarray:
    idx = np.asarray(sorted(set(int(i) for i in support)), dtype=int)
    if idx.size == 0:
        raise ValueError("support must be non-empty")
    if idx.size >= n or idx.min() < 0 or idx.max() >= n:
        raise ValueError("support must be a strict subset of the column indices")
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    return mask


def babel_coherence_2(columns: np.ndarray, support) -> float:
    """Largest l2 aggregate correlation of an outside atom with the support atoms."""
    a = _normalized(columns)
    mask = _support_mask(a.shape[1], support)
    g = np.abs(a[:, mask].conj().T @ a[:, ~mask])
    return float(np.sqrt((g ** 2).sum(axis=0)).max())


def isometry_constant(columns: np.ndarray, support) -> float:
    """``max(1 - lambda_min, lambda_max - 1)`` of the normalized support Gram matrix.

    A value ``>= 1`` flags a rank-deficient support.
    """
    a = _normalized(columns)
    idx = sorted(set(int(i) for i in support))
    if not idx:
        return 0.0
    sub = a[:, idx]
    lam = np.linalg.eigvalsh(sub.conj().T @ sub)
    return float(max(1.0 - lam[0], lam[-1] - 1.0))


def recovery_margin(matrices, support, eta: float) -> CoherenceReport:
    """``upsilon - sum_l mu2_l (1 + mu2_l) / (1 - delta_l) - eta`` over per-layer ensembles.

    The sum is the self-term bound minus the cross-term bound, so the margin
    falls as any layer's coherence grows.
    """
    layers = [np.asarray(m) for m in matrices]
    mu = np.array([babel_coherence_2(phi, support) for phi in layers])
    delta = np.array([isometry_constant(phi, support) for phi in layers])
    rank_def = bool(np.any(delta >= 1.0))
    with np.errstate(divide="ignore"):
        terms = mu * (1.0 + mu) / (1.0 - delta)
    margin = float(len(layers) - terms.sum() - eta)
    return CoherenceReport(mu, delta, margin, tuple(sorted(int(i) for i in support)), rank_def)


# ---------------------------------------------------------------------------
# text export / import


def _fmt_complex_row(row) -> str:
    return " ".join(f"{v.real:.16e} {v.imag:.16e}" for v in row)


def export_base_pool(pool: BasePool, path: str | Path, config_hash: str = "") -> None:
    """One line per sequence, real/imag pairs at 17 significant digits."""
    M, n = pool.sequences.shape
    with open(path, "w") as fh:
        fh.write(f"# msra-pool v1 kind=base config_hash={config_hash} rows={n} cols={M}\n")
        for j in range(n):
            fh.write(_fmt_complex_row(pool.sequences[:, j]) + "\n")


def export_signature_pool(pool: SignaturePool, path: str | Path, config_hash: str = "") -> None:
    n, ups = pool.assignments.shape
    with open(path, "w") as fh:
        fh.write(f"# msra-pool v1 kind=signatures mode={pool.mode} config_hash={config_hash} rows={n} cols={ups}\n")
        for row in pool.assignments:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def _read_header(lines: list[str]) -> dict:
    head = lines[0]
    if not head.startswith("# msra-pool v1"):
        raise ValueError("not an msra pool file")
    return dict(tok.split("=", 1) for tok in head[2:].split() if "=" in tok)


def import_pool(path: str | Path):
    """Read a file written by one of the ``export_*`` functions."""
    lines = Path(path).read_text().splitlines()
    meta = _read_header(lines)
    body = [ln.split() for ln in lines[1:] if ln.strip()]
    if meta["kind"] == "base":
        vals = np.array(body, dtype=float)
        seqs = (vals[:, 0::2] + 1j * vals[:, 1::2]).T.copy()
        return BasePool(seqs, ("imported", meta.get("config_hash", "")))
    if meta["kind"] == "signatures":
        return SignaturePool(np.array(body, dtype=np.int64), meta["mode"])
    raise ValueError(f"unknown pool kind {meta['kind']!r}")
