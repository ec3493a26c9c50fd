"""Scenario configuration, flat ``key = value`` parsing and seed derivation."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants.

    ``invariant`` carries a short machine-readable name of the violated rule.
    """

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


# ---------------------------------------------------------------------------
# seed derivation


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer, the documented 64-bit mixer for seed paths."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(master: int, *path: int | str) -> int:
    """Derive a 64-bit seed from ``master`` and a path of ints / labels.

    ``h0 = splitmix64(master)`` and ``h_{n+1} = splitmix64(h_n XOR c_n)`` where
    ``c_n`` is the path element (labels are hashed with 64-bit FNV-1a).
    """
    h = splitmix64(int(master) & MASK64)
    for p in path:
        c = _fnv1a64(p) if isinstance(p, str) else int(p) & MASK64
        h = splitmix64(h ^ c)
    return h


def rng_for(master: int, *path: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *path)))


# ---------------------------------------------------------------------------
# configuration

MODES = ("NB", "WB")
SPREADINGS = ("MSRA", "SSRA")
ACTIVITIES = ("fixed", "poisson")
STOP_RULES = ("gaussian", "arbitrary", "projected")
SUBCARRIER_MAPS = ("distributed", "localized")


@dataclass(frozen=True)
class SystemConfig:
    """All scalar parameters of one grant-free random-access scenario.

    ``N_g`` is derived as ``N_c // upsilon``; construction fails unless the
    division is exact.  ``n_active`` is the fixed user count or the Poisson
    mean depending on ``activity``.
    """

    M: int = 16
    N_s: int = 256
    N_T: int = 256
    N_p: int = 256
    N_zc: int = 127
    tau: int = 3
    upsilon: int = 32
    N_c: int = 32
    N_sc_d: int = 128
    N_sc_p: int = 128
    snr_db: float = 10.0
    mode: str = "WB"
    spreading: str = "MSRA"
    activity: str = "fixed"
    n_active: float = 8
    master_seed: int = 1
    subcarrier_map: str = "distributed"
    # receiver keys
    xi_scale: float = 0.25
    stop_rule: str = "gaussian"
    max_outer: int = 8
    prune: bool = False
    single_stage: bool = False

    def __post_init__(self):
        self.validate()

    # derived quantities -------------------------------------------------
    @property
    def N_g(self) -> int:
        return self.N_c // self.upsilon

    @property
    def sigma2(self) -> float:
        """Noise variance per chip: chip power ``1/M`` over ``sigma2`` is the SNR."""
        return 1.0 / (self.M * 10.0 ** (self.snr_db / 10.0))

    @property
    def scaling_factor(self) -> float:
        return self.N_T / self.M

    @property
    def utilization_factor(self) -> float:
        return self.n_active / self.M

    @property
    def two_stage(self) -> bool:
        return not (self.single_stage and self.mode == "NB")

    def validate(self) -> None:
        def need(cond: bool, inv: str, msg: str):
            if not cond:
                raise ConfigError(inv, msg)

        for name in ("M", "N_s", "N_T", "N_p", "N_zc", "tau", "upsilon", "N_c",
                     "N_sc_d", "N_sc_p", "max_outer"):
            need(int(getattr(self, name)) >= 1, f"{name}_positive", f"{name} must be >= 1")
        need(self.mode in MODES, "mode_known", f"mode must be one of {MODES}")
        need(self.spreading in SPREADINGS, "spreading_known", f"spreading must be one of {SPREADINGS}")
        need(self.activity in ACTIVITIES, "activity_known", f"activity must be one of {ACTIVITIES}")
        need(self.stop_rule in STOP_RULES, "stop_rule_known", f"stop_rule must be one of {STOP_RULES}")
        need(self.subcarrier_map in SUBCARRIER_MAPS, "subcarrier_map_known",
             f"subcarrier_map must be one of {SUBCARRIER_MAPS}")
        need(self.N_c % self.upsilon == 0, "N_c_divisible_by_upsilon",
             f"N_c={self.N_c} is not a multiple of upsilon={self.upsilon}")
        need(self.N_T == self.N_p, "N_T_equals_N_p", f"N_T={self.N_T} != N_p={self.N_p}")
        need(self.N_zc <= self.N_sc_p, "N_zc_fits_preamble_subcarriers",
             f"N_zc={self.N_zc} exceeds N_sc_p={self.N_sc_p}")
        need(self.M <= self.N_sc_d, "M_fits_data_subcarriers", f"M={self.M} exceeds N_sc_d={self.N_sc_d}")
        if self.mode == "NB":
            need(self.tau == 1, "NB_single_tap", "mode NB requires tau = 1")
        else:
            need(self.tau >= 2, "WB_multi_tap", "mode WB requires tau >= 2")
        need(is_prime(self.N_zc), "N_zc_prime", f"N_zc={self.N_zc} is not prime")
        need(self.N_p <= (self.N_zc - 1) * (self.N_zc // self.tau), "preamble_capacity",
             f"N_p={self.N_p} exceeds (N_zc-1)*floor(N_zc/tau)")
        if self.spreading == "MSRA":
            need(self.upsilon <= self.N_s, "upsilon_le_N_s", "MSRA requires upsilon <= N_s")
        need(self.n_active >= 0, "n_active_nonnegative", "n_active must be >= 0")
        if self.activity == "fixed":
            need(float(self.n_active).is_integer(), "fixed_activity_integer",
                 "fixed activity needs an integer n_active")
        need(self.snr_db == self.snr_db and math.isfinite(self.snr_db), "snr_finite", "snr_db must be finite")
        need(0 <= self.master_seed <= MASK64, "seed_u64", "master_seed must fit in 64 bits")

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    # serialization -------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif f.type == "float":
                v = repr(float(v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in fields(SystemConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError("value_parse", f"{name}: cannot parse boolean {raw!r}")
    try:
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError("value_parse", f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, base: SystemConfig | None = None) -> SystemConfig:
    """Parse flat ``key = value`` text; ``#`` starts a comment.

    A ``N_g`` key is accepted and cross-checked against ``N_c / upsilon``.
    """
    values: dict[str, object] = {}
    n_g = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("syntax", f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "N_g":
            n_g = int(raw)
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError("unknown_key", f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    start = dataclasses.asdict(base) if base is not None else {}
    start.update(values)
    # build unvalidated first so N_g can be checked with a precise message
    cfg = object.__new__(SystemConfig)
    defaults = {f.name: f.default for f in fields(SystemConfig)}
    defaults.update(start)
    for k, v in defaults.items():
        object.__setattr__(cfg, k, v)
    if n_g is not None and cfg.upsilon * n_g != cfg.N_c:
        raise ConfigError("N_c_equals_upsilon_times_N_g",
                          f"N_c={cfg.N_c} != upsilon*N_g={cfg.upsilon}*{n_g}")
    cfg.validate()
    return cfg


def load_config(path: str | Path, base: SystemConfig | None = None) -> SystemConfig:
    return parse_config_text(Path(path).read_text(), base)


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    r = int(math.isqrt(n))
    return all(n % d for d in range(3, r + 1, 2))
