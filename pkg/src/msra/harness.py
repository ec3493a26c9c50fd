"""Seeded Monte Carlo orchestration, sweep persistence and bound sampling."""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .airlink import (SlotObservation, draw_activity, modulate_frame, superpose_data, superpose_preambles,
                      write_trial_dump)
from .channel import gen_channel
from .config import ConfigError, SystemConfig, derive_seed, rng_for
from .metrics import TrialOutcome, aggregate, score_trial, write_summary_csv
from .receiver import ReceiverContext, detect
from .waveform import build_preamble_matrix, build_signature_pool, gen_base_pool, gen_zc_preambles

AXES = ("N_a", "L", "snr_db", "upsilon", "N_c")


# ---------------------------------------------------------------------------
# single trials


def build_context(cfg: SystemConfig) -> ReceiverContext:
    """Pools shared by every trial: fixed per master seed."""
    base = gen_base_pool(cfg)
    sigs = build_signature_pool(base, cfg)
    if not cfg.two_stage:
        return ReceiverContext(cfg, base, sigs, None)
    pool = gen_zc_preambles(cfg)
    return ReceiverContext(cfg, base, sigs, build_preamble_matrix(pool, cfg.tau), pool)


@dataclass
class TrialData:
    draw: object
    channels: object
    frames: object
    obs: SlotObservation


def simulate_trial(ctx: ReceiverContext, trial_seed: int) -> TrialData:
    """Draw activity, channels and symbols and form both observations.

    Each random quantity has its own sub-stream of ``trial_seed`` so that
    changing one stage leaves the others untouched.
    """
    cfg = ctx.cfg
    draw = draw_activity(cfg, rng_for(trial_seed, "activity"))
    channels = gen_channel(cfg, draw.n_users, rng_for(trial_seed, "channel"))
    frames = modulate_frame(cfg, draw.n_users, rng_for(trial_seed, "symbols"), signature=draw.chosen,
                            pilot=not cfg.two_stage)
    s2 = cfg.sigma2
    if cfg.two_stage:
        y_p = superpose_preambles(draw, channels, ctx.preambles, s2, rng_for(trial_seed, "noise_p"))
    else:
        y_p = np.zeros(0, dtype=complex)
    y_d = superpose_data(draw, channels, ctx.signatures, ctx.base, frames, s2, rng_for(trial_seed, "noise_d"))
    return TrialData(draw, channels, frames, SlotObservation(y_p, y_d, s2))


def run_trial(ctx: ReceiverContext, trial_seed: int, oracle: bool = False) -> TrialOutcome:
    """draw -> transmit -> receive -> score for one seed."""
    data = simulate_trial(ctx, trial_seed)
    return score_data(ctx, data, oracle)


def score_data(ctx: ReceiverContext, data: TrialData, oracle: bool = False) -> TrialOutcome:
    support = data.draw.support
    report, state = detect(data.obs, ctx, oracle_support=support if oracle else None)
    u1 = state.hypothesis_u1
    out = score_trial(data.draw.chosen, support, u1, report.final_support, data.frames.symbols,
                      report.decisions, state.first_round_supports, pilot=not ctx.cfg.two_stage)
    first = state.first_round_supports
    out.extra = {"outer_iter": state.outer_iter, "converged": state.converged,
                 "group0_missed": bool(first) and not set(support.tolist()) <= first[0]}
    return out


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSpec:
    base: SystemConfig
    axis: str
    values: list
    trials: int
    outputs: str | Path | None = None
    recipe_id: str | None = None
    oracle: bool = False
    dump_trials: int = 0  # write trial_####.txt for the first n trials of each point

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError("axis_known", f"axis must be one of {AXES}")
        if self.trials < 0:
            raise ConfigError("trials_nonnegative", "trials must be >= 0")

    def point_config(self, value) -> SystemConfig:
        """Swept config, revalidated."""
        b = self.base
        if self.axis == "N_a":
            return b.replace(n_active=value)
        if self.axis == "L":
            n = value * b.M
            if b.activity == "fixed":
                n = int(round(n))
            return b.replace(n_active=n)
        if self.axis == "snr_db":
            return b.replace(snr_db=float(value))
        if self.axis == "upsilon":
            return b.replace(upsilon=int(value))
        return b.replace(N_c=int(value), upsilon=int(value)) if b.upsilon == b.N_c else b.replace(N_c=int(value))

    def configs(self) -> list[SystemConfig]:
        return [self.point_config(v) for v in self.values]


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    master_seed: int
    point_seeds: list  # (axis_value, point_index, seed of trial 0, config hash)
    started: str
    finished: str
    outputs: list = field(default_factory=list)
    valid: bool = True
    settings: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["# msra-manifest v1",
                 f"config_hash = {self.config_hash}",
                 f"code_version = {self.code_version}",
                 f"master_seed = {self.master_seed}",
                 f"started = {self.started}",
                 f"finished = {self.finished}",
                 f"valid = {'true' if self.valid else 'false'}"]
        for k, v in self.settings.items():
            lines.append(f"setting {k} = {v}")
        for value, idx, seed, h in self.point_seeds:
            lines.append(f"point {idx} axis_value={value} trial0_seed={seed} config_hash={h}")
        for name in self.outputs:
            lines.append(f"output {name}")
        return "\n".join(lines) + "\n"


def trial_seed(master: int, point_index: int, trial_index: int) -> int:
    return derive_seed(master, point_index, trial_index)


def _point_chunk(args):
    cfg, point_index, start, stop, oracle = args
    ctx = build_context(cfg)
    return [run_trial(ctx, trial_seed(cfg.master_seed, point_index, t), oracle) for t in range(start, stop)]


def _chunks(n: int, workers: int):
    if n == 0:
        return []
    size = max(1, -(-n // (4 * workers)))
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def run_points(configs, trials: int, workers: int = 1, oracle: bool = False) -> list[list[TrialOutcome]]:
    """Outcomes per point, ordered by trial index whatever the scheduling."""
    jobs = []
    for p, cfg in enumerate(configs):
        for start, stop in _chunks(trials, workers):
            jobs.append((cfg, p, start, stop, oracle))
    if workers <= 1 or len(jobs) <= 1:
        results = [_point_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_point_chunk, jobs))
    out: list[list[TrialOutcome]] = [[] for _ in configs]
    for job, res in zip(jobs, results):
        out[job[1]].extend(res)
    return out


def dry_run_lines(spec: SweepSpec) -> list[str]:
    lines = []
    for p, (v, cfg) in enumerate(zip(spec.values, spec.configs())):
        seeds = [trial_seed(cfg.master_seed, p, t) for t in range(min(spec.trials, 3))]
        lines.append(f"point {p} {spec.axis}={v} config_hash={cfg.config_hash()} trials={spec.trials} "
                     f"seed=derive(master={cfg.master_seed},{p},t) first_seeds={','.join(map(str, seeds))}")
    return lines


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def run_sweep(spec: SweepSpec, workers: int = 1) -> tuple[RunManifest, list]:
    """Run every point and write ``summary.csv`` and ``manifest.txt`` to ``spec.outputs``.

    Per-trial seeds are ``derive_seed(master_seed, point_index, trial_index)``.
    Timestamps live only in the manifest, so CSVs are byte-identical across
    reruns and worker counts.
    """
    configs = spec.configs()  # validation failures surface before any trial
    started = _now()
    outcomes = run_points(configs, spec.trials, workers, spec.oracle)
    points = [(v, aggregate(o) if o else []) for v, o in zip(spec.values, outcomes)]
    manifest = RunManifest(
        spec.base.config_hash(), __version__, spec.base.master_seed,
        [(v, p, trial_seed(c.master_seed, p, 0), c.config_hash()) for p, (v, c) in enumerate(zip(spec.values, configs))],
        started, "", settings={"axis": spec.axis, "trials": spec.trials, "oracle": spec.oracle,
                               "recipe_id": spec.recipe_id or ""})
    if spec.outputs is not None:
        out = Path(spec.outputs)
        out.mkdir(parents=True, exist_ok=True)
        try:
            write_summary_csv(points, out / "summary.csv")
            manifest.outputs.append("summary.csv")
            for p, cfg in enumerate(configs):
                if spec.dump_trials:
                    ctx = build_context(cfg)
                    for t in range(min(spec.dump_trials, spec.trials)):
                        data = simulate_trial(ctx, trial_seed(cfg.master_seed, p, t))
                        name = f"trial_{p:02d}{t:02d}.txt" if len(configs) > 1 else f"trial_{t:04d}.txt"
                        write_trial_dump(out / name, data.draw, data.channels, data.obs,
                                         {"point": p, "trial": t, "config_hash": cfg.config_hash()})
                        manifest.outputs.append(name)
        except OSError:
            manifest.valid = False
        manifest.finished = _now()
        (out / "manifest.txt").write_text(manifest.to_text() + "".join(
            f"config_text {line}\n" for line in spec.base.to_text().splitlines()))
    else:
        manifest.finished = _now()
    return manifest, points


def csv_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))


# ---------------------------------------------------------------------------
# single-group bound evaluation


@dataclass
class BoundSample:
    inputs: object  # BoundInputs, or None when a transmitted signature left stage 1
    raw: float
    applicable: bool
    group_missed: bool


def true_group_layers(ctx: ReceiverContext, data: TrialData, group: int = 0):
    """Per-layer dictionaries of one group over the hypothesis set, true channels on the support.

    Returns ``(layers, support_positions, n_candidates)`` or ``None`` when a
    transmitted signature is absent from the hypothesis set.  Candidates
    outside the support keep the receiver's estimated columns (unit channels
    in single-stage mode).
    """
    from .receiver import assemble_measurement, cap_hypothesis, default_threshold, freq_lift, initial_aud, \
        ls_channel_estimate, unit_channel_measurement

    cfg = ctx.cfg
    obs = data.obs
    if cfg.two_stage:
        u1 = cap_hypothesis(obs.y_p, ctx.P, initial_aud(obs.y_p, ctx.P, default_threshold(cfg, ctx.P)))
        taps, _ = ls_channel_estimate(obs.y_p, ctx.P, u1)
        freq = freq_lift(taps, cfg)
        pos = {int(m): j for j, m in enumerate(u1)}
        # true per-signature channel: sum over the users on it (collisions superpose)
        for m in data.draw.support:
            if int(m) not in pos:
                return None
        for m in data.draw.support:
            freq[pos[int(m)]] = 0
        for k, m in enumerate(data.draw.chosen):
            freq[pos[int(m)]] += data.channels.freq[k]
        ens = assemble_measurement(freq, u1, ctx.signatures, ctx.base, cfg)
    else:
        u1 = np.arange(cfg.N_T)
        ens = unit_channel_measurement(u1, ctx.signatures, ctx.base, cfg)
        pos = {int(m): int(m) for m in u1}
    sup = [pos[int(m)] for m in data.draw.support]
    return [ens.phi[group, l] for l in range(cfg.upsilon)], sup, u1.size


def bound_sample(ctx: ReceiverContext, seed: int, group: int = 0) -> BoundSample:
    """Single-group bound at the first iteration next to whether that group missed in round one."""
    from .metrics import bound_single_group, compute_bound_inputs

    data = simulate_trial(ctx, seed)
    out = score_data(ctx, data)
    missed = bool(out.extra.get("group0_missed", False))
    res = true_group_layers(ctx, data, group)
    if res is None:
        return BoundSample(None, float("nan"), False, missed)
    layers, sup, n_u = res
    inputs = compute_bound_inputs(layers, sup, (), data.obs.sigma2, n_total=ctx.cfg.N_T)
    b = bound_single_group(inputs)
    return BoundSample(inputs, b.raw, b.applicable, missed)
