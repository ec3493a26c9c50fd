"""Figure recipes: scenario presets, curve definitions and CSV/SVG rendering."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import SystemConfig, rng_for
from .harness import run_points, trial_seed
from .metrics import aggregate, analytic_collision_rate, rows_by_metric, wilson_interval
from .waveform import babel_coherence_2, build_signature_pool, gen_base_pool, signature_atoms

FIGURE_SCHEMA = "# msra-figure v1"
FIGURE_COLUMNS = ("curve", "x", "metric", "y", "ci_low", "ci_high", "trials")
SCALES = ("full", "desk")


class UnknownRecipe(KeyError):
    pass


# ---------------------------------------------------------------------------
# presets


def wb_preset(scale: str = "desk") -> SystemConfig:
    """Wideband scenario: three-tap channels, two-stage receiver."""
    common = dict(mode="WB", tau=3, N_zc=1021, N_sc_p=1021, N_sc_d=128, snr_db=10.0, xi_scale=2.5,
                  stop_rule="projected", activity="poisson")
    if scale == "full":
        return SystemConfig(M=32, N_s=1024, N_T=1024, N_p=1024, upsilon=32, N_c=128, n_active=24, **common)
    return SystemConfig(M=16, N_s=256, N_T=256, N_p=256, upsilon=32, N_c=32, n_active=12, **common)


def nb_preset(scale: str = "desk") -> SystemConfig:
    """Narrowband scenario: flat channels, single-stage receiver with a pilot symbol."""
    common = dict(mode="NB", tau=1, N_zc=127, N_sc_p=128, N_sc_d=32, snr_db=10.0, single_stage=True,
                  stop_rule="projected", N_c=32, upsilon=16)
    if scale == "full":
        return SystemConfig(M=32, N_s=1024, N_T=1024, N_p=1024, n_active=24, **common)
    return SystemConfig(M=16, N_s=128, N_T=128, N_p=128, n_active=12, **common)


def ssra(cfg: SystemConfig, upsilon: int | None = None) -> SystemConfig:
    u = cfg.upsilon if upsilon is None else upsilon
    return cfg.replace(spreading="SSRA", upsilon=u)


def msra(cfg: SystemConfig, upsilon: int) -> SystemConfig:
    return cfg.replace(spreading="MSRA", upsilon=upsilon)


# ---------------------------------------------------------------------------
# coherence study


def support_coherence(cfg: SystemConfig, n_active: int, draws: int, seed_label: str = "coherence") -> np.ndarray:
    """2-Babel coherence of the stacked signature atoms over random supports.

    Supports are ``n_active`` distinct signatures drawn uniformly; the pools are
    those of ``cfg``.
    """
    base = gen_base_pool(cfg)
    atoms = signature_atoms(base, build_signature_pool(base, cfg))
    rng = rng_for(cfg.master_seed, seed_label, n_active)
    out = np.empty(draws)
    for t in range(draws):
        sup = rng.choice(cfg.N_T, size=n_active, replace=False)
        out[t] = babel_coherence_2(atoms, sup)
    return out


def mean_ci(v: np.ndarray) -> tuple[float, float, float]:
    m = float(v.mean()) if v.size else float("nan")
    half = 1.959963984540054 * float(v.std(ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
    return m, m - half, m + half


# ---------------------------------------------------------------------------
# curves


@dataclass(frozen=True)
class Curve:
    label: str
    cfg: SystemConfig
    axis: str  # "L", "snr_db", "N_c", "upsilon"
    values: tuple
    metric: str
    oracle: bool = False

    def point_config(self, v) -> SystemConfig:
        c = self.cfg
        if self.axis == "L":
            n = v * c.M
            return c.replace(n_active=n if c.activity == "poisson" else int(round(n)))
        if self.axis == "snr_db":
            return c.replace(snr_db=float(v))
        if self.axis == "N_c":
            ups = int(v) if c.spreading == "MSRA" else c.upsilon
            return c.replace(N_c=int(v), upsilon=ups)
        if self.axis == "upsilon":
            return c.replace(upsilon=int(v))
        if self.axis == "N_a":
            return c.replace(n_active=v)
        raise ValueError(self.axis)


@dataclass(frozen=True)
class Recipe:
    recipe_id: str
    title: str
    xlabel: str
    ylabel: str
    kind: str  # "mc", "coherence"
    logy: bool = True


def _grid(desk, full, scale):
    return tuple(full if scale == "full" else desk)


def recipe_curves(recipe_id: str, scale: str = "desk") -> tuple[Recipe, list[Curve]]:
    """Recipe definitions; raises ``UnknownRecipe``."""
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}")
    nb, wb = nb_preset(scale), wb_preset(scale)
    n_c = nb.N_c
    if recipe_id == "fig6":
        r = Recipe("fig6", "2-Babel coherence vs active users", "N_a", "mu2", "coherence", logy=False)
        base = SystemConfig(mode="NB", tau=1, M=32, N_s=1024 if scale == "full" else 256,
                            N_T=1024 if scale == "full" else 256, N_p=1024 if scale == "full" else 256,
                            N_zc=127, N_sc_p=128, N_sc_d=32, N_c=8, upsilon=8, single_stage=True)
        vals = (8, 16, 24, 32)
        return r, [Curve("SSRA", ssra(base), "N_a", vals, "mu2"), Curve("MSRA u=8", msra(base, 8), "N_a", vals, "mu2")]
    if recipe_id == "fig7a":
        r = Recipe("fig7a", "NB misdetection vs utilization", "L", "P_mis", "mc")
        vals = _grid((0.25, 0.5, 0.625, 0.75, 0.875), (0.25, 0.5, 0.625, 0.75, 0.875, 1.0), scale)
        curves = [Curve("SSRA", ssra(nb, 1), "L", vals, "p_mis")]
        curves += [Curve(f"MSRA u={u}", msra(nb, u), "L", vals, "p_mis") for u in (4, 8, 16)]
        return r, curves
    if recipe_id == "fig7b":
        r = Recipe("fig7b", "NB symbol error rate vs utilization", "L", "SER", "mc")
        vals = _grid((0.25, 0.5, 0.75, 0.875), (0.25, 0.5, 0.75, 0.875, 1.0), scale)
        curves = [Curve("SSRA", ssra(nb, 1), "L", vals, "ser")]
        for u in (16, 32):
            curves.append(Curve(f"MSRA u={u}", msra(nb, u), "L", vals, "ser"))
        curves.append(Curve("oracle u=16", msra(nb, 16), "L", vals, "ser", oracle=True))
        return r, curves
    if recipe_id in ("fig8a", "fig8b"):
        mode = "MSRA" if recipe_id == "fig8a" else "SSRA"
        r = Recipe(recipe_id, f"NB misdetection vs frame size ({mode})", "N_c", "P_mis", "mc")
        vals = (8, 16, 24, 32)
        curves = []
        for L in (0.5, 0.75, 0.875):
            c = nb.replace(n_active=int(round(L * nb.M)))
            c = msra(c, n_c) if mode == "MSRA" else ssra(c, 1)
            curves.append(Curve(f"{mode} L={L}", c, "N_c", vals, "p_mis"))
        return r, curves
    if recipe_id == "fig9a":
        r = Recipe("fig9a", "WB misdetection vs SNR", "SNR (dB)", "P_mis", "mc")
        vals = (0.0, 5.0, 10.0, 15.0, 20.0)
        w = wb.replace(activity="fixed", n_active=int(round(0.875 * wb.M)))
        curves = [Curve("SSRA", ssra(w), "snr_db", vals, "p_mis")]
        curves += [Curve(f"MSRA u={u}", msra(w, u), "snr_db", vals, "p_mis") for u in (4, 8, 16, 32)]
        return r, curves
    if recipe_id == "fig9b":
        r = Recipe("fig9b", "WB symbol error rate vs SNR", "SNR (dB)", "SER", "mc")
        vals = (5.0, 10.0, 15.0, 20.0)
        curves = []
        for L in (0.75, 0.875, 1.0):
            w = msra(wb.replace(activity="fixed", n_active=int(round(L * wb.M))), 16)
            curves.append(Curve(f"MSRA L={L}", w, "snr_db", vals, "ser"))
            curves.append(Curve(f"oracle L={L}", w, "snr_db", vals, "ser", oracle=True))
        return r, curves
    if recipe_id == "fig10":
        r = Recipe("fig10", "GF-RA failure rate vs utilization", "L", "failure rate", "mc")
        vals = tuple(np.round(np.arange(4, wb.M + 1, 2 if scale == "desk" else 1) / wb.M, 6))
        curves = [Curve("SSRA", ssra(wb), "L", vals, "failure_rate")]
        curves += [Curve(f"MSRA u={u}", msra(wb, u), "L", vals, "failure_rate") for u in (4, 16, wb.N_c)]
        return r, curves
    raise UnknownRecipe(recipe_id)


RECIPE_IDS = ("fig6", "fig7a", "fig7b", "fig8a", "fig8b", "fig9a", "fig9b", "fig10")
DEFAULT_TRIALS = {"desk": 200, "full": 5000}


# ---------------------------------------------------------------------------
# evaluation and rendering


@dataclass
class CurveData:
    label: str
    x: list
    y: list
    lo: list
    hi: list
    trials: int
    metric: str


def evaluate_curve(curve: Curve, trials: int, workers: int = 1) -> CurveData:
    configs = [curve.point_config(v) for v in curve.values]
    if curve.metric == "mu2":
        ys, los, his = [], [], []
        for n_a in curve.values:
            m, lo, hi = mean_ci(support_coherence(curve.cfg, int(n_a), trials))
            ys.append(m), los.append(lo), his.append(hi)
        return CurveData(curve.label, list(curve.values), ys, los, his, trials, "mu2")
    outcomes = run_points(configs, trials, workers, curve.oracle)
    ys, los, his = [], [], []
    for o in outcomes:
        row = rows_by_metric(aggregate(o))[curve.metric] if o else None
        ys.append(row.value if row else float("nan"))
        los.append(row.ci_low if row else float("nan"))
        his.append(row.ci_high if row else float("nan"))
    return CurveData(curve.label, list(curve.values), ys, los, his, trials, curve.metric)


def collision_curve(curves: list[Curve]) -> CurveData:
    """Analytic collision rate of the first curve's pool size over its L grid."""
    c = curves[0].cfg
    x = list(curves[0].values)
    y = [analytic_collision_rate(v * c.M, c.N_T) for v in x]
    return CurveData("collision rate", x, y, y, y, 0, "collision_rate_analytic")


def figure_csv(data: list[CurveData]) -> str:
    buf = io.StringIO()
    buf.write(FIGURE_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIGURE_COLUMNS)
    for d in data:
        for x, y, lo, hi in zip(d.x, d.y, d.lo, d.hi):
            w.writerow([d.label, f"{float(x):.10g}", d.metric, f"{y:.10g}", f"{lo:.10g}", f"{hi:.10g}", d.trials])
    return buf.getvalue()


def render_svg(recipe: Recipe, data: list[CurveData], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.2))
    for d in data:
        x = np.asarray(d.x, dtype=float)
        y = np.asarray(d.y, dtype=float)
        style = "k--" if d.trials == 0 else "-o"
        ax.plot(x, y, style, label=d.label, markersize=4)
        if d.trials:
            ax.fill_between(x, np.asarray(d.lo, float), np.asarray(d.hi, float), alpha=0.15)
    if recipe.logy:
        ax.set_yscale("log")
    ax.set_xlabel(recipe.xlabel)
    ax.set_ylabel(recipe.ylabel)
    ax.set_title(recipe.title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the SVG byte-stable across runs
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def reproduce_figure(recipe_id: str, scale: str = "desk", out: str | Path = ".", trials: int | None = None,
                     workers: int = 1, master_seed: int | None = None) -> list[Path]:
    """Run a recipe and write ``<id>.csv``, ``<id>.svg`` and ``manifest.txt`` into ``out``.

    Unknown ids raise ``UnknownRecipe`` before anything is written.
    """
    recipe, curves = recipe_curves(recipe_id, scale)
    if master_seed is not None:
        curves = [Curve(c.label, c.cfg.replace(master_seed=master_seed), c.axis, c.values, c.metric, c.oracle)
                  for c in curves]
    n = DEFAULT_TRIALS[scale] if trials is None else trials
    if recipe.kind == "coherence":
        n = {"desk": 1000, "full": 5000}[scale] if trials is None else trials
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    data = [evaluate_curve(c, n, workers) for c in curves]
    if recipe_id == "fig10":
        data.append(collision_curve(curves))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{recipe_id}.csv"
    csv_path.write_text(figure_csv(data))
    svg_path = out / f"{recipe_id}.svg"
    render_svg(recipe, data, svg_path)
    lines = ["# msra-manifest v1", f"recipe_id = {recipe_id}", f"scale = {scale}", f"trials = {n}",
             f"code_version = {__version__}", f"started = {started}",
             f"finished = {time.strftime('%Y-%m-%dT%H:%M:%S')}", "valid = true"]
    for c in curves:
        lines.append(f"curve {c.label!r} axis={c.axis} values={','.join(str(v) for v in c.values)} "
                     f"oracle={int(c.oracle)} config_hash={c.cfg.config_hash()} "
                     f"trial0_seed={trial_seed(c.cfg.master_seed, 0, 0)}")
    lines += [f"output {csv_path.name}", f"output {svg_path.name}"]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return [csv_path, svg_path, out / "manifest.txt"]


def l_max(x, failure, n_rr: int, M: int, factor: float = 1.2) -> float:
    """Largest utilization whose failure rate is within ``factor`` of the collision rate (0 if none)."""
    best = 0.0
    for L, f in zip(x, failure):
        if f <= factor * analytic_collision_rate(L * M, n_rr):
            best = max(best, float(L))
    return best


__all__ = ["RECIPE_IDS", "Curve", "Recipe", "UnknownRecipe", "reproduce_figure", "recipe_curves", "wb_preset",
           "nb_preset", "support_coherence", "l_max", "wilson_interval"]
