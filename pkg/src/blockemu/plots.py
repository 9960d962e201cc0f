"""Figures for run reports and difficulty-time maps.

Each function writes PNG files next to a base path (``run.csv`` gives
``run.progress.png`` and so on) and returns the paths it wrote.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .calibration import DifficultyTimeMap  # noqa: E402

DPI = 120


def _sibling(base: Path, suffix: str) -> Path:
    return base.with_name(f"{base.stem}.{suffix}.png")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_run_report(report, base: Path, time_map: DifficultyTimeMap | None = None) -> list[Path]:
    """Commit progress over simulated time, memory over wall time, and inter-commit gaps."""
    rows = report.rows
    cfg = report.config
    title = f"{cfg.get('nodes', '?')} nodes, {cfg.get('txns', '?')} txns, difficulty {cfg.get('difficulty', '?')}"
    out = []

    sim_s = [r[0] / 1000.0 for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.step(sim_s, [r[2] for r in rows], where="post", color="tab:blue", label="transactions")
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel("transactions committed")
    ax2 = ax.twinx()
    ax2.step(sim_s, [r[1] for r in rows], where="post", color="tab:orange", ls="--", label="blocks")
    ax2.set_ylabel("blocks committed")
    ax.set_title(title)
    fig.legend(loc="upper left", bbox_to_anchor=(0.12, 0.88), frameon=False)
    out.append(_save(fig, _sibling(base, "progress")))

    mem = [(r[4] / 1000.0, r[3] / 2**20) for r in rows if r[3] is not None]
    if mem:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        ax.plot([m[0] for m in mem], [m[1] for m in mem], color="tab:green")
        ax.set_xlabel("wall-clock time (s)")
        ax.set_ylabel("resident memory (MiB)")
        ax.set_ylim(bottom=0)
        ax.set_title(title)
        out.append(_save(fig, _sibling(base, "memory")))

    commits = [r[0] for r in rows[1:]]
    gaps = [(b - a) / 1000.0 for a, b in zip(commits, commits[1:])]
    if gaps:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        ax.plot(range(1, len(gaps) + 1), gaps, marker=".", lw=0.8, label="observed")
        mean = sum(gaps) / len(gaps)
        ax.axhline(mean, color="k", ls="--", lw=0.8, label=f"mean {mean:.2f} s")
        if time_map is not None:
            from .puzzle import parse_difficulty
            d = parse_difficulty(cfg["difficulty"]) if "difficulty" in cfg else None
            if d is not None and d in time_map:
                ax.axhline(time_map.lookup(d).mean_ms / 1000.0, color="tab:red", ls=":",
                           label="calibrated mean")
        ax.set_xlabel("block")
        ax.set_ylabel("inter-commit time (s)")
        ax.set_title(title)
        ax.legend(frameon=False)
        out.append(_save(fig, _sibling(base, "intervals")))
    return out


def plot_difficulty_map(m: DifficultyTimeMap, base: Path) -> list[Path]:
    """Mean solve time per difficulty, log scale, one line per leading-zero count."""
    by_L: dict[int, list] = {}
    for st in m:
        by_L.setdefault(st.difficulty.L, []).append(st)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    labels = []
    for L in sorted(by_L):
        pts = by_L[L]
        xs = [len(labels) + i for i in range(len(pts))]
        labels += [str(st.difficulty) for st in pts]
        ax.errorbar(xs, [st.mean_ms for st in pts], yerr=[st.stderr_ms for st in pts],
                    marker="o", capsize=3, label=f"L={L}")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45 if len(labels) > 8 else 0)
    ax.set_yscale("log")
    ax.set_xlabel("difficulty L.M")
    ax.set_ylabel("mean solve time (ms)")
    ax.legend(frameon=False, ncol=2)
    return [_save(fig, _sibling(base, "difficulty"))]
