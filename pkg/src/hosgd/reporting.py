"""Trajectory CSV/JSON artifacts and the two comparison figures."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, Mapping, Sequence

import numpy as np

from .optimizer import Trajectory

CSV_HEADER = "iter,loss,grad_norm_sq,scalars_sent_cum,fevals_cum,gevals_cum"


def fmt(value: float) -> str:
    return f"{value:.17g}"


def trajectory_csv(traj: Trajectory) -> str:
    lines = [CSV_HEADER]
    for r in traj.records:
        lines.append(f"{r.t},{fmt(r.loss)},{fmt(r.grad_norm_sq)},"
                     f"{r.scalars_sent_cum},{r.fevals_cum},{r.gevals_cum}")
    return "\n".join(lines) + "\n"


def write_trajectory_csv(traj: Trajectory, path) -> Path:
    path = Path(path)
    path.write_text(trajectory_csv(traj))
    return path


def read_trajectory_csv(path) -> Dict[str, np.ndarray]:
    text = Path(path).read_text().splitlines()
    if text[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {text[0]!r}")
    rows = [line.split(",") for line in text[1:] if line]
    cols = CSV_HEADER.split(",")
    out = {}
    for j, name in enumerate(cols):
        dtype = np.float64 if name in ("loss", "grad_norm_sq") else np.int64
        out[name] = np.array([row[j] for row in rows], dtype=dtype)
    return out


def write_json(data: Mapping, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_comparison(curves: Mapping[str, Sequence[Dict[str, np.ndarray]]], out_dir,
                    stem: str = "comparison") -> list:
    """Render loss vs iteration and loss vs cumulative scalars sent.

    ``curves`` maps a run label to the per-seed column dicts of that run; the
    seed-mean loss is drawn with the per-seed range shaded.
    """
    plt = _pyplot()
    out_dir = Path(out_dir)
    written = []
    for xname, xlabel, suffix in (("iter", "iteration", "loss_vs_iter"),
                                  ("scalars_sent_cum", "cumulative scalars sent", "loss_vs_scalars")):
        fig, ax = plt.subplots(figsize=(5.5, 3.6))
        for label, seeds in curves.items():
            n = min(len(s["loss"]) for s in seeds)
            losses = np.vstack([s["loss"][:n] for s in seeds])
            xs = seeds[0][xname][:n]
            keep = xs > 0 if xname == "scalars_sent_cum" else slice(None)  # log axis
            xs, losses = xs[keep], losses[:, keep]
            ax.plot(xs, losses.mean(axis=0), label=label, lw=1.4)
            if len(seeds) > 1:
                ax.fill_between(xs, losses.min(axis=0), losses.max(axis=0), alpha=0.2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("training loss")
        ax.set_yscale("log")
        if xname == "scalars_sent_cum":
            ax.set_xscale("log")
        ax.grid(True, which="major", alpha=0.3)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{stem}_{suffix}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
