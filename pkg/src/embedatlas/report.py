"""Diagnostic report for a built store: figures + per-layer CSV.

Writes into the output directory:

    overview.png     projected point cloud (sampled when large)
    layers.png       per-layer non-empty tiles and representative counts
    occupancy.png    final-layer tile occupancy histogram
    layers.csv       the same per-layer statistics as delimited text
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .store import DatasetStore
from .tiling import load_pyramid

OVERVIEW_SAMPLE_CAP = 50_000


def write_report(store: DatasetStore, out_dir: Path, rng_seed: int = 0) -> list[Path]:
    """Render report figures and the per-layer CSV; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = store.manifest
    coords = store.coords()
    pyramid = load_pyramid(store)
    written: list[Path] = []

    # per-layer stats
    rows = []
    for layer_idx, layer in enumerate(pyramid.layers):
        counts = np.array([len(t.representatives) for t in layer.values()])
        rows.append(
            {
                "layer": layer_idx,
                "nonempty_tiles": len(layer),
                "representatives": int(counts.sum()),
                "max_reps_per_tile": int(counts.max()),
                "mean_reps_per_tile": round(float(counts.mean()), 3),
            }
        )

    csv_path = out_dir / "layers.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    written.append(csv_path)

    # overview scatter
    n = len(coords)
    if n > OVERVIEW_SAMPLE_CAP:
        rng = np.random.default_rng(rng_seed)
        idx = rng.choice(n, OVERVIEW_SAMPLE_CAP, replace=False)
        pts = coords[idx]
    else:
        pts = coords
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(pts[:, 0], pts[:, 1], s=1.0, alpha=0.4, linewidths=0)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    ax.set_title(f"{manifest.dataset_name}: {n} items, depth {manifest.depth}, k={manifest.k}")
    fig.tight_layout()
    overview = out_dir / "overview.png"
    fig.savefig(overview, dpi=150)
    plt.close(fig)
    written.append(overview)

    # per-layer bars
    layers = [r["layer"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(layers, [r["nonempty_tiles"] for r in rows], color="#4878cf")
    ax1.set_xlabel("layer")
    ax1.set_ylabel("non-empty tiles")
    ax1.set_yscale("log")
    ax2.bar(layers, [r["representatives"] for r in rows], color="#6acc65")
    ax2.set_xlabel("layer")
    ax2.set_ylabel("representatives")
    ax2.set_yscale("log")
    fig.tight_layout()
    layers_png = out_dir / "layers.png"
    fig.savefig(layers_png, dpi=150)
    plt.close(fig)
    written.append(layers_png)

    # final-layer occupancy
    final_counts = [len(t.representatives) for t in pyramid.layers[-1].values()]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(final_counts, bins=min(30, max(final_counts)), color="#d65f5f")
    ax.set_xlabel("items per final-layer tile")
    ax.set_ylabel("tiles")
    fig.tight_layout()
    occupancy = out_dir / "occupancy.png"
    fig.savefig(occupancy, dpi=150)
    plt.close(fig)
    written.append(occupancy)

    return written
