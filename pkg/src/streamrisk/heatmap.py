"""User-by-timeslot heatmap of patch risk scores.

Writes a PNG rendering (host row on top, viewers below in flattened order)
plus a machine-readable JSON sidecar holding the exact cell scores.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .sessions import PatchGrid, flatten_grid


def heatmap_payload(
    grid: PatchGrid, patch_scores: Mapping[tuple[str, int], float]
) -> dict:
    """JSON-ready grid structure with one record per non-empty cell."""
    row_users: list[str] = []
    for user, _ in flatten_grid(grid):
        if user not in row_users:
            row_users.append(user)
    cells = [
        {"user_id": user, "slot": slot, "score": float(score)}
        for (user, slot), score in sorted(patch_scores.items(),
                                          key=lambda kv: (row_users.index(
                                              kv[0][0]), kv[0][1]))
    ]
    return {
        "session_id": grid.session_id,
        "slot_count": grid.slot_count,
        "rows": [
            {"user_id": u, "role": grid.role_of(u)} for u in row_users
        ],
        "cells": cells,
    }


def emit_heatmap(
    grid: PatchGrid,
    patch_scores: Mapping[tuple[str, int], float],
    out_path: str | Path,
) -> Path:
    """Render the grid to ``out_path`` (PNG) with a ``.json`` sidecar.

    Returns the sidecar path. Scores map linearly onto color intensity;
    empty cells render as background.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    payload = heatmap_payload(grid, patch_scores)

    users = [r["user_id"] for r in payload["rows"]]
    matrix = np.full((len(users), grid.slot_count), np.nan)
    for cell in payload["cells"]:
        matrix[users.index(cell["user_id"]), cell["slot"] - 1] = cell["score"]

    fig, ax = plt.subplots(
        figsize=(max(6.0, grid.slot_count * 0.45),
                 max(2.0, len(users) * 0.3))
    )
    masked = np.ma.masked_invalid(matrix)
    im = ax.imshow(masked, aspect="auto", cmap="Reds", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(grid.slot_count))
    ax.set_xticklabels(range(1, grid.slot_count + 1), fontsize=6)
    ax.set_yticks(range(len(users)))
    ax.set_yticklabels(
        [f"{u} ({grid.role_of(u)[0]})" for u in users], fontsize=6
    )
    ax.set_xlabel("timeslot")
    ax.set_title(f"patch risk scores: {grid.session_id}")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)

    sidecar = out_path.with_suffix(".json")
    sidecar.write_text(json.dumps(payload, indent=2), "utf-8")
    return sidecar
