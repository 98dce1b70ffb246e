"""Export of per-node relation weights as CSV and heatmap images (binary PPM)."""

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

KINDS = ("rw_pre", "dpe", "rw")

_ABSENT_RGB = (128, 128, 128)


@dataclass
class HeatmapGrid:
    """A vector laid out row-major in a near-square grid; trailing cells are NaN (absent)."""

    cells: np.ndarray
    n_values: int
    vmin: float
    vmax: float

    @property
    def grid_rows(self):
        return self.cells.shape[0]

    @property
    def grid_cols(self):
        return self.cells.shape[1]

    @property
    def present(self):
        mask = np.zeros(self.cells.size, dtype=bool)
        mask[: self.n_values] = True
        return mask.reshape(self.cells.shape)

    def to_vector(self):
        return self.cells.reshape(-1)[: self.n_values].copy()


def grid_shape(n):
    cols = max(1, math.ceil(math.sqrt(n)))
    rows = max(1, math.ceil(n / cols))
    return rows, cols


def layout_grid(values):
    """Near-square row-major layout with symmetric color bounds centred at zero."""
    values = np.asarray(values, dtype=float).ravel()
    rows, cols = grid_shape(values.size)
    cells = np.full(rows * cols, np.nan)
    cells[: values.size] = values
    bound = float(np.max(np.abs(values))) if values.size else 0.0
    return HeatmapGrid(cells.reshape(rows, cols), values.size, -bound, bound)


def diverging_rgb(value, bound):
    """Blue for negative, white at zero, red for positive."""
    if bound <= 0.0:
        return (255, 255, 255)
    t = max(-1.0, min(1.0, value / bound))
    fade = int(round(255 * (1.0 - abs(t))))
    return (255, fade, fade) if t >= 0 else (fade, fade, 255)


def render_ppm(grid, path, cell_px=16):
    """Write the grid as a binary P6 image, one ``cell_px`` square per cell."""
    h, w = grid.grid_rows * cell_px, grid.grid_cols * cell_px
    img = np.empty((grid.grid_rows, grid.grid_cols, 3), dtype=np.uint8)
    present = grid.present
    for r in range(grid.grid_rows):
        for c in range(grid.grid_cols):
            rgb = diverging_rgb(grid.cells[r, c], grid.vmax) if present[r, c] else _ABSENT_RGB
            img[r, c] = rgb
    img = np.repeat(np.repeat(img, cell_px, axis=0), cell_px, axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path):
    """Minimal reader for files written by :func:`render_ppm`; returns ``[H, W, 3]`` uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def increasing_fraction(values):
    """Share of adjacent pairs that strictly increase toward the current node."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float("nan")
    return float(np.mean(np.diff(values) > 0))


def evidence_contrast(rw_pre, evidence):
    """Mean ``rw_pre`` at flagged historical nodes and at all other nodes.

    ``rw_pre`` is ``[N, T-1]``; ``evidence`` lists node indices per sample.
    Samples without evidence are skipped.
    """
    rw_pre = np.asarray(rw_pre, dtype=float)
    hit, miss = [], []
    for row, nodes in zip(rw_pre, evidence):
        if not nodes:
            continue
        mask = np.zeros(row.size, dtype=bool)
        mask[list(nodes)] = True
        hit.append(row[mask])
        miss.append(row[~mask])
    if not hit:
        raise ValueError("no samples carry evidence")
    return float(np.concatenate(hit).mean()), float(np.concatenate(miss).mean())


def write_relations_csv(report, path, sample_ids=None):
    n = len(report)
    ids = list(range(n)) if sample_ids is None else list(sample_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "node_index", "rw_pre", "dpe", "rw"])
        for i, sid in enumerate(ids):
            r = report.sample(i) if report.rw_pre.ndim == 2 else report
            for k in range(r.rw_pre.size):
                w.writerow([sid, k, repr(float(r.rw_pre[k])), repr(float(r.dpe[k])), repr(float(r.rw[k]))])


def read_relations_csv(path):
    """``{sample_id: {kind: array}}`` from a relations CSV."""
    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            d = rows.setdefault(int(rec["sample_id"]), {k: [] for k in KINDS})
            for k in KINDS:
                d[k].append(float(rec[k]))
    return {sid: {k: np.array(v) for k, v in d.items()} for sid, d in rows.items()}


def explain(model, x, out_dir, sample_ids=None, cell_px=16):
    """Run ``model`` in eval mode over ``x`` and write CSV, heatmaps and a summary.

    Files: ``relations.csv``, ``<sample_id>_<kind>.ppm`` for each kind and
    ``summary.json``. Returns the batched RelationReport.
    """
    if model.config.variant == "flatten_mlp":
        raise ValueError("flatten_mlp has no relation weights to explain")
    model.eval()
    x = np.asarray(x, dtype=float)
    _, report = model.forward(x)
    ids = list(range(len(x))) if sample_ids is None else list(sample_ids)
    os.makedirs(out_dir, exist_ok=True)
    write_relations_csv(report, os.path.join(out_dir, "relations.csv"), ids)
    for i, sid in enumerate(ids):
        r = report.sample(i)
        for kind in KINDS:
            render_ppm(layout_grid(getattr(r, kind)), os.path.join(out_dir, f"{sid}_{kind}.ppm"), cell_px)
    summary = {
        "n_samples": len(ids),
        "dpe": [float(v) for v in report.dpe[0]],
        "dpe_increasing_fraction": increasing_fraction(report.dpe[0]),
        "mean_rw_pre": [float(v) for v in report.rw_pre.mean(axis=0)],
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report

