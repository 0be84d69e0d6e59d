"""Cross-attention export: CSV matrices and plain-text PGM heatmaps.

Rows are target positions, columns are source positions of all selected
encoders side by side in bundle order.  Hierarchical records are exported as
inner weights scaled by the attention over contexts, so each row of the
combined matrix is a single distribution.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .combination import combined_weights


@dataclass
class HeatmapSpec:
    layer: int = -1
    head: int | None = None  # None = mean over heads
    encoder: int | None = None  # None = all encoders
    fmt: str = "csv"


def _squeeze(a: np.ndarray) -> np.ndarray:
    while a.ndim > 2:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single example, got weights of shape {a.shape}")
        a = a[0]
    return a


def _layer(records, spec: HeatmapSpec):
    n = len(records)
    if not -n <= spec.layer < n:
        raise IndexError(f"layer {spec.layer} out of range for {n} layers")
    record = records[spec.layer].cross
    heads = len(record.encoder_weights[0])
    if spec.head is not None and not 0 <= spec.head < heads:
        raise IndexError(f"head {spec.head} out of range for {heads} heads")
    if spec.encoder is not None and not 0 <= spec.encoder < len(record.encoder_weights):
        raise IndexError(f"encoder {spec.encoder} out of range")
    return record


def attention_blocks(records, spec: HeatmapSpec) -> list[np.ndarray]:
    """Per-encoder [target × source_i] matrices for the selected layer/head."""
    record = _layer(records, spec)
    blocks = [_squeeze(b) for b in combined_weights(record, spec.head)]
    if spec.encoder is not None:
        blocks = [blocks[spec.encoder]]
    return blocks


def context_matrix(records, spec: HeatmapSpec) -> np.ndarray:
    """Hierarchical attention over contexts, [target × n_encoders]."""
    record = _layer(records, spec)
    if record.context_weights is None:
        raise ValueError("record has no attention over contexts (not hierarchical)")
    ws = record.context_weights
    return _squeeze(np.mean(ws, axis=0) if spec.head is None else ws[spec.head])


def _write_csv(path, matrix: np.ndarray, columns: list[str], rows: list[str]) -> None:
    if matrix.shape != (len(rows), len(columns)):
        raise ValueError(f"labels {len(rows)}x{len(columns)} do not match matrix {matrix.shape}")
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([""] + columns)
        for label, row in zip(rows, matrix):
            w.writerow([label] + [format(float(v), ".17g") for v in row])


def _columns(source_labels, spec: HeatmapSpec) -> list[str]:
    chosen = range(len(source_labels)) if spec.encoder is None else [spec.encoder]
    return [f"src{i}:{tok}" for i in chosen for tok in source_labels[i]]


def export_attention_csv(records, spec: HeatmapSpec, path, source_labels, target_labels) -> None:
    matrix = np.concatenate(attention_blocks(records, spec), axis=-1)
    _write_csv(path, matrix, _columns(source_labels, spec), list(target_labels))


def export_context_csv(records, spec: HeatmapSpec, path, target_labels) -> None:
    matrix = context_matrix(records, spec)
    _write_csv(path, matrix, [f"src{i}" for i in range(matrix.shape[1])], list(target_labels))


def read_attention_csv(path):
    """Returns (column labels, row labels, matrix)."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header, body = rows[0][1:], rows[1:]
    return header, [r[0] for r in body], np.array([[float(v) for v in r[1:]] for r in body])


def to_pgm(matrix: np.ndarray) -> str:
    """P2 image, maxval 255, pixel = round(255 * weight) on an absolute scale."""
    pixels = np.floor(255.0 * np.clip(matrix, 0.0, 1.0) + 0.5).astype(int)
    height, width = pixels.shape
    lines = ["P2", f"{width} {height}", "255"]
    lines += [" ".join(str(p) for p in row) for row in pixels]
    return "\n".join(lines) + "\n"


def export_heatmap_pgm(records, spec: HeatmapSpec, path) -> None:
    matrix = np.concatenate(attention_blocks(records, spec), axis=-1)
    Path(path).write_text(to_pgm(matrix), encoding="ascii")


def export_context_pgm(records, spec: HeatmapSpec, path) -> None:
    Path(path).write_text(to_pgm(context_matrix(records, spec)), encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    width, height = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:]], dtype=int).reshape(height, width)
