"""Attention capture and intra-/inter-source block decomposition.

The token sequence concatenates segments in the fixed order cls, local,
indices, global, so every attention matrix splits into blocks: diagonal
blocks are interactions within one source, off-diagonal blocks are
interactions between sources. Block mass summarizes each (query segment,
key segment) pair as the mean, over heads and query rows in the segment, of
the attention paid to keys in the other segment; masses over one query row
sum to 1 because softmax rows do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import TeleViTModel
from .ppm import gray_to_rgb, to_gray, write_ppm
from .tensor import no_grad
from .tokenization import sequence_layout

Array = np.ndarray

GRIDLINE_RGB = (220, 40, 40)


@dataclass
class AttentionReport:
    """Per-layer, per-head attention plus segment spans and block masses.

    ``matrices[layer]`` has shape (n_heads, L, L). ``block_mass[layer]``
    maps query segment to key segment to mean attention mass.
    """

    matrices: list[Array]
    spans: dict[str, tuple[int, int]]
    segment_order: list[str]
    block_mass: list[dict[str, dict[str, float]]]
    variant: str
    length: int
    n_heads: int


def _block_masses(matrix: Array, spans: dict[str, tuple[int, int]], order: list[str]) -> dict:
    """Mean attention mass per (query segment, key segment) pair.

    ``matrix`` is (heads, L, L); the mean runs over heads and the query rows
    of the query segment, after summing attention over the key segment.
    """
    masses: dict[str, dict[str, float]] = {}
    for q_seg in order:
        q0, q1 = spans[q_seg]
        rows = matrix[:, q0:q1, :]
        masses[q_seg] = {}
        for k_seg in order:
            k0, k1 = spans[k_seg]
            masses[q_seg][k_seg] = float(rows[:, :, k0:k1].sum(axis=2).mean())
    return masses


def extract_attention(model: TeleViTModel, sample) -> AttentionReport:
    """Forward with attention capture; capture is observation-only."""
    with no_grad():
        _, captured = model.forward(sample, capture_attention=True)
    cfg = model.config
    counts = {source: cfg.token_count(source) for source in cfg.sources}
    _, spans = sequence_layout(counts, cfg.variant)
    order = ["cls", *cfg.sources]
    return AttentionReport(
        matrices=captured,
        spans=spans,
        segment_order=order,
        block_mass=[_block_masses(m, spans, order) for m in captured],
        variant=cfg.variant,
        length=cfg.sequence_length,
        n_heads=cfg.n_heads,
    )


def export_attention_heatmap(
    report: AttentionReport, layer: int, head: int, path, gridlines: bool = True
) -> None:
    """Write one head's attention matrix as a grayscale PPM heatmap.

    Values are min-max scaled per matrix; segment-boundary gridlines are
    drawn over the starting row/column of each segment after cls.
    """
    if not 0 <= layer < len(report.matrices):
        raise ConfigError(f"layer {layer} out of range [0, {len(report.matrices)})")
    if not 0 <= head < report.n_heads:
        raise ConfigError(f"head {head} out of range [0, {report.n_heads})")
    matrix = report.matrices[layer][head]
    pixels = gray_to_rgb(to_gray(matrix))
    if gridlines:
        for segment in report.segment_order[1:]:
            start = report.spans[segment][0]
            pixels[start, :, :] = GRIDLINE_RGB
            pixels[:, start, :] = GRIDLINE_RGB
    write_ppm(path, pixels)


def write_block_mass_report(report: AttentionReport, path) -> None:
    payload = {
        "variant": report.variant,
        "length": report.length,
        "n_heads": report.n_heads,
        "segment_order": report.segment_order,
        "spans": {k: list(v) for k, v in report.spans.items()},
        "block_mass": report.block_mass,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
