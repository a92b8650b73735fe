"""Selection-behavior analysis over captured activation records.

Two metrics, computed per object category from oriented-box annotations:

* the ratio of expected selective receptive-field area to ground-truth box
  area: per image, sum over blocks and kernel branches of (branch RF times
  the spatial sum of its selection mask), divided by the total annotated box
  area; averaged over the images that contain that category only;
* the per-block kernel selection difference for two-kernel plans: the mean
  (larger-kernel mask minus smaller-kernel mask), kept signed, with the mean
  absolute difference alongside.

Both are reported raw and min-max normalized (a singleton or all-equal set
normalizes to 1.0 by convention).  Masks are summed at each block's native
resolution; no rescaling across block resolutions is applied.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backbone import ActivationRecord
from .errors import AnalysisError

__all__ = [
    "OrientedBox",
    "ParseResult",
    "CategoryStats",
    "BlockSelectionDiff",
    "parse_annotations",
    "polygon_area",
    "record_activation_sum",
    "compute_rc",
    "compute_rc_all",
    "compute_selection_diff",
    "analyze_images",
    "emit_analysis",
]

log = logging.getLogger(__name__)

RC_HEADER = ("category", "r_c_raw", "r_c_norm", "images")
DIFF_HEADER = ("category", "block", "delta_raw", "delta_norm", "delta_abs")


@dataclass
class OrientedBox:
    """Quadrilateral ground-truth annotation with a category label."""

    vertices: np.ndarray  # (4, 2) float64 pixel coordinates
    category: str
    difficulty: int = 0

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)


@dataclass
class ParseResult:
    boxes: list[OrientedBox]
    malformed_lines: int = 0
    degenerate_boxes: int = 0


def polygon_area(vertices: np.ndarray) -> float:
    """Absolute shoelace area of a 4-vertex polygon."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.shape != (4, 2):
        raise AnalysisError(f"polygon_area: expected 4 (x, y) vertices, got shape {v.shape}")
    x, y = v[:, 0], v[:, 1]
    twice = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return float(abs(twice) / 2.0)


def parse_annotations(text: str) -> ParseResult:
    """Parse oriented-box annotation text, one box per line.

    Expected line layout: eight reals (four x,y vertices), a category token
    and an integer difficulty flag.  Header lines whose first token is not
    numeric are skipped silently; lines with the wrong token count or
    unparsable numbers count as malformed; boxes with zero area are dropped
    and counted as degenerate.
    """
    result = ParseResult(boxes=[])
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        try:
            float(tokens[0])
        except ValueError:
            continue  # metadata header such as image source or resolution
        if len(tokens) != 10:
            result.malformed_lines += 1
            continue
        try:
            coords = [float(t) for t in tokens[:8]]
            difficulty = int(tokens[9])
        except ValueError:
            result.malformed_lines += 1
            continue
        vertices = np.asarray(coords, dtype=np.float64).reshape(4, 2)
        box = OrientedBox(vertices=vertices, category=tokens[8], difficulty=difficulty)
        if box.area <= 0.0:
            result.degenerate_boxes += 1
            continue
        result.boxes.append(box)
    return result


@dataclass
class CategoryStats:
    category: str
    r_c_raw: float
    r_c_normalized: float
    image_count: int


@dataclass
class BlockSelectionDiff:
    block_key: tuple[int, int]
    delta_raw: float  # signed mean (larger - smaller)
    delta_normalized: float
    delta_abs: float  # mean |larger - smaller|


def record_activation_sum(record: ActivationRecord) -> float:
    """Total selective receptive-field area of one image's record:
    sum over blocks and kernels of RF_n * (spatial sum of mask n)."""
    total = 0.0
    for key in record.block_keys():
        masks = record.masks[key]
        for n_idx, rf in enumerate(record.rf):
            total += float(rf) * float(masks[:, n_idx].sum(dtype=np.float64))
    return total


def _eligible(
    images: Sequence[tuple[ActivationRecord, Sequence[OrientedBox]]], category: str
) -> list[tuple[ActivationRecord, Sequence[OrientedBox]]]:
    # an image counts for a category only when every box it contains is of
    # that category (single-category images)
    return [
        (rec, boxes)
        for rec, boxes in images
        if boxes and all(b.category == category for b in boxes)
    ]


def _normalize(values: Sequence[float]) -> list[float]:
    """Min-max to [0, 1]; singleton or all-equal sets map to 1.0."""
    lo, hi = min(values), max(values)
    if hi == lo:
        return [1.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def compute_rc(
    images: Sequence[tuple[ActivationRecord, Sequence[OrientedBox]]], category: str
) -> CategoryStats | None:
    """Selective-RF-area ratio for one category.

    Returns None (with a logged notice) when no image is eligible.  The
    normalized value uses the singleton convention 1.0; cross-category
    normalization happens in compute_rc_all.
    """
    ratios: list[float] = []
    for rec, boxes in _eligible(images, category):
        area = sum(b.area for b in boxes)
        if area <= 0.0:
            log.warning("category %s: image with zero annotated area skipped", category)
            continue
        ratios.append(record_activation_sum(rec) / area)
    if not ratios:
        log.info("category %s excluded: no eligible single-category images", category)
        return None
    raw = float(np.mean(ratios))
    return CategoryStats(category=category, r_c_raw=raw, r_c_normalized=1.0, image_count=len(ratios))


def compute_rc_all(
    images: Sequence[tuple[ActivationRecord, Sequence[OrientedBox]]],
    categories: Iterable[str] | None = None,
) -> list[CategoryStats]:
    """R_c for every category, min-max normalized across the reported set."""
    if categories is None:
        categories = sorted({b.category for _, boxes in images for b in boxes})
    stats = [s for c in categories if (s := compute_rc(images, c)) is not None]
    if stats:
        for s, norm in zip(stats, _normalize([s.r_c_raw for s in stats])):
            s.r_c_normalized = norm
    return stats


def compute_selection_diff(
    records: Sequence[ActivationRecord], category: str
) -> list[BlockSelectionDiff]:
    """Per-block kernel selection difference for a category's image records.

    Only two-kernel plans are supported: mask index 0 is the smaller-RF
    branch, index 1 the larger.  ``records`` must already be restricted to
    the category's eligible images (same rule as compute_rc).
    """
    if not records:
        raise AnalysisError(f"category {category!r}: no records to analyse")
    for rec in records:
        if rec.n_kernels != 2:
            raise AnalysisError(
                f"kernel selection difference needs a 2-kernel plan, record has {rec.n_kernels}"
            )
    keys = records[0].block_keys()
    for rec in records[1:]:
        if rec.block_keys() != keys:
            raise AnalysisError("records disagree on block keys; mixed backbone layouts")
    diffs: list[BlockSelectionDiff] = []
    for key in keys:
        signed, absolute = [], []
        for rec in records:
            masks = rec.masks[key]
            delta = masks[:, 1].astype(np.float64) - masks[:, 0].astype(np.float64)
            signed.append(float(delta.mean()))
            absolute.append(float(np.abs(delta).mean()))
        diffs.append(
            BlockSelectionDiff(
                block_key=key,
                delta_raw=float(np.mean(signed)),
                delta_normalized=1.0,
                delta_abs=float(np.mean(absolute)),
            )
        )
    for d, norm in zip(diffs, _normalize([d.delta_raw for d in diffs])):
        d.delta_normalized = norm
    return diffs


def analyze_images(
    images: Sequence[tuple[ActivationRecord, Sequence[OrientedBox]]],
) -> tuple[list[CategoryStats], dict[str, list[BlockSelectionDiff]]]:
    """Full pipeline: per-category ratios plus (for 2-kernel plans) the
    per-block selection differences."""
    stats = compute_rc_all(images)
    diffs: dict[str, list[BlockSelectionDiff]] = {}
    for s in stats:
        records = [rec for rec, _ in _eligible(images, s.category)]
        if records and records[0].n_kernels == 2:
            diffs[s.category] = compute_selection_diff(records, s.category)
    return stats, diffs


def emit_analysis(
    stats: Sequence[CategoryStats],
    diffs: Mapping[str, Sequence[BlockSelectionDiff]],
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Write the two CSV documents; deterministic lexicographic row order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc_path = out / "rc.csv"
    diff_path = out / "selection_diff.csv"

    with rc_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RC_HEADER)
        for s in sorted(stats, key=lambda s: s.category):
            writer.writerow([s.category, repr(float(s.r_c_raw)), repr(float(s.r_c_normalized)), s.image_count])

    with diff_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DIFF_HEADER)
        for category in sorted(diffs):
            for d in sorted(diffs[category], key=lambda d: d.block_key):
                writer.writerow(
                    [
                        category,
                        f"B_{d.block_key[0]}_{d.block_key[1]}",
                        repr(float(d.delta_raw)),
                        repr(float(d.delta_normalized)),
                        repr(float(d.delta_abs)),
                    ]
                )
    return rc_path, diff_path
