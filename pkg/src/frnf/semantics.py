"""Open-set click protocol, semantic inference, the 2D baseline, and mIoU.

Every click defines a new class: the i-th click creates class i. Semantic
views are rendered logits restricted to the active classes; pixels whose
opacity accumulator stays below 0.5 are labelled void and excluded from
evaluation only when the caller chooses to ignore them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import renderer as rnd
from . import scene_field as sf
from .errors import CapacityError, ConfigError, EvaluationError, InputError, NumericError
from .features import FeatureMap, bilinear_query
from .renderer import VOID_LABEL, Camera, Pose


@dataclass(frozen=True)
class Click:
    keyframe_id: int
    u: int
    v: int
    class_id: int
    name: str = ""


@dataclass
class ClickRegistry:
    """Ordered click record; one click per class, capped at max_classes."""

    max_classes: int
    frame_size: tuple[int, int]  # (width, height)
    clicks: list[Click] = field(default_factory=list)

    @property
    def n_active_classes(self) -> int:
        return len(self.clicks)

    @property
    def class_names(self) -> list[str]:
        return [c.name or f"class_{c.class_id}" for c in self.clicks]


def add_click(reg: ClickRegistry, keyframe_id: int, u: int, v: int, name: str = "") -> int:
    """Register a click; returns the new class id (= previous click count)."""
    if reg.n_active_classes >= reg.max_classes:
        raise CapacityError(f"class capacity {reg.max_classes} exhausted")
    w, h = reg.frame_size
    if not (0 <= u < w and 0 <= v < h):
        raise InputError(f"click ({u}, {v}) outside a {w}x{h} frame")
    class_id = reg.n_active_classes
    reg.clicks.append(Click(keyframe_id=keyframe_id, u=int(u), v=int(v),
                            class_id=class_id, name=name))
    return class_id


@dataclass
class SegmentationResult:
    labels: np.ndarray       # (H, W) int64, VOID_LABEL where unassigned
    confidence: np.ndarray   # (H, W) float32


def segment_view(params: sf.SceneParams, cfg: sf.FieldConfig, basis: sf.EncodingBasis,
                 cam: Camera, pose: Pose, n_active: int, bounds,
                 stride: int = 1, n_bins: int = rnd.DEFAULT_N_BINS) -> SegmentationResult:
    """Per-pixel argmax over active-class softmax; low-opacity pixels are void."""
    if n_active < 1:
        raise InputError(f"n_active must be >= 1, got {n_active}")
    us = np.arange(0, cam.width, stride)
    vs = np.arange(0, cam.height, stride)
    uu, vv = np.meshgrid(us, vs)
    origins, dirs = rnd.generate_rays(cam, pose, uu.ravel(), vv.ravel())
    depths, deltas = rnd.sample_bins(cam, "midpoint", n_bins)
    logits_rows, acc_rows = [], []
    for start in range(0, origins.shape[0], 4096):
        sl = slice(start, min(start + 4096, origins.shape[0]))
        res = rnd.trace_rays(params, cfg, basis, origins[sl], dirs[sl], depths, deltas,
                             bounds, want_semantic=True)
        logits_rows.append(res.logits[:, :n_active])
        acc_rows.append(res.acc)
    logits = np.concatenate(logits_rows)
    acc = np.concatenate(acc_rows)
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    labels = np.argmax(probs, axis=1).astype(np.int64)
    confidence = probs.max(axis=1).astype(np.float32)
    void = acc < 0.5
    labels[void] = VOID_LABEL
    confidence[void] = 0.0
    h_out, w_out = vv.shape
    return SegmentationResult(labels=labels.reshape(h_out, w_out),
                              confidence=confidence.reshape(h_out, w_out))


def knn_baseline(anchor_map: FeatureMap, click_zetas, target_map: FeatureMap) -> np.ndarray:
    """1-NN cosine classification of target cells against clicked anchors.

    Returns an (H', W') int64 raster; invalid cells get VOID_LABEL. Ties go
    to the lower class id.
    """
    anchors = np.stack([bilinear_query(anchor_map, z) for z in click_zetas]).astype(np.float64)
    norms = np.linalg.norm(anchors, axis=1)
    if np.any(norms == 0):
        raise NumericError("anchor feature has zero norm")
    anchors /= norms[:, None]

    labels = np.full((target_map.height, target_map.width), VOID_LABEL, dtype=np.int64)
    cells = target_map.valid_cells()
    if len(cells) == 0:
        return labels
    feats = target_map.data[cells[:, 0], cells[:, 1]].astype(np.float64)
    cell_norms = np.linalg.norm(feats, axis=1)
    if np.any(cell_norms == 0):
        raise NumericError("target cell feature has zero norm")
    sims = (feats / cell_norms[:, None]) @ anchors.T
    labels[cells[:, 0], cells[:, 1]] = np.argmax(sims, axis=1)
    return labels


def upsample_labels_nearest(coarse: np.ndarray, valid_mask: np.ndarray,
                            height: int, width: int) -> np.ndarray:
    """Nearest-cell upsampling of a coarse label raster to full resolution.

    Full-resolution pixels map back to the coarse grid by the cell-center
    correspondence; pixels landing on invalid cells take the nearest valid
    cell's label.
    """
    ch, cw = coarse.shape
    if valid_mask.any() and not valid_mask.all():
        _, (ri, rj) = ndimage.distance_transform_edt(~valid_mask, return_indices=True)
        filled = coarse[ri, rj]
    elif valid_mask.any():
        filled = coarse
    else:
        return np.full((height, width), VOID_LABEL, dtype=np.int64)
    vi = np.clip(np.round((np.arange(height) + 0.5) * ch / height - 0.5).astype(int), 0, ch - 1)
    uj = np.clip(np.round((np.arange(width) + 0.5) * cw / width - 0.5).astype(int), 0, cw - 1)
    return filled[np.ix_(vi, uj)].astype(np.int64)


def miou(pred: np.ndarray, gt: np.ndarray, ignore=()) -> tuple[list[tuple[int, float]], float]:
    """Per-class IoU over non-ignored pixels and the mean over gt classes.

    Classes are those present in the ground truth after removing ignored
    labels; predictions of other labels (void included) count against the
    union, never the intersection.
    """
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise EvaluationError(f"raster shapes differ: {pred.shape} vs {gt.shape}")
    keep = ~np.isin(gt, list(ignore)) if len(ignore) else np.ones(gt.shape, bool)
    if not keep.any():
        raise EvaluationError("no non-ignored pixels to evaluate")
    pred = pred[keep]
    gt = gt[keep]
    classes = sorted(int(c) for c in np.unique(gt))
    per_class = []
    for c in classes:
        inter = int(np.sum((pred == c) & (gt == c)))
        union = int(np.sum((pred == c) | (gt == c)))
        per_class.append((c, inter / union if union else 0.0))
    mean = float(np.mean([iou for _, iou in per_class])) if per_class else 0.0
    return per_class, mean


class ConfusionAccumulator:
    """Accumulates intersections/unions across frames for a dataset-level mIoU."""

    def __init__(self):
        self.inter: dict[int, int] = {}
        self.union: dict[int, int] = {}

    def add(self, pred: np.ndarray, gt: np.ndarray, ignore=()) -> None:
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        keep = ~np.isin(gt, list(ignore)) if len(ignore) else np.ones(gt.shape, bool)
        pred = pred[keep]
        gt = gt[keep]
        for c in (int(x) for x in np.unique(gt)):
            self.inter[c] = self.inter.get(c, 0) + int(np.sum((pred == c) & (gt == c)))
            self.union[c] = self.union.get(c, 0) + int(np.sum((pred == c) | (gt == c)))

    def result(self) -> tuple[dict[int, float], float]:
        if not self.union:
            raise EvaluationError("no pixels accumulated")
        per_class = {c: self.inter[c] / self.union[c] if self.union[c] else 0.0
                     for c in sorted(self.union)}
        return per_class, float(np.mean(list(per_class.values())))


def ablation_mode(mcfg, mode: str):
    """Return a config with the feature loss disabled (no_feature) or intact."""
    if mode == "fused":
        return replace(mcfg)
    if mode == "no_feature":
        return replace(mcfg, lambda_feat=0.0)
    raise ConfigError(f"unknown ablation mode {mode!r}")
