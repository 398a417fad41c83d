"""Offline run orchestration: frame playback, clicks, checkpoints, reports."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mapper as mp
from . import scene_field as sf
from . import semantics as sem
from .diffcore import AdamConfig
from .errors import ConfigError, InputError
from .features import clamp_zeta_to_valid, crop_padding
from .renderer import VOID_LABEL
from .simio import Dataset, load_dataset


def load_click_script(path) -> list[dict]:
    """Click script: JSON list of {at_frame, keyframe_id, u, v, name}."""
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise InputError("click script must be a JSON list")
    for e in entries:
        for key in ("at_frame", "keyframe_id", "u", "v"):
            if key not in e:
                raise InputError(f"click entry missing {key!r}: {e}")
    return sorted(entries, key=lambda e: e["at_frame"])


def _dataset_frame_to_mapper(ds: Dataset, idx: int, crop=(1, 2)) -> mp.Frame:
    rec = ds.frame(idx)
    features = crop_padding(rec.features, *crop) if crop else rec.features
    return mp.Frame(frame_id=rec.frame_id, pose=rec.pose, depth=rec.depth,
                    features=features, clicks=[])


@dataclass
class RunResult:
    state: mp.TrainState
    metrics: list[dict]
    n_keyframes: int
    seconds: float


def run_session(
    dataset_dir,
    clicks_path=None,
    steps_per_frame: int | None = None,
    mode: str = "fused",
    checkpoint_path=None,
    metrics_path=None,
    seed: int = 0,
    mcfg: mp.MapperConfig | None = None,
    adam: AdamConfig | None = None,
    max_classes: int = 16,
    progress: bool = False,
) -> RunResult:
    """Play a dataset through the mapper, applying scripted clicks."""
    t0 = time.perf_counter()
    ds = load_dataset(dataset_dir)
    mcfg = mcfg or mp.MapperConfig()
    if steps_per_frame is not None:
        from dataclasses import replace
        mcfg = replace(mcfg, steps_per_frame=steps_per_frame)
    mcfg = sem.ablation_mode(mcfg, mode)

    k = int(ds.manifest.get("oracle", {}).get("dim") or ds.frame(0).features.dim)
    state = mp.make_train_state(ds.cam, ds.bounds, target_feature_dim=k,
                                max_classes=max_classes, seed=seed, adam=adam)
    script = load_click_script(clicks_path) if clicks_path else []
    script_pos = 0

    metrics: list[dict] = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for fi in range(ds.n_frames):
            frame = _dataset_frame_to_mapper(ds, fi)
            mp.ingest_frame(state, frame, mcfg)
            while script_pos < len(script) and script[script_pos]["at_frame"] <= fi:
                entry = script[script_pos]
                kf = _find_keyframe(state, entry["keyframe_id"])
                cls = sem.add_click(state.registry, entry["keyframe_id"],
                                    entry["u"], entry["v"], entry.get("name", ""))
                kf.clicks.append((entry["u"], entry["v"], cls))
                script_pos += 1
            for _ in range(mcfg.steps_per_frame):
                m = mp.mapping_step(state, mcfg)
                rec = m.record()
                metrics.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
            if progress and metrics:
                print(f"frame {fi + 1}/{ds.n_frames} keyframes={len(state.keyframes)} "
                      f"L_total={metrics[-1]['L_total']:.4f}", flush=True)
    finally:
        if sink:
            sink.close()
    if checkpoint_path:
        sf.save_checkpoint(checkpoint_path, state.field_cfg, state.params)
    return RunResult(state=state, metrics=metrics, n_keyframes=len(state.keyframes),
                     seconds=time.perf_counter() - t0)


def _find_keyframe(state: mp.TrainState, keyframe_id: int) -> mp.Frame:
    for kf in state.keyframes:
        if kf.frame_id == keyframe_id:
            return kf
    raise InputError(f"keyframe {keyframe_id} is not in the keyframe set")


def eval_frames(n_frames: int, every: int = 5) -> list[int]:
    picked = list(range(0, n_frames, every))
    if n_frames - 1 not in picked:
        picked.append(n_frames - 1)
    return picked


def evaluate_segmentation(
    params: sf.SceneParams,
    cfg: sf.FieldConfig,
    ds: Dataset,
    n_active: int,
    stride: int = 2,
    every: int = 5,
    ignore=(),
) -> dict:
    """Dataset-level mIoU of rendered semantics against ground-truth labels."""
    basis = sf.make_basis("axes_plus_icosahedron", 6)
    acc = sem.ConfusionAccumulator()
    frames = eval_frames(ds.n_frames, every)
    for fi in frames:
        rec = ds.frame(fi)
        seg = sem.segment_view(params, cfg, basis, ds.cam, rec.pose, n_active,
                               ds.bounds, stride=stride)
        gt = rec.labels[::stride, ::stride].astype(np.int64)
        acc.add(seg.labels, gt, ignore=ignore)
    per_class, mean = acc.result()
    return {
        "per_class_iou": {str(c): v for c, v in per_class.items()},
        "mean_iou": mean,
        "n_eval_frames": len(frames),
    }


def dataset_ignore_labels(ds: Dataset) -> tuple:
    """Sky pixels (no ground-truth geometry) are excluded from mIoU."""
    bg = ds.manifest.get("background_label")
    return (int(bg),) if bg is not None else ()


def evaluate_checkpoint(checkpoint_path, dataset_dir, clicks_path=None,
                        report_path=None, stride: int = 2, every: int = 5) -> dict:
    ds = load_dataset(dataset_dir)
    cfg, params = sf.load_checkpoint(checkpoint_path)
    clicks_file = clicks_path or (Path(dataset_dir) / "clicks.json")
    script = load_click_script(clicks_file)
    n_active = len(script)
    if n_active < 1:
        raise ConfigError("no clicks recorded; nothing to evaluate")
    report = evaluate_segmentation(params, cfg, ds, n_active, stride=stride, every=every,
                                   ignore=dataset_ignore_labels(ds))
    if report_path:
        Path(report_path).write_text(json.dumps(report, indent=2))
    return report


def click_zeta(entry: dict, cam_w: int, cam_h: int, coarse_w: int, coarse_h: int):
    """Normalized coarse-map position of a full-resolution click."""
    x = entry["u"] * coarse_w / cam_w - 0.5
    y = entry["v"] * coarse_h / cam_h - 0.5
    zx = 0.0 if coarse_w == 1 else np.clip(x / (coarse_w - 1), 0.0, 1.0)
    zy = 0.0 if coarse_h == 1 else np.clip(y / (coarse_h - 1), 0.0, 1.0)
    return (float(zx), float(zy))


def baseline_report(dataset_dir, clicks_path=None, report_path=None,
                    stride: int = 2, every: int = 5, crop=(1, 2)) -> dict:
    """1-NN cosine baseline on the raw coarse features, upsampled to full res."""
    ds = load_dataset(dataset_dir)
    clicks_file = clicks_path or (Path(dataset_dir) / "clicks.json")
    script = load_click_script(clicks_file)
    if not script:
        raise ConfigError("no clicks recorded; nothing to evaluate")
    anchor_rec = ds.frame(0)
    anchor_map = crop_padding(anchor_rec.features, *crop) if crop else anchor_rec.features
    zetas = [clamp_zeta_to_valid(
        anchor_map,
        click_zeta(e, ds.cam.width, ds.cam.height, anchor_map.width, anchor_map.height))
        for e in script]

    acc = sem.ConfusionAccumulator()
    ignore = dataset_ignore_labels(ds)
    frames = eval_frames(ds.n_frames, every)
    for fi in frames:
        rec = ds.frame(fi)
        target = crop_padding(rec.features, *crop) if crop else rec.features
        coarse = sem.knn_baseline(anchor_map, zetas, target)
        full = sem.upsample_labels_nearest(coarse, target.valid_mask,
                                           ds.cam.height, ds.cam.width)
        pred = full[::stride, ::stride]
        gt = rec.labels[::stride, ::stride].astype(np.int64)
        acc.add(pred, gt, ignore=ignore)
    per_class, mean = acc.result()
    report = {
        "per_class_iou": {str(c): v for c, v in per_class.items()},
        "mean_iou": mean,
        "n_eval_frames": len(frames),
        "frontend_only": True,
    }
    if report_path:
        Path(report_path).write_text(json.dumps(report, indent=2))
    return report
