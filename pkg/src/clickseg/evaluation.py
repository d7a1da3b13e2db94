"""IoU@k metrics and the simulated interactive evaluation loop.

The first click lands on the interior-most ground-truth point; later clicks
follow a policy: "largest-error-center" places the next click at the point of
the biggest connected error component farthest from any correctly labeled
point, "random-error" picks a uniform error point. Both are deterministic
given (model, data, policy, seed).
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputError
from .geom import PointCloud
from .queries import Click

POLICIES = ("largest-error-center", "random-error")


class Converged(Exception):
    """Raised by next_click when the prediction already matches ground truth."""


@dataclass
class EvalRecord:
    instance_id: int
    category: str
    kind: str  # "thing" | "stuff"
    iou_at: dict  # k -> IoU
    clicks_used: int


def iou(pred, gt) -> float:
    """Intersection over union of two boolean masks (1.0 when both empty)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def _component_click(positions, error_idx, correct_idx, radius):
    """Center of the largest connected error component (lowest-index ties)."""
    err_pos = positions[error_idx]
    labels = kernels.radius_components(err_pos, radius)
    sizes = np.bincount(labels)
    best = np.flatnonzero(sizes == sizes.max()).min()
    comp = error_idx[labels == best]
    if correct_idx.size:
        dsq, _ = kernels.min_dist_to_set(positions[comp], positions[correct_idx])
    else:
        # everything is an error: fall back to distance from other components
        rest = np.setdiff1d(error_idx, comp)
        if rest.size:
            dsq, _ = kernels.min_dist_to_set(positions[comp], positions[rest])
        else:
            dsq = np.zeros(comp.size)
    return int(comp[np.argmax(dsq)]), int(sizes[best])


def next_click(pred, gt, cloud: PointCloud, policy="largest-error-center",
               seed=0, radius=1.0) -> Click:
    """Choose the next corrective click from the current error set."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InputError("mask shapes differ")
    if policy not in POLICIES:
        raise InputError(f"unknown policy {policy!r}")
    fn = np.flatnonzero(gt & ~pred)
    fp = np.flatnonzero(pred & ~gt)
    if fn.size == 0 and fp.size == 0:
        raise Converged
    if policy == "random-error":
        rng = np.random.default_rng(seed)
        errors = np.concatenate([fn, fp])
        i = int(rng.choice(errors))
        return Click(cloud.positions[i], 1 if gt[i] else -1)
    correct = np.flatnonzero(pred == gt)
    best_idx, best_size, best_sign = -1, -1, 0
    for idx, sign in ((fn, 1), (fp, -1)):
        if idx.size == 0:
            continue
        point, size = _component_click(cloud.positions, idx, correct, radius)
        # larger component wins; exact ties toward the lower point index
        if size > best_size or (size == best_size and point < best_idx):
            best_idx, best_size, best_sign = point, size, sign
    return Click(cloud.positions[best_idx], best_sign)


def first_click(gt, cloud: PointCloud) -> Click:
    """Positive click at the interior-most foreground point."""
    gt = np.asarray(gt, dtype=bool)
    fg = np.flatnonzero(gt)
    bg = np.flatnonzero(~gt)
    if fg.size == 0:
        raise InputError("ground truth has no foreground")
    if bg.size:
        dsq, _ = kernels.min_dist_to_set(cloud.positions[fg], cloud.positions[bg])
        pick = fg[np.argmax(dsq)]
    else:
        centroid = cloud.positions[fg].mean(axis=0, keepdims=True)
        dsq, _ = kernels.min_dist_to_set(cloud.positions[fg], centroid)
        pick = fg[np.argmin(dsq)]
    return Click(cloud.positions[pick], 1)


def evaluate_instance(model, cloud: PointCloud, gt_mask, k_values,
                      policy="largest-error-center", seed=0,
                      instance_id=0, category="", kind="",
                      cache=None) -> EvalRecord:
    """Interactive loop: one click at a time up to max(k_values)."""
    k_values = sorted(int(k) for k in k_values)
    gt = np.asarray(gt_mask, dtype=bool)
    if cache is None:
        cache = model.prepare_scene(cloud)
    radius = 2.0 * model.config.voxel_size
    clicks = [first_click(gt, cloud)]
    iou_at = {}
    current = 0.0
    for t in range(1, k_values[-1] + 1):
        if t > len(clicks):
            try:
                clicks.append(next_click(pred, gt, cloud, policy,
                                         seed=seed * 100003 + t, radius=radius))
            except Converged:
                pass  # keep click count; IoU carries forward
        if t == len(clicks):
            pred = model.segment(cloud, clicks, cache=cache).binary_mask
            current = iou(pred, gt)
        if t in k_values:
            iou_at[t] = current
    return EvalRecord(instance_id=instance_id, category=category, kind=kind,
                      iou_at=iou_at, clicks_used=len(clicks))


def miou_at_k(records, k, kind=None) -> float:
    """Mean over categories of per-category mean IoU@k."""
    if kind is not None:
        records = [r for r in records if r.kind == kind]
    if not records:
        raise InputError("no evaluation records")
    by_cat = {}
    for r in records:
        by_cat.setdefault(r.category, []).append(r.iou_at[k])
    return float(np.mean([np.mean(v) for v in by_cat.values()]))


def evaluate_dataset(model, scenes, k_values, policy="largest-error-center", seed=0):
    """Evaluate every instance of every scene; per-instance seeds derived."""
    records = []
    for s_i, scene in enumerate(scenes):
        cache = model.prepare_scene(scene.cloud)
        for inst in sorted(scene.categories):
            gt = scene.instance_ids == inst
            if not gt.any():
                continue
            cat = scene.categories[inst]
            records.append(evaluate_instance(
                model, scene.cloud, gt, k_values, policy=policy,
                seed=seed * 1000 + s_i * 37 + inst,
                instance_id=inst, category=cat, kind=scene.kinds[cat],
                cache=cache,
            ))
    return records


def summarize(records, k_values) -> dict:
    out = {"overall": {}, "thing": {}, "stuff": {}}
    for k in k_values:
        out["overall"][str(k)] = miou_at_k(records, k)
        for kind in ("thing", "stuff"):
            if any(r.kind == kind for r in records):
                out[kind][str(k)] = miou_at_k(records, k, kind)
    return out


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "category", "kind", "k", "iou"])
        for r in records:
            for k, v in sorted(r.iou_at.items()):
                w.writerow([r.instance_id, r.category, r.kind, k, f"{v:.6f}"])


def write_summary_json(path, records, k_values, policy):
    summary = {"policy": policy, "miou": summarize(records, k_values)}
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary
