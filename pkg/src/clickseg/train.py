"""Training: weighted masked BCE, deep supervision, click simulation, SGD."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder
from .errors import InputError, NumericError
from .geom import PointCloud
from .queries import Click

N_POS_RANGE = (1, 5)  # simulated positive clicks per sample, inclusive
N_NEG_RANGE = (0, 5)


@dataclass
class LossConfig:
    lambda_fg: float = 1.0
    lambda_bg: float = 1.0
    class_weights: dict = field(default_factory=dict)
    clamp_eps: float = 1e-6

    def __post_init__(self):
        if self.lambda_fg < 0 or self.lambda_bg < 0:
            raise InputError("lambda weights must be nonnegative")
        if self.lambda_fg + self.lambda_bg == 0:
            raise InputError("at least one of lambda_fg/lambda_bg must be positive")

    def weight(self, category) -> float:
        # unseen categories fall back to weight 1
        return float(self.class_weights.get(category, 1.0))


@dataclass
class TrainingSample:
    cloud: PointCloud
    gt_mask: np.ndarray  # (N,) bool
    category: str
    clicks: list

    def __post_init__(self):
        self.gt_mask = np.asarray(self.gt_mask, dtype=bool)
        if self.gt_mask.shape[0] != self.cloud.n_points:
            raise InputError("gt_mask length must match point count")
        if not self.gt_mask.any():
            raise InputError("training sample needs at least one foreground point")


def masked_bce(scores, gt_mask, config: LossConfig, category=None):
    """Class-weighted BCE split over foreground / background point sets.

    scores: (N, 1) tensor of clamped probabilities. An empty partition
    contributes zero.
    """
    gt_mask = np.asarray(gt_mask, dtype=bool)
    fg_idx = np.flatnonzero(gt_mask)
    bg_idx = np.flatnonzero(~gt_mask)
    total = None
    if fg_idx.size:
        fg = ad.gather_rows(scores, fg_idx)
        term = ad.scale(ad.tmean(ad.log(fg)), -config.lambda_fg)
        total = term
    if bg_idx.size:
        bg = ad.gather_rows(scores, bg_idx)
        term = ad.scale(ad.tmean(ad.log(ad.sub(1.0, bg))), -config.lambda_bg)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, config.weight(category))


def deep_supervision_loss(per_layer_scores, gt_mask, config: LossConfig, category=None):
    """Sum of masked BCE over every decoder layer's scores (equal weights)."""
    if not per_layer_scores:
        raise InputError("need at least one layer of scores")
    total = masked_bce(per_layer_scores[0], gt_mask, config, category)
    for scores in per_layer_scores[1:]:
        total = ad.add(total, masked_bce(scores, gt_mask, config, category))
    return total


def simulate_clicks(gt_mask, cloud: PointCloud, n_pos: int, n_neg: int, seed):
    """Uniform without-replacement clicks: positives on fg, negatives on bg."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    fg = np.flatnonzero(gt_mask)
    bg = np.flatnonzero(~gt_mask)
    if n_pos < 1:
        raise InputError("need at least one positive click")
    if fg.size < n_pos:
        raise InputError(f"foreground has {fg.size} points, need {n_pos}")
    if bg.size < n_neg:
        raise InputError(f"background has {bg.size} points, need {n_neg}")
    clicks = [Click(cloud.positions[i], 1) for i in rng.choice(fg, n_pos, replace=False)]
    if n_neg:
        clicks += [Click(cloud.positions[i], -1) for i in rng.choice(bg, n_neg, replace=False)]
    return clicks


def sample_training_instance(scene, seed, max_points=None) -> TrainingSample:
    """Pick a uniform instance (stuff included) and simulate clicks for it."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = sorted(scene.categories)
    if not ids:
        raise InputError("scene has no instances")
    inst = ids[int(rng.integers(0, len(ids)))]
    gt = scene.instance_ids == inst
    cloud = scene.cloud
    if max_points is not None and cloud.n_points > max_points:
        cloud, gt = _subsample(cloud, gt, max_points, rng)
    n_pos = int(rng.integers(N_POS_RANGE[0], N_POS_RANGE[1] + 1))
    n_neg = int(rng.integers(N_NEG_RANGE[0], N_NEG_RANGE[1] + 1))
    n_pos = min(n_pos, int(gt.sum()))
    n_neg = min(n_neg, int((~gt).sum()))
    clicks = simulate_clicks(gt, cloud, n_pos, n_neg, rng)
    return TrainingSample(cloud=cloud, gt_mask=gt,
                          category=scene.categories[inst], clicks=clicks)


def _subsample(cloud, gt, max_points, rng):
    """Proportional fg/bg subsample keeping at least one foreground point."""
    fg = np.flatnonzero(gt)
    bg = np.flatnonzero(~gt)
    n = cloud.n_points
    n_fg = max(1, min(fg.size, int(round(max_points * fg.size / n))))
    n_bg = min(bg.size, max_points - n_fg)
    keep = np.sort(np.concatenate([
        rng.choice(fg, n_fg, replace=False),
        rng.choice(bg, n_bg, replace=False) if n_bg else np.empty(0, dtype=np.int64),
    ]))
    sub = PointCloud(cloud.positions[keep], cloud.channels[keep])
    return sub, gt[keep]


def compute_class_weights(scenes) -> dict:
    """Inverse-frequency instance weights, normalized to mean 1 over categories."""
    counts = {}
    for scene in scenes:
        for cat in scene.categories.values():
            counts[cat] = counts.get(cat, 0) + 1
    if not counts:
        raise InputError("no instances in dataset")
    total = sum(counts.values())
    inv = {c: total / n for c, n in counts.items()}
    mean = sum(inv.values()) / len(inv)
    return {c: w / mean for c, w in inv.items()}


@dataclass
class TrainConfig:
    epochs: int = 8
    optimizer: str = "sgd"  # "sgd" (momentum) | "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    adam_beta2: float = 0.999
    lambda_fg: float = 1.0
    lambda_bg: float = 1.0
    grad_clip: float = 10.0  # global norm; 0 disables
    max_points: int = 1800  # per-sample training subsample; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


def train(scenes, model, config: TrainConfig, log_every=0, on_step=None):
    """SGD-with-momentum over per-scene samples; returns (model, history).

    Fully reproducible: sample choice, click simulation, and FPS starts all
    derive from (seed, epoch, scene index). History rows are (step, loss).
    """
    if not scenes:
        raise InputError("training dataset is empty")
    weights = compute_class_weights(scenes)
    loss_cfg = LossConfig(lambda_fg=config.lambda_fg, lambda_bg=config.lambda_bg,
                          class_weights=weights)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11CE]))
    opt = Optimizer(model, config)
    history = []
    step = 0
    max_pts = config.max_points if config.max_points else None
    for epoch in range(config.epochs):
        for si in order_rng.permutation(len(scenes)):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, int(si)]))
            sample = sample_training_instance(scenes[si], rng, max_points=max_pts)
            aug_start = int(rng.integers(0, sample.cloud.n_points))
            out = decoder.forward(model, sample.cloud, sample.clicks,
                                  with_layers=True, aug_start=aug_start)
            loss = deep_supervision_loss(out["per_layer_scores"], sample.gt_mask,
                                         loss_cfg, sample.category)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss {loss_val} at step {step} "
                    f"(epoch {epoch}, scene {si}, category {sample.category})"
                )
            model.zero_grad()
            loss.backward()
            opt.step()
            history.append((step, loss_val))
            if log_every and step % log_every == 0:
                print(f"step {step:5d} epoch {epoch} loss {loss_val:.4f}", flush=True)
            if on_step is not None:
                on_step(step, loss_val)
            step += 1
    return model, history


class Optimizer:
    """SGD with momentum (default) or Adam, with optional global-norm clipping."""

    def __init__(self, model, config: TrainConfig):
        self.model = model
        self.config = config
        self.velocity = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        if config.optimizer == "adam":
            self.second = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        self.t = 0

    def step(self):
        config = self.config
        grads = {k: t.grad for k, t in self.model.params.items() if t.grad is not None}
        if config.grad_clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > config.grad_clip:
                scale = config.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        if config.optimizer == "sgd":
            for k, g in grads.items():
                v = self.velocity[k]
                v *= config.momentum
                v += g
                self.model.params[k].data = self.model.params[k].data - config.lr * v
        else:
            b1, b2 = config.momentum, config.adam_beta2
            c1 = 1.0 - b1**self.t
            c2 = 1.0 - b2**self.t
            for k, g in grads.items():
                m = self.velocity[k]
                v = self.second[k]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + 1e-8)
                self.model.params[k].data = self.model.params[k].data - config.lr * update


def _sgd_step(model, velocity, config: TrainConfig):
    """Single SGD/momentum step (probe helper; `train` uses Optimizer)."""
    opt = Optimizer(model, config)
    opt.velocity = velocity
    opt.step()


def save_history_csv(path, history):
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, loss in history:
            fh.write(f"{step},{loss:.8f}\n")
