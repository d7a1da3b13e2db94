"""Mask decoder: two-way query-voxel transformer plus mask segmentation head.

Each transformer layer runs four steps: query self-attention, query-to-voxel
cross-attention, a query MLP, and inverse voxel-to-query cross-attention that
makes the voxel features click-aware. Residual connections wrap every step
with layer normalization applied inside the branch, so zero-weight branches
leave both streams untouched. Positional embeddings enter attention scores
additively on queries and keys, never on values, and stay constant across
layers.

Attention support is global by default; the local variant restricts keys to
a configurable radius around each attention query's position.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .encoder import VoxelFeatures, encode_features
from .errors import ConfigError, NumericError, ProtocolError
from .geom import PointCloud, VoxelGrid, fourier_embed, voxelize
from .queries import KIND_POSITIVE, QuerySet, query_positions, query_tensors

NEG_BIG = 1e30  # additive mask value that zeroes softmax support

# When set to a list, every attention call appends its (H, A, B) weight
# array. Used by invariant tests and attention-map visualization.
attention_recorder = None


@dataclass
class AttentionParams:
    wq: ad.Tensor
    wk: ad.Tensor
    wv: ad.Tensor
    wo: ad.Tensor
    bq: ad.Tensor
    bk: ad.Tensor
    bv: ad.Tensor
    bo: ad.Tensor
    num_heads: int


@dataclass
class LayerParams:
    q2q: AttentionParams
    q2q_ln: tuple
    q2v: AttentionParams
    q2v_ln_q: tuple
    q2v_ln_kv: tuple
    mlp_w0: ad.Tensor
    mlp_b0: ad.Tensor
    mlp_w1: ad.Tensor
    mlp_b1: ad.Tensor
    mlp_ln: tuple
    v2q: AttentionParams
    v2q_ln_q: tuple
    v2q_ln_kv: tuple


@dataclass
class MaskHeadParams:
    ext_w0: ad.Tensor
    ext_b0: ad.Tensor
    ext_w1: ad.Tensor
    ext_b1: ad.Tensor
    pred_w0: ad.Tensor
    pred_b0: ad.Tensor
    pred_w1: ad.Tensor
    pred_b1: ad.Tensor


@dataclass
class DecoderParams:
    num_layers: int
    num_heads: int
    layers: list  # of LayerParams
    head: MaskHeadParams


@dataclass
class SegmentationResult:
    scores: np.ndarray  # (N,) in [eps, 1-eps]
    binary_mask: np.ndarray  # (N,) bool, scores >= 0.5
    query_masks: np.ndarray  # (N, K)
    query_probs: np.ndarray  # (K,)
    per_layer_scores: Optional[np.ndarray] = None  # (L, N), training/eval only


def attention_t(q_in, k_in, v_in, p: AttentionParams, allowed=None):
    """Multi-head scaled dot-product attention (full support unless masked).

    allowed: optional (A, B) float {0,1} matrix; rows with no allowed key
    produce a zero output so the surrounding residual passes through.
    """
    a = q_in.data.shape[0]
    b = k_in.data.shape[0]
    d = q_in.data.shape[1]
    h = p.num_heads
    if d % h:
        raise ConfigError(f"d_model {d} not divisible by heads {h}")
    dh = d // h

    def split(x, rows):
        return ad.transpose(ad.reshape(x, (rows, h, dh)), (1, 0, 2))

    q = split(ad.linear(q_in, p.wq, p.bq), a)
    k = split(ad.linear(k_in, p.wk, p.bk), b)
    v = split(ad.linear(v_in, p.wv, p.bv), b)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if allowed is not None:
        bias = ((allowed - 1.0) * NEG_BIG).astype(q_in.data.dtype)[None, :, :]
        scores = ad.add(scores, ad.Tensor(bias))
    attn = ad.softmax(scores, axis=-1)
    if allowed is not None:
        has_key = (allowed.any(axis=1)).astype(q_in.data.dtype)[None, :, None]
        attn = ad.mul(attn, ad.Tensor(has_key))
    if attention_recorder is not None:
        attention_recorder.append(attn.data)
    out = ad.transpose(ad.matmul(attn, v), (1, 0, 2))
    return ad.linear(ad.reshape(out, (a, d)), p.wo, p.bo)


def global_attention(queries, keys, values, params: AttentionParams):
    """Public ndarray entry point for plain global multi-head attention."""
    with ad.no_grad():
        out = attention_t(ad.Tensor(queries), ad.Tensor(keys), ad.Tensor(values), params)
    return out.data


def decoder_layer_t(qc, qp, v, vp, p: LayerParams, masks=(None, None, None)):
    """One two-way layer on tensors; returns updated (queries, voxels)."""
    m_qq, m_qv, m_vq = masks
    # 1) self-attention among queries
    n = ad.layer_norm(qc, *p.q2q_ln)
    npos = ad.add(n, qp)
    qc = ad.add(qc, attention_t(npos, npos, n, p.q2q, m_qq))
    # 2) cross-attention queries -> voxels
    nq = ad.add(ad.layer_norm(qc, *p.q2v_ln_q), qp)
    nv = ad.layer_norm(v, *p.q2v_ln_kv)
    qc = ad.add(qc, attention_t(nq, ad.add(nv, vp), nv, p.q2v, m_qv))
    # 3) query MLP
    n = ad.layer_norm(qc, *p.mlp_ln)
    qc = ad.add(qc, ad.linear(ad.relu(ad.linear(n, p.mlp_w0, p.mlp_b0)), p.mlp_w1, p.mlp_b1))
    # 4) inverse cross-attention voxels -> queries
    nv = ad.layer_norm(v, *p.v2q_ln_q)
    nq = ad.layer_norm(qc, *p.v2q_ln_kv)
    v = ad.add(v, attention_t(ad.add(nv, vp), ad.add(nq, qp), nq, p.v2q, m_vq))
    return qc, v


def decoder_layer(query_content, query_pos, voxel_feats, voxel_pos, p: LayerParams,
                  masks=(None, None, None)):
    """Public ndarray wrapper around one decoder layer."""
    with ad.no_grad():
        qc, v = decoder_layer_t(ad.Tensor(query_content), ad.Tensor(query_pos),
                                ad.Tensor(voxel_feats), ad.Tensor(voxel_pos), p, masks)
    return qc.data, v.data


def run_decoder(qc, qp, v, vp, params: DecoderParams, masks=(None, None, None)):
    """Apply all layers; returns the list of per-layer (queries, voxels) states."""
    if params.num_layers < 1:
        raise ConfigError("decoder needs at least one layer")
    states = []
    for i, layer in enumerate(params.layers):
        qc, v = decoder_layer_t(qc, qp, v, vp, layer, masks)
        if not (np.all(np.isfinite(qc.data)) and np.all(np.isfinite(v.data))):
            raise NumericError(f"non-finite activations in decoder layer {i}")
        states.append((qc, v))
    return states


# ---------------------------------------------------------------------------
# mask segmentation head
# ---------------------------------------------------------------------------


def relative_position_embedding(cloud: PointCloud, grid: VoxelGrid, fourier_cfg) -> np.ndarray:
    """Fourier embedding of each point's offset within its voxel."""
    offsets = (cloud.positions - grid.voxel_centers[grid.point_to_voxel]) / grid.voxel_size
    return fourier_embed(offsets, fourier_cfg)


def extract_point_features_t(voxel_feats, cloud, grid, head: MaskHeadParams,
                             pe_rel: np.ndarray, dtype):
    """x_i = MLP([voxel feature of point i, embedding of in-voxel offset])."""
    xv = ad.gather_rows(voxel_feats, grid.point_to_voxel)
    x = ad.concat(xv, ad.Tensor(pe_rel.astype(dtype)), axis=1)
    if x.data.shape[1] != head.ext_w0.data.shape[0]:
        raise ConfigError(
            f"extractor expects {head.ext_w0.data.shape[0]} inputs, got {x.data.shape[1]}"
        )
    return ad.linear(ad.relu(ad.linear(x, head.ext_w0, head.ext_b0)),
                     head.ext_w1, head.ext_b1)


def extract_point_features(voxels: VoxelFeatures, cloud: PointCloud, grid: VoxelGrid,
                           head: MaskHeadParams, fourier_cfg, dtype=np.float64) -> np.ndarray:
    pe_rel = relative_position_embedding(cloud, grid, fourier_cfg)
    with ad.no_grad():
        out = extract_point_features_t(ad.Tensor(voxels.features.astype(dtype)),
                                       cloud, grid, head, pe_rel, dtype)
    return out.data


def compute_binary_masks_t(point_features, content):
    """mask[i, k] = sigmoid(<x_i, c_k>)."""
    return ad.sigmoid(ad.matmul(point_features, ad.transpose(content, (1, 0))))


def compute_binary_masks(point_features: np.ndarray, query_set: QuerySet) -> np.ndarray:
    with ad.no_grad():
        out = compute_binary_masks_t(ad.Tensor(point_features),
                                     ad.Tensor(query_set.content_matrix.astype(point_features.dtype)))
    return out.data


def predict_mask_prob_t(content, head: MaskHeadParams):
    """prob_k = sigmoid(MLP(c_k)), shared across query kinds; (K, 1)."""
    return ad.sigmoid(ad.linear(ad.relu(ad.linear(content, head.pred_w0, head.pred_b0)),
                                head.pred_w1, head.pred_b1))


def predict_mask_prob(query_set: QuerySet, head: MaskHeadParams, dtype=np.float64) -> np.ndarray:
    with ad.no_grad():
        out = predict_mask_prob_t(ad.Tensor(query_set.content_matrix.astype(dtype)), head)
    return out.data[:, 0]


def aggregate_scores_t(masks, probs, eps=1e-6):
    """score_i = clamp(sum_k mask[i,k] * prob_k, eps, 1-eps); (N, 1)."""
    return ad.clamp(ad.matmul(masks, probs), eps, 1.0 - eps)


def aggregate_scores(masks: np.ndarray, probs: np.ndarray, eps=1e-6) -> np.ndarray:
    with ad.no_grad():
        out = aggregate_scores_t(ad.Tensor(masks), ad.Tensor(probs.reshape(-1, 1)), eps)
    return out.data[:, 0]


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


@dataclass
class SceneCache:
    """Click-independent precomputation for repeated inference on one scene."""

    grid: VoxelGrid
    voxel_features: np.ndarray
    voxel_pos_embed: np.ndarray
    point_pe_rel: np.ndarray


def _attention_masks(config, q_positions, v_centers):
    if config.attention == "global":
        return (None, None, None)
    r = config.local_radius_voxels * config.voxel_size
    r2 = r * r

    def within(a, b):
        d = a[:, None, :] - b[None, :, :]
        return ((d * d).sum(axis=2) <= r2).astype(np.float64)

    return (within(q_positions, q_positions),
            within(q_positions, v_centers),
            within(v_centers, q_positions))


def forward(model, cloud: PointCloud, clicks, cache: SceneCache = None,
            with_layers: bool = False, aug_start: int = 0):
    """Run the full pipeline on tensors.

    Returns a dict with per-layer score tensors (when with_layers), final
    scores / masks / probs, and the query metadata. Differentiable when
    called outside no_grad and without a cache.
    """
    cfg = model.config
    dtype = cfg.np_dtype
    if not clicks:
        raise ProtocolError("segmentation requires at least one click")
    if not any(c.sign == 1 for c in clicks):
        raise ProtocolError("segmentation requires at least one positive click")

    if cache is not None:
        grid = cache.grid
        vfeat = ad.Tensor(cache.voxel_features)
        vpos = ad.Tensor(cache.voxel_pos_embed)
        pe_rel = cache.point_pe_rel
    else:
        grid = voxelize(cloud, cfg.voxel_size)
        vfeat = encode_features(cloud, grid, model.encoder_params(), dtype)
        centers_f = fourier_embed(grid.voxel_centers, cfg.fourier).astype(dtype)
        qp = model.query_params()
        vpos = ad.linear(ad.Tensor(centers_f), qp.proj_w, qp.proj_b)
        pe_rel = relative_position_embedding(cloud, grid, cfg.fourier)

    positions, kinds = query_positions(clicks, cloud, cfg.num_aug_queries, aug_start)
    content, qpos = query_tensors(positions, kinds, model.query_params(), dtype)
    masks3 = _attention_masks(cfg, positions, grid.voxel_centers)

    dec = model.decoder_params()
    states = run_decoder(content, qpos, vfeat, vpos, dec, masks3)

    head = dec.head
    layer_scores = []
    layer_range = range(len(states)) if with_layers else [len(states) - 1]
    final = {}
    for i in layer_range:
        qc_i, v_i = states[i]
        x = extract_point_features_t(v_i, cloud, grid, head, pe_rel, dtype)
        masks = compute_binary_masks_t(x, qc_i)
        probs = predict_mask_prob_t(qc_i, head)
        scores = aggregate_scores_t(masks, probs, cfg.score_eps)
        layer_scores.append(scores)
        if i == len(states) - 1:
            final = {"masks": masks, "probs": probs, "scores": scores}
    return {
        "per_layer_scores": layer_scores,
        "scores": final["scores"],
        "masks": final["masks"],
        "probs": final["probs"],
        "query_positions": positions,
        "query_kinds": kinds,
        "grid": grid,
    }


def prepare_scene(model, cloud: PointCloud) -> SceneCache:
    """Precompute the click-independent parts for repeated segment calls."""
    cfg = model.config
    dtype = cfg.np_dtype
    with ad.no_grad():
        grid = voxelize(cloud, cfg.voxel_size)
        vfeat = encode_features(cloud, grid, model.encoder_params(), dtype).data
        centers_f = fourier_embed(grid.voxel_centers, cfg.fourier).astype(dtype)
        qp = model.query_params()
        vpos = ad.linear(ad.Tensor(centers_f), qp.proj_w, qp.proj_b).data
        pe_rel = relative_position_embedding(cloud, grid, cfg.fourier)
    return SceneCache(grid=grid, voxel_features=vfeat, voxel_pos_embed=vpos,
                      point_pe_rel=pe_rel)


def segment(model, cloud: PointCloud, clicks, cache: SceneCache = None,
            with_layers: bool = False, aug_start: int = 0) -> SegmentationResult:
    """Segment the cloud given clicks; deterministic for fixed model and inputs."""
    with ad.no_grad():
        out = forward(model, cloud, clicks, cache=cache, with_layers=with_layers,
                      aug_start=aug_start)
    scores = out["scores"].data[:, 0]
    per_layer = None
    if with_layers:
        per_layer = np.stack([s.data[:, 0] for s in out["per_layer_scores"]])
    return SegmentationResult(
        scores=scores,
        binary_mask=scores >= 0.5,
        query_masks=out["masks"].data,
        query_probs=out["probs"].data[:, 0],
        per_layer_scores=per_layer,
    )
