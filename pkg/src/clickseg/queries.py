"""Click and augmentation queries.

A click becomes a query whose content is a learned positive/negative vector
and whose positional part is a projected Fourier embedding. Augmentation
queries are placed at farthest-point-sampled scene points with zero content,
so position alone drives their early attention.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InputError, ProtocolError
from .geom import FourierEmbeddingConfig, PointCloud, farthest_point_sample, fourier_embed

KIND_POSITIVE = "positive"
KIND_NEGATIVE = "negative"
KIND_AUGMENTATION = "augmentation"


@dataclass
class Click:
    position: np.ndarray  # (3,) meters
    sign: int  # +1 or -1

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise InputError("click position must be finite")
        if self.sign not in (1, -1):
            raise InputError(f"click sign must be +1 or -1, got {self.sign}")


def clicks_to_json(clicks) -> str:
    return json.dumps([{"pos": list(map(float, c.position)), "sign": c.sign} for c in clicks])


def clicks_from_json(text: str):
    try:
        raw = json.loads(text)
        return [Click(np.array(item["pos"], dtype=float), int(item["sign"])) for item in raw]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed click list: {exc}") from exc


@dataclass
class Query:
    content: np.ndarray  # (D,)
    pos_embed: np.ndarray  # (D,)
    position: np.ndarray  # (3,)
    kind: str


@dataclass
class QuerySet:
    queries: list

    @property
    def n_total(self) -> int:
        return len(self.queries)

    def count(self, kind: str) -> int:
        return sum(1 for q in self.queries if q.kind == kind)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([q.position for q in self.queries])

    @property
    def content_matrix(self) -> np.ndarray:
        return np.stack([q.content for q in self.queries])

    @property
    def pos_embed_matrix(self) -> np.ndarray:
        return np.stack([q.pos_embed for q in self.queries])

    @property
    def kinds(self):
        return [q.kind for q in self.queries]


@dataclass
class QueryParams:
    """Learned click vectors and the shared Fourier-to-D projection."""

    v_pos: ad.Tensor  # (D,)
    v_neg: ad.Tensor  # (D,)
    proj_w: ad.Tensor  # (fourier out_dim, D)
    proj_b: ad.Tensor  # (D,)
    fourier: FourierEmbeddingConfig


def query_positions(clicks, cloud: PointCloud, m: int, start_index: int = 0):
    """Click positions followed by FPS augmentation positions; plus kinds."""
    if m > cloud.n_points:
        raise InputError(f"m={m} exceeds point count {cloud.n_points}")
    positions = [c.position for c in clicks]
    kinds = [KIND_POSITIVE if c.sign == 1 else KIND_NEGATIVE for c in clicks]
    if m > 0:
        idx = farthest_point_sample(cloud.positions, m, start_index)
        positions.extend(cloud.positions[i] for i in idx)
        kinds.extend([KIND_AUGMENTATION] * m)
    return np.array(positions, dtype=np.float64).reshape(len(kinds), 3), kinds


def query_tensors(positions, kinds, params: QueryParams, dtype=np.float64):
    """Differentiable (content, pos_embed) tensors for an ordered query list.

    Content is v_pos / v_neg / 0 by kind; pos_embed projects the Fourier
    embedding of each position.
    """
    k = len(kinds)
    d = params.v_pos.data.shape[0]
    s_pos = np.array([[1.0 if kk == KIND_POSITIVE else 0.0] for kk in kinds], dtype=dtype)
    s_neg = np.array([[1.0 if kk == KIND_NEGATIVE else 0.0] for kk in kinds], dtype=dtype)
    content = ad.add(
        ad.matmul(ad.Tensor(s_pos), ad.reshape(params.v_pos, (1, d))),
        ad.matmul(ad.Tensor(s_neg), ad.reshape(params.v_neg, (1, d))),
    )
    fourier = fourier_embed(positions, params.fourier).astype(dtype)
    pos_embed = ad.linear(ad.Tensor(fourier), params.proj_w, params.proj_b)
    del k
    return content, pos_embed


def encode_click_query(click: Click, params: QueryParams, dtype=np.float64) -> Query:
    """Single click to Query (content = v_pos or v_neg exactly)."""
    positions = click.position[None, :]
    kind = KIND_POSITIVE if click.sign == 1 else KIND_NEGATIVE
    with ad.no_grad():
        content, pos_embed = query_tensors(positions, [kind], params, dtype)
    return Query(content=content.data[0], pos_embed=pos_embed.data[0],
                 position=click.position.copy(), kind=kind)


def sample_augmentation_queries(cloud: PointCloud, m: int, params: QueryParams,
                                start_index: int = 0, dtype=np.float64):
    """m zero-content queries at FPS-sampled scene points."""
    if m == 0:
        return []
    positions, kinds = query_positions([], cloud, m, start_index)
    with ad.no_grad():
        content, pos_embed = query_tensors(positions, kinds, params, dtype)
    return [
        Query(content=content.data[i], pos_embed=pos_embed.data[i],
              position=positions[i], kind=KIND_AUGMENTATION)
        for i in range(m)
    ]


def build_query_set(clicks, cloud: PointCloud, m: int, params: QueryParams,
                    start_index: int = 0, dtype=np.float64) -> QuerySet:
    """Ordered query set: clicks in input order, then FPS augmentation queries."""
    if not clicks:
        raise ProtocolError("at least one click is required")
    positions, kinds = query_positions(clicks, cloud, m, start_index)
    with ad.no_grad():
        content, pos_embed = query_tensors(positions, kinds, params, dtype)
    queries = [
        Query(content=content.data[i], pos_embed=pos_embed.data[i],
              position=positions[i], kind=kinds[i])
        for i in range(len(kinds))
    ]
    return QuerySet(queries=queries)
