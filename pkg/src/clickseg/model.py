"""Model configuration, parameter initialization, and the SegModel wrapper."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from .encoder import EncoderParams
from .errors import ConfigError
from .geom import FourierEmbeddingConfig
from .queries import QueryParams


@dataclass
class ModelConfig:
    d_model: int = 128
    num_layers: int = 3
    num_heads: int = 8
    num_aug_queries: int = 128
    n_channels: int = 3  # extra per-point channels (rgb by default)
    voxel_size: float = 0.5
    fourier_bands: int = 16
    fourier_max_freq: float = 10.0
    encoder_rounds: int = 2
    encoder_knn: int = 8
    query_mlp_hidden: int = 256
    extractor_hidden: int = 128
    predictor_hidden: int = 64
    attention: str = "global"  # "global" | "local"
    local_radius_voxels: float = 8.0
    score_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ConfigError(
                f"d_model {self.d_model} must be divisible by num_heads {self.num_heads}"
            )
        if self.attention not in ("global", "local"):
            raise ConfigError(f"unknown attention mode {self.attention!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def fourier(self) -> FourierEmbeddingConfig:
        return FourierEmbeddingConfig(self.fourier_bands, self.fourier_max_freq)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def pooled_dim(self) -> int:
        return self.n_channels + 3 + 1

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def _glorot(rng, fan_in, fan_out, scale=1.0):
    lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Seeded parameter arrays, keyed by dotted names."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    f = config.fourier.out_dim
    p = {}

    p["enc.pool.w0"] = _glorot(rng, config.pooled_dim, d)
    p["enc.pool.b0"] = np.zeros(d)
    p["enc.pool.w1"] = _glorot(rng, d, d)
    p["enc.pool.b1"] = np.zeros(d)
    for r in range(config.encoder_rounds):
        p[f"enc.agg{r}.w"] = _glorot(rng, d, d)
        p[f"enc.agg{r}.b"] = np.zeros(d)

    p["q.v_pos"] = rng.normal(size=d)
    p["q.v_neg"] = rng.normal(size=d)
    p["q.proj.w"] = _glorot(rng, f, d)
    p["q.proj.b"] = np.zeros(d)

    for layer in range(config.num_layers):
        for name in ("q2q", "q2v", "v2q"):
            base = f"dec{layer}.{name}"
            for proj in ("wq", "wk", "wv", "wo"):
                p[f"{base}.{proj}"] = _glorot(rng, d, d)
            for b in ("bq", "bk", "bv", "bo"):
                p[f"{base}.{b}"] = np.zeros(d)
        ln_names = ["q2q.ln", "q2v.lnq", "q2v.lnkv", "mlp.ln", "v2q.lnq", "v2q.lnkv"]
        for ln in ln_names:
            p[f"dec{layer}.{ln}.g"] = np.ones(d)
            p[f"dec{layer}.{ln}.b"] = np.zeros(d)
        hm = config.query_mlp_hidden
        p[f"dec{layer}.mlp.w0"] = _glorot(rng, d, hm)
        p[f"dec{layer}.mlp.b0"] = np.zeros(hm)
        p[f"dec{layer}.mlp.w1"] = _glorot(rng, hm, d)
        p[f"dec{layer}.mlp.b1"] = np.zeros(d)

    he = config.extractor_hidden
    p["ext.w0"] = _glorot(rng, d + f, he)
    p["ext.b0"] = np.zeros(he)
    p["ext.w1"] = _glorot(rng, he, d, scale=0.5)
    p["ext.b1"] = np.zeros(d)

    hp = config.predictor_hidden
    p["pred.w0"] = _glorot(rng, d, hp)
    p["pred.b0"] = np.zeros(hp)
    p["pred.w1"] = _glorot(rng, hp, 1)
    # negative start keeps the query-probability sum below the score clamp
    p["pred.b1"] = np.full(1, -5.0)

    npdt = config.np_dtype
    return {k: v.astype(npdt) for k, v in p.items()}


class SegModel:
    """Parameter container with typed views for each pipeline stage."""

    def __init__(self, config: ModelConfig, arrays: dict):
        self.config = config
        npdt = config.np_dtype
        self.params = {k: ad.Tensor(np.asarray(v, dtype=npdt), requires_grad=True)
                       for k, v in arrays.items()}
        expected = set(init_params(config, 0))
        if set(self.params) != expected:
            missing = expected - set(self.params)
            extra = set(self.params) - expected
            raise ConfigError(f"parameter names mismatch: missing={missing}, extra={extra}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "SegModel":
        return cls(config, init_params(config, seed))

    # -- flat access ---------------------------------------------------

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def named_groups(self) -> dict:
        """Parameter names bucketed by functional group (for gradient checks)."""
        groups = {"encoder": [], "click_vectors": [], "pos_projection": [],
                  "attention": [], "query_mlp": [], "extractor": [], "predictor": []}
        for name in self.params:
            if name.startswith("enc."):
                groups["encoder"].append(name)
            elif name in ("q.v_pos", "q.v_neg"):
                groups["click_vectors"].append(name)
            elif name.startswith("q.proj"):
                groups["pos_projection"].append(name)
            elif ".mlp." in name:
                groups["query_mlp"].append(name)
            elif name.startswith("dec"):
                groups["attention"].append(name)
            elif name.startswith("ext."):
                groups["extractor"].append(name)
            else:
                groups["predictor"].append(name)
        return groups

    # -- typed views ----------------------------------------------------

    def encoder_params(self) -> EncoderParams:
        p = self.params
        return EncoderParams(
            pool_w0=p["enc.pool.w0"], pool_b0=p["enc.pool.b0"],
            pool_w1=p["enc.pool.w1"], pool_b1=p["enc.pool.b1"],
            agg_w=[p[f"enc.agg{r}.w"] for r in range(self.config.encoder_rounds)],
            agg_b=[p[f"enc.agg{r}.b"] for r in range(self.config.encoder_rounds)],
            knn_k=self.config.encoder_knn,
            rounds=self.config.encoder_rounds,
        )

    def query_params(self) -> QueryParams:
        p = self.params
        return QueryParams(v_pos=p["q.v_pos"], v_neg=p["q.v_neg"],
                           proj_w=p["q.proj.w"], proj_b=p["q.proj.b"],
                           fourier=self.config.fourier)

    def _attn(self, layer: int, name: str) -> dec.AttentionParams:
        p = self.params
        base = f"dec{layer}.{name}"
        return dec.AttentionParams(
            wq=p[f"{base}.wq"], wk=p[f"{base}.wk"], wv=p[f"{base}.wv"], wo=p[f"{base}.wo"],
            bq=p[f"{base}.bq"], bk=p[f"{base}.bk"], bv=p[f"{base}.bv"], bo=p[f"{base}.bo"],
            num_heads=self.config.num_heads,
        )

    def layer_params(self, layer: int) -> dec.LayerParams:
        p = self.params

        def ln(tag):
            return (p[f"dec{layer}.{tag}.g"], p[f"dec{layer}.{tag}.b"])

        return dec.LayerParams(
            q2q=self._attn(layer, "q2q"), q2q_ln=ln("q2q.ln"),
            q2v=self._attn(layer, "q2v"), q2v_ln_q=ln("q2v.lnq"), q2v_ln_kv=ln("q2v.lnkv"),
            mlp_w0=p[f"dec{layer}.mlp.w0"], mlp_b0=p[f"dec{layer}.mlp.b0"],
            mlp_w1=p[f"dec{layer}.mlp.w1"], mlp_b1=p[f"dec{layer}.mlp.b1"],
            mlp_ln=ln("mlp.ln"),
            v2q=self._attn(layer, "v2q"), v2q_ln_q=ln("v2q.lnq"), v2q_ln_kv=ln("v2q.lnkv"),
        )

    def mask_head_params(self) -> dec.MaskHeadParams:
        p = self.params
        return dec.MaskHeadParams(
            ext_w0=p["ext.w0"], ext_b0=p["ext.b0"], ext_w1=p["ext.w1"], ext_b1=p["ext.b1"],
            pred_w0=p["pred.w0"], pred_b0=p["pred.b0"],
            pred_w1=p["pred.w1"], pred_b1=p["pred.b1"],
        )

    def decoder_params(self) -> dec.DecoderParams:
        return dec.DecoderParams(
            num_layers=self.config.num_layers,
            num_heads=self.config.num_heads,
            layers=[self.layer_params(i) for i in range(self.config.num_layers)],
            head=self.mask_head_params(),
        )

    # -- inference convenience -------------------------------------------

    def segment(self, cloud, clicks, cache=None, with_layers=False, aug_start=0):
        return dec.segment(self, cloud, clicks, cache=cache,
                           with_layers=with_layers, aug_start=aug_start)

    def prepare_scene(self, cloud):
        return dec.prepare_scene(self, cloud)


def save_model(model: SegModel, path: str):
    from .data import save_checkpoint

    save_checkpoint(path, model.arrays(), model.config.to_json())


def load_model(path: str) -> SegModel:
    from .data import load_checkpoint

    arrays, cfg_json = load_checkpoint(path)
    return SegModel(ModelConfig.from_json(cfg_json), arrays)
