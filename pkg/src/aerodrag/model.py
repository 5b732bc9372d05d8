"""RegDGCNN drag regressor built on the autodiff operator set.

Pipeline for a (batch, n, 3) input::

    EdgeConv x L  (kNN rebuilt in each layer's input feature space)
    -> concat of all EdgeConv outputs (or the last one only)
    -> per-point linear to the embedding width (+BN, LeakyReLU)
    -> global max pool
    -> FC stack (LeakyReLU; dropout after the first two) -> linear to 1
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .knn import KTooLarge, NeighborGraph, batched_knn, knn_graph

DTYPES = {"float32": np.float32, "float64": np.float64}


class TooFewPoints(ValueError):
    pass


class GraphSizeMismatch(ValueError):
    pass


@dataclass
class RegDGCNNConfig:
    k: int = 40
    edgeconv_channels: list[int] = field(default_factory=lambda: [256, 512, 512, 1024])
    embedding_dim: int = 512
    fc_channels: list[int] = field(default_factory=lambda: [128, 64, 32, 16])
    dropout_p: float = 0.5
    leaky_slope: float = 0.2
    use_batch_norm: bool = True
    include_self: bool = False
    input_points: int = 5000
    aggregate: str = "concat"  # "concat" all EdgeConv outputs, or "last" only
    dropout_layers: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not self.edgeconv_channels or not self.fc_channels:
            raise ValueError("channel lists must be non-empty")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.aggregate not in ("concat", "last"):
            raise ValueError("aggregate must be 'concat' or 'last'")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        self.edgeconv_channels = [int(c) for c in self.edgeconv_channels]
        self.fc_channels = [int(c) for c in self.fc_channels]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegDGCNNConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def parameter_shapes(config: RegDGCNNConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable parameter, in creation order."""
    shapes: dict[str, tuple[int, ...]] = {}
    bn = config.use_batch_norm
    c_in = 3
    for i, c in enumerate(config.edgeconv_channels):
        shapes[f"edgeconv.{i}.weight"] = (2 * c_in, c)
        shapes[f"edgeconv.{i}.bias"] = (c,)
        if bn:
            shapes[f"edgeconv.{i}.bn.gamma"] = (c,)
            shapes[f"edgeconv.{i}.bn.beta"] = (c,)
        c_in = c
    pooled = sum(config.edgeconv_channels) if config.aggregate == "concat" else c_in
    shapes["embed.weight"] = (pooled, config.embedding_dim)
    shapes["embed.bias"] = (config.embedding_dim,)
    if bn:
        shapes["embed.bn.gamma"] = (config.embedding_dim,)
        shapes["embed.bn.beta"] = (config.embedding_dim,)
    c_in = config.embedding_dim
    for i, c in enumerate(config.fc_channels):
        shapes[f"fc.{i}.weight"] = (c_in, c)
        shapes[f"fc.{i}.bias"] = (c,)
        c_in = c
    shapes["head.weight"] = (c_in, 1)
    shapes["head.bias"] = (1,)
    return shapes


def expected_parameter_count(config: RegDGCNNConfig) -> int:
    """Closed-form parameter count, written independently of ``parameter_shapes``."""
    bn = 2 if config.use_batch_norm else 0
    total, c_in = 0, 3
    for c in config.edgeconv_channels:
        total += 2 * c_in * c + c + bn * c
        c_in = c
    pooled = sum(config.edgeconv_channels) if config.aggregate == "concat" else c_in
    e = config.embedding_dim
    total += pooled * e + e + bn * e
    c_in = e
    for c in config.fc_channels + [1]:
        total += c_in * c + c
        c_in = c
    return total


class RegDGCNNModel:
    def __init__(self, config: RegDGCNNConfig, parameters: dict[str, Parameter],
                 buffers: dict[str, np.ndarray] | None = None):
        self.config = config
        self.parameters = parameters
        self.buffers = buffers if buffers is not None else _fresh_buffers(config)
        self.training = False

    def train(self) -> "RegDGCNNModel":
        self.training = True
        return self

    def eval(self) -> "RegDGCNNModel":
        self.training = False
        return self

    @property
    def mode(self) -> str:
        return "training" if self.training else "inference"

    @property
    def dtype(self):
        return DTYPES[self.config.dtype]

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None

    def __call__(self, points, rng: np.random.Generator | None = None) -> Tensor:
        return forward(self, points, rng)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.parameters.items()}
        out.update({f"buffer.{name}": b for name, b in self.buffers.items()})
        return out


def _fresh_buffers(config: RegDGCNNConfig) -> dict[str, np.ndarray]:
    if not config.use_batch_norm:
        return {}
    dt = DTYPES[config.dtype]
    buffers = {}
    widths = [(f"edgeconv.{i}", c) for i, c in enumerate(config.edgeconv_channels)]
    widths.append(("embed", config.embedding_dim))
    for prefix, c in widths:
        buffers[f"{prefix}.bn.running_mean"] = np.zeros(c, dtype=dt)
        buffers[f"{prefix}.bn.running_var"] = np.ones(c, dtype=dt)
    return buffers


def init_parameters(config: RegDGCNNConfig, seed: int = 0) -> RegDGCNNModel:
    """Glorot-uniform weights, zero biases, unit BN scale; deterministic per seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dt = DTYPES[config.dtype]
    params: dict[str, Parameter] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Parameter(value.astype(dt), name)
    return RegDGCNNModel(config, params)


def count_parameters(model: RegDGCNNModel) -> int:
    return int(sum(p.data.size for p in model.parameters.values()))


def edge_features(X, graph: NeighborGraph) -> Tensor:
    """(n, c) features + graph -> (n, k, 2c) edge tensor [x_i, x_j - x_i]."""
    X = ad.as_tensor(X)
    if graph.n != X.shape[-2]:
        raise GraphSizeMismatch(f"graph has {graph.n} rows, features have {X.shape[-2]}")
    return ad.edge_features(X, graph.indices)


def _norm_act(model: RegDGCNNModel, H: Tensor, prefix: str) -> Tensor:
    cfg = model.config
    if cfg.use_batch_norm:
        p = model.parameters
        H = ad.batch_norm(
            H, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"],
            model.buffers[f"{prefix}.bn.running_mean"],
            model.buffers[f"{prefix}.bn.running_var"],
            training=model.training,
        )
    return ad.leaky_relu(H, cfg.leaky_slope)


def edgeconv_layer(model: RegDGCNNModel, X, layer: int) -> Tensor:
    """One EdgeConv block on (batch, n, c) features -> (batch, n, c_out).

    The kNN graph is rebuilt from the current features, so deeper layers
    group points by learned similarity rather than spatial proximity.
    """
    X = ad.as_tensor(X)
    cfg = model.config
    n = X.shape[-2]
    limit = n if cfg.include_self else n - 1
    if cfg.k > limit:
        raise KTooLarge(f"k={cfg.k} needs more than {n} points")
    idx = batched_knn(X.data, cfg.k, cfg.include_self)
    p = model.parameters
    H = ad.edge_linear(X, idx, p[f"edgeconv.{layer}.weight"], p[f"edgeconv.{layer}.bias"])
    H = _norm_act(model, H, f"edgeconv.{layer}")
    return ad.neighborhood_max_pool(H)


def forward(model: RegDGCNNModel, points, rng: np.random.Generator | None = None) -> Tensor:
    """Predict normalized C_d for (n, 3) or (batch, n, 3) points.

    Returns a tensor of shape (batch,). ``rng`` drives dropout and is only
    needed in training mode with ``dropout_p > 0``.
    """
    cfg = model.config
    x = np.asarray(points.data if isinstance(points, Tensor) else points)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected (batch, n, 3) points, got {x.shape}")
    if x.shape[1] <= cfg.k:
        raise TooFewPoints(f"{x.shape[1]} points cannot support k={cfg.k}")
    if model.training and cfg.dropout_p > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    p = model.parameters

    h = Tensor(x.astype(model.dtype, copy=False))
    outputs = []
    for i in range(len(cfg.edgeconv_channels)):
        h = edgeconv_layer(model, h, i)
        outputs.append(h)
    feats = ad.concat_channels(outputs) if cfg.aggregate == "concat" else outputs[-1]

    e = ad.pointwise_linear(feats, p["embed.weight"], p["embed.bias"])
    e = _norm_act(model, e, "embed")
    g = ad.global_max_pool(e)

    for i in range(len(cfg.fc_channels)):
        g = ad.pointwise_linear(g, p[f"fc.{i}.weight"], p[f"fc.{i}.bias"])
        g = ad.leaky_relu(g, cfg.leaky_slope)
        if i < cfg.dropout_layers:
            g = ad.dropout(g, cfg.dropout_p, rng, model.training)
    out = ad.pointwise_linear(g, p["head.weight"], p["head.bias"])
    return ad.reshape(out, (out.shape[0],))


def predict(model: RegDGCNNModel, points) -> np.ndarray:
    """Inference-mode forward without recording; returns a float64 array."""
    was = model.training
    model.eval()
    try:
        return np.asarray(forward(model, points).data, dtype=np.float64)
    finally:
        model.training = was


def edgeconv_reference(X: np.ndarray, graph: NeighborGraph, W: np.ndarray, b: np.ndarray,
                       slope: float) -> np.ndarray:
    """Unfused single-cloud EdgeConv without normalization, for cross-checks."""
    H = ad.pointwise_linear(ad.edge_features(Tensor(X), graph.indices), Tensor(W), Tensor(b))
    return ad.neighborhood_max_pool(ad.leaky_relu(H, slope)).data


__all__ = [
    "RegDGCNNConfig", "RegDGCNNModel", "init_parameters", "count_parameters",
    "expected_parameter_count", "parameter_shapes", "edge_features", "edgeconv_layer",
    "forward", "predict", "knn_graph", "TooFewPoints", "GraphSizeMismatch",
]
