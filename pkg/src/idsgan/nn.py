"""Layer stacks, attention, the CNN-attention classifier and its training loop."""

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError

LAYER_KINDS = ("input", "conv1d", "global_avg_pool", "reshape", "flatten",
               "attention", "dense", "dropout", "activation")

# display names matching a Keras-style summary table
_DISPLAY = {
    "input": "Input Layer",
    "conv1d": "Conv1D",
    "global_avg_pool": "GlobalAveragePooling1D",
    "reshape": "Reshape",
    "flatten": "Flatten",
    "attention": "Attention",
    "dense": "Dense",
    "dropout": "Dropout",
    "activation": "Activation",
}


@dataclass
class LayerSpec:
    kind: str
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise UsageError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "config": _jsonable(self.config)}

    @classmethod
    def from_dict(cls, d):
        cfg = dict(d.get("config", {}))
        for key in ("shape", "target_shape"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        return cls(d["kind"], cfg)


def _jsonable(cfg):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


@dataclass
class Model:
    layers: list
    params: dict
    class_count: int = 1
    role: str = "classifier"

    @property
    def input_shape(self):
        return tuple(self.layers[0].config["shape"])

    def parameters(self):
        return self.params

    def output_shapes(self):
        return infer_shapes(self.layers)

    def copy(self):
        return copy.deepcopy(self)


# ---------------------------------------------------------------- attention


def attention(query, value, mode="scaled_dot", params=None):
    """Attend from ``query[.., T_q, d]`` over ``value[.., T_v, d]``.

    Returns ``(context, weights)`` where each weight row is a softmax over the
    T_v value positions and each context row is the weighted sum of value rows.

    ``scaled_dot`` scores are ``scale * q . h``; ``params["scale"]`` is the one
    learned scalar.  ``additive`` scores come from a one-hidden-layer alignment
    network ``w . tanh(q W_q + h W_k)`` with params ``query_kernel``,
    ``key_kernel`` and ``score_vector``.
    """
    query, value = T.as_tensor(query), T.as_tensor(value)
    if query.shape[-1] != value.shape[-1]:
        raise ShapeError(f"attention: query width {query.shape[-1]} != value width {value.shape[-1]}")
    params = params or {}
    if mode == "scaled_dot":
        scale = params.get("scale", T.Tensor(1.0))
        scores = T.matmul(query, T.swapaxes(value, -1, -2)) * scale
    elif mode == "additive":
        qp = T.matmul(query, params["query_kernel"])
        kp = T.matmul(value, params["key_kernel"])
        units = qp.shape[-1]
        qp = T.reshape(qp, qp.shape[:-1] + (1, units))
        kp = T.reshape(kp, kp.shape[:-2] + (1,) + kp.shape[-2:])
        hidden = T.tanh(qp + kp)  # [.., T_q, T_v, units]
        w = T.reshape(params["score_vector"], (units, 1))
        scores = T.matmul(hidden, w)
        scores = T.reshape(scores, scores.shape[:-1])
    else:
        raise UsageError(f"unknown attention mode {mode!r}")
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, value), weights


# ---------------------------------------------------------------- shapes + params


def infer_shapes(layers):
    """Per-layer output shapes with the batch axis elided."""
    if not layers or layers[0].kind != "input":
        raise UsageError("a model must start with an input layer")
    shapes = []
    shape = tuple(layers[0].config["shape"])
    for spec in layers:
        c = spec.config
        if spec.kind == "conv1d":
            if len(shape) != 2:
                raise ShapeError(f"conv1d needs (L, C) input, got {shape}")
            shape = (T.conv_output_length(shape[0], c.get("stride", 1)), c["filters"])
        elif spec.kind == "global_avg_pool":
            shape = shape[1:]
        elif spec.kind == "reshape":
            target = tuple(c["target_shape"])
            if int(np.prod(target)) != int(np.prod(shape)):
                raise ShapeError(f"cannot reshape {shape} to {target}")
            shape = target
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            shape = shape[:-1] + (c["units"],)
        shapes.append(shape)
    return shapes


def _layer_param_shapes(spec, in_shape):
    c = spec.config
    if spec.kind == "conv1d":
        return {"kernel": (c["filters"], in_shape[-1], c["kernel_size"]), "bias": (c["filters"],)}
    if spec.kind == "dense":
        return {"kernel": (in_shape[-1], c["units"]), "bias": (c["units"],)}
    if spec.kind == "attention":
        if c.get("mode", "scaled_dot") == "scaled_dot":
            return {"scale": ()}
        d, units = in_shape[-1], c.get("units") or in_shape[-1]
        return {"query_kernel": (d, units), "key_kernel": (d, units), "score_vector": (units,)}
    return {}


def _init_param(rng, kind, name, shape):
    if name == "bias":
        return np.zeros(shape)
    if name == "scale":
        return np.ones(shape)
    if kind == "conv1d":
        c_out, c_in, k = shape
        return T.glorot_uniform(rng, shape, c_in * k, c_out * k)
    if name == "score_vector":
        return T.glorot_uniform(rng, shape, shape[0], 1)
    return T.glorot_uniform(rng, shape, shape[0], shape[1])


def build_model(layers, seed=0, class_count=1, role="classifier"):
    """Instantiate parameters for ``layers`` with seeded Glorot-uniform kernels."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(layers)
    params = {}
    in_shape = shapes[0]
    for i, spec in enumerate(layers):
        for name, shape in _layer_param_shapes(spec, in_shape).items():
            params[(i, name)] = T.Tensor(_init_param(rng, spec.kind, name, shape), requires_grad=True)
        in_shape = shapes[i]
    return Model(list(layers), params, class_count=class_count, role=role)


def count_params(model):
    """Return ``(total, per_layer)`` parameter counts."""
    per_layer = [0] * len(model.layers)
    for (i, _), p in model.params.items():
        per_layer[i] += p.size
    return sum(per_layer), per_layer


def summary(model):
    """Rows of ``(layer name, output shape incl. batch, param count)``."""
    _, per_layer = count_params(model)
    return [(_DISPLAY[s.kind], (None,) + tuple(shape), n)
            for s, shape, n in zip(model.layers, model.output_shapes(), per_layer)]


def build_cnn_attention(input_len, class_count, head=None, attention_mode="scaled_dot",
                        attention_placement="after_pool", seed=0):
    """The CNN-with-attention classifier.

    Input(L,1) -> Conv1D(32) -> Conv1D(64) -> GlobalAvgPool -> Reshape(1,64)
    -> Attention -> Dense(128, relu) -> Dropout(0.5) -> Dense(class_count).
    The head is sigmoid for one output unit and softmax otherwise unless
    ``head`` says so.  ``attention_placement="before_pool"`` attends over the
    L conv positions instead of the single pooled vector.
    """
    if input_len < 3:
        raise UsageError("input_len must be at least 3")
    if class_count < 1:
        raise UsageError("class_count must be positive")
    head = head or ("sigmoid" if class_count == 1 else "softmax")
    att = LayerSpec("attention", {"mode": attention_mode})
    layers = [
        LayerSpec("input", {"shape": (input_len, 1)}),
        LayerSpec("conv1d", {"filters": 32, "kernel_size": 3, "stride": 1, "activation": "relu"}),
        LayerSpec("conv1d", {"filters": 64, "kernel_size": 3, "stride": 1, "activation": "relu"}),
    ]
    if attention_placement == "after_pool":
        layers += [LayerSpec("global_avg_pool"), LayerSpec("reshape", {"target_shape": (1, 64)}), att]
    elif attention_placement == "before_pool":
        layers += [att, LayerSpec("global_avg_pool"), LayerSpec("reshape", {"target_shape": (1, 64)})]
    else:
        raise UsageError(f"unknown attention placement {attention_placement!r}")
    layers += [
        LayerSpec("dense", {"units": 128, "activation": "relu"}),
        LayerSpec("dropout", {"rate": 0.5}),
        LayerSpec("dense", {"units": class_count, "activation": head}),
    ]
    return build_model(layers, seed=seed, class_count=class_count, role="classifier")


# ---------------------------------------------------------------- forward


def _act(x, cfg):
    kind = cfg.get("activation")
    alpha = cfg.get("alpha") if kind == "leaky_relu" else None
    return T.activation(kind, x, alpha)


def forward(model, batch, training=False, seed=None):
    """Run ``batch`` through ``model``; dropout masks come from ``seed``.

    Classifier outputs have their singleton sequence axis squeezed to
    ``[B, class_count]``.
    """
    x = T.as_tensor(batch)
    expected = model.input_shape
    if tuple(x.shape[1:]) != expected:
        raise ShapeError(f"expected input of shape (B, {', '.join(map(str, expected))}), got {x.shape}")
    rng = np.random.default_rng(seed)
    b = x.shape[0]
    for i, spec in enumerate(model.layers):
        c = spec.config
        p = lambda name: model.params[(i, name)]  # noqa: E731
        if spec.kind == "conv1d":
            x = _act(T.conv1d(x, p("kernel"), p("bias"), stride=c.get("stride", 1)), c)
        elif spec.kind == "dense":
            x = _act(T.dense(x, p("kernel"), p("bias")), c)
        elif spec.kind == "global_avg_pool":
            x = T.global_avg_pool1d(x)
        elif spec.kind == "reshape":
            x = T.reshape(x, (b,) + tuple(c["target_shape"]))
        elif spec.kind == "flatten":
            x = T.reshape(x, (b, -1))
        elif spec.kind == "attention":
            mode = c.get("mode", "scaled_dot")
            att_params = {name: model.params[(i, name)] for (j, name) in model.params if j == i}
            x, _ = attention(x, x, mode, att_params)
        elif spec.kind == "dropout":
            x = T.dropout(x, c["rate"], training, rng)
        elif spec.kind == "activation":
            x = _act(x, c)
    if model.role == "classifier" and x.ndim == 3 and x.shape[1] == 1:
        x = T.reshape(x, (b, x.shape[2]))
    return x


def _as_batch(X):
    X = np.asarray(X, dtype=np.float64)
    return X[..., None] if X.ndim == 2 else X


def predict_proba(model, X, batch_size=2048):
    X = _as_batch(X)
    out = []
    with T.no_grad():
        for start in range(0, len(X), batch_size):
            out.append(forward(model, X[start:start + batch_size]).data)
    if not out:
        return np.zeros((0, model.class_count))
    return np.concatenate(out)


def decide(probs):
    """Class labels from probabilities: ``p >= 0.5`` for one unit, else argmax (lowest index wins ties)."""
    probs = np.asarray(probs)
    if probs.ndim == 1 or probs.shape[1] == 1:
        return (probs.reshape(-1) >= 0.5).astype(np.int64)
    return np.argmax(probs, axis=1).astype(np.int64)


def predict_classes(model, X, batch_size=2048):
    return decide(predict_proba(model, X, batch_size))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: str = None  # derived from the head when None

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float = None
    val_accuracy: float = None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_list(self):
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows):
        return cls([EpochRecord(**r) for r in rows])


def _head(model):
    return model.layers[-1].config.get("activation")


def loss_kind(model, config=None):
    if config is not None and config.loss:
        return config.loss
    return "categorical_ce" if _head(model) == "softmax" else "binary_ce"


def _targets(model, kind, y):
    if kind == "binary_ce" and model.class_count > 1:
        onehot = np.zeros((len(y), model.class_count))
        onehot[np.arange(len(y)), y] = 1.0
        return onehot
    if kind == "binary_ce":
        return y.astype(np.float64).reshape(-1, 1)
    return y


def evaluate_loss(model, X, y, config=None, batch_size=2048):
    """Inference-mode ``(mean loss, accuracy)`` over a labelled set."""
    X, y = _as_batch(X), np.asarray(y, dtype=np.int64)
    kind = loss_kind(model, config)
    total, correct = 0.0, 0
    with T.no_grad():
        for start in range(0, len(X), batch_size):
            xb, yb = X[start:start + batch_size], y[start:start + batch_size]
            probs = forward(model, xb)
            total += T.loss(kind, probs, _targets(model, kind, yb)).item() * len(xb)
            correct += int(np.sum(decide(probs.data) == yb))
    return total / len(X), correct / len(X)


def train_classifier(model, train, val=None, config=None, log=None):
    """Mini-batch Adam training of ``model`` in place.

    ``train`` and ``val`` are anything with ``X`` ([N, L] or [N, L, 1]) and
    integer ``y``.  Batches follow a seeded shuffle each epoch and the final
    short batch is kept.  Reported train loss/accuracy are sample-weighted
    means over the epoch's batches.
    """
    config = config or TrainConfig()
    X, y = _as_batch(train.X), np.asarray(train.y, dtype=np.int64)
    if len(X) == 0:
        raise UsageError("training set is empty")
    if val is not None and len(val.y) == 0:
        raise UsageError("validation set is empty")
    if X.shape[1:] != model.input_shape:
        raise ShapeError(f"feature shape {X.shape[1:]} does not match model input {model.input_shape}")

    kind = loss_kind(model, config)
    opt = T.Adam(model.params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    n = len(X)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = X[idx], y[idx]
            probs = forward(model, xb, training=True, seed=int(rng.integers(2**63)))
            loss = T.loss(kind, probs, _targets(model, kind, yb))
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(decide(probs.data) == yb))
        rec = EpochRecord(epoch + 1, loss_sum / n, correct / n)
        if val is not None:
            rec.val_loss, rec.val_accuracy = evaluate_loss(model, val.X, val.y, config)
        history.records.append(rec)
        if log is not None:
            log(rec)
    return history
