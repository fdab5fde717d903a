"""SGC classifier head over precomputed propagated features.

The backbone is ``softmax(S^K X W + b)``: propagation is done once up front
(see :func:`delome.graph.sgc_features`), so everything here works on plain
dense row matrices. Gradients are written out analytically; there is no
autodiff dependency.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, FormatError, ShapeError

INIT_SCHEMES = ("he_normal",)


@dataclass
class LinearSgcModel:
    """Weights for ``f_theta``.

    ``weight`` is ``(F, C)`` for the plain linear head. With the optional
    hidden layer, ``hidden_weight`` is ``(F, H)`` and ``weight`` is ``(H, C)``.
    """

    weight: np.ndarray
    bias: np.ndarray
    prop_depth: int = 2
    hidden_weight: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[1] != self.bias.shape[0]:
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if (self.hidden_weight is None) != (self.hidden_bias is None):
            raise ValueError("hidden_weight and hidden_bias go together")
        if self.hidden_weight is not None:
            self.hidden_weight = np.asarray(self.hidden_weight, dtype=np.float64)
            self.hidden_bias = np.asarray(self.hidden_bias, dtype=np.float64).reshape(-1)
            if self.hidden_weight.shape[1] != self.weight.shape[0]:
                raise ShapeError("hidden layer width does not match output weight")
        for v in self.params().values():
            if not np.all(np.isfinite(v)):
                raise ValueError("model parameters must be finite")

    @property
    def class_count(self):
        return self.weight.shape[1]

    @property
    def feature_dim(self):
        if self.hidden_weight is not None:
            return self.hidden_weight.shape[0]
        return self.weight.shape[0]

    @property
    def hidden_dim(self):
        return None if self.hidden_weight is None else self.hidden_weight.shape[1]

    def params(self):
        p = {"weight": self.weight, "bias": self.bias}
        if self.hidden_weight is not None:
            p["hidden_weight"] = self.hidden_weight
            p["hidden_bias"] = self.hidden_bias
        return p

    def with_params(self, params):
        return LinearSgcModel(
            params["weight"], params["bias"], self.prop_depth,
            params.get("hidden_weight"), params.get("hidden_bias"))

    def copy(self):
        return self.with_params({k: v.copy() for k, v in self.params().items()})


class InitSampler:
    """Draws random model parameters (the initialization distribution).

    Weights are i.i.d. ``N(0, 2 / fan_in)``; biases start at zero. Successive
    draws advance one RNG stream, so a sampler seeded the same way replays the
    same sequence of models.
    """

    def __init__(self, seed=0, scheme="he_normal"):
        if scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
        self.seed = seed
        self.scheme = scheme
        self.rng = np.random.default_rng(seed)

    def matrix(self, fan_in, cols):
        return self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, cols))

    def model(self, feature_dim, class_count, prop_depth=2, hidden_dim=None):
        if hidden_dim:
            hw = self.matrix(feature_dim, hidden_dim)
            w = self.matrix(hidden_dim, class_count)
            return LinearSgcModel(w, np.zeros(class_count), prop_depth,
                                  hw, np.zeros(hidden_dim))
        return LinearSgcModel(self.matrix(feature_dim, class_count),
                              np.zeros(class_count), prop_depth)


def widen(model, class_count, sampler):
    """Append freshly initialized output columns up to ``class_count``."""
    extra = class_count - model.class_count
    if extra < 0:
        raise ValueError("class space can only grow")
    if extra == 0:
        return model
    fan_in = model.weight.shape[0]
    params = dict(model.params())
    params["weight"] = np.hstack([model.weight, sampler.matrix(fan_in, extra)])
    params["bias"] = np.concatenate([model.bias, np.zeros(extra)])
    return model.with_params(params)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.005
    epochs: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer kind must be 'adam' or 'sgd', got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")


class Optimizer:
    """Adam or plain gradient descent over a dict of arrays."""

    def __init__(self, kind, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.kind = kind
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    @classmethod
    def from_config(cls, opt):
        return cls(opt.kind, opt.learning_rate, opt.adam_beta1, opt.adam_beta2, opt.adam_eps)

    def step(self, params, grads):
        if self.kind == "sgd":
            return {k: params[k] - self.lr * grads[k] for k in params}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            out[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _check_features(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.feature_dim:
        raise ShapeError(
            f"features of shape {x.shape} do not match feature_dim {model.feature_dim}")
    return x


def _hidden(model, x):
    z1 = x @ model.hidden_weight + model.hidden_bias
    return z1, np.maximum(z1, 0.0)


def forward(model, propagated_features):
    x = _check_features(model, propagated_features)
    if model.hidden_weight is not None:
        _, x = _hidden(model, x)
    return x @ model.weight + model.bias


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels, class_count):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(
            f"label out of range: labels must lie in [0, {class_count})")
    return labels


def _adjust(logits, offsets):
    logits = np.asarray(logits, dtype=np.float64)
    if offsets is None:
        return logits
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1)
    if offsets.shape[0] != logits.shape[1]:
        raise ShapeError(
            f"{offsets.shape[0]} offsets for {logits.shape[1]} classes")
    if not np.all(np.isfinite(offsets)):
        raise ValueError("offsets must be finite")
    return logits + offsets


def adjusted_cross_entropy(logits, labels, offsets=None):
    """Mean cross-entropy of ``logits + offsets`` (offsets broadcast per class column)."""
    z = _adjust(logits, offsets)
    labels = _check_labels(labels, z.shape[1])
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows for {labels.shape[0]} labels")
    if z.shape[0] == 0:
        return 0.0
    return float(-log_softmax(z)[np.arange(len(labels)), labels].mean())


def cross_entropy(logits, labels):
    return adjusted_cross_entropy(logits, labels, None)


def _output_residual(logits, labels, offsets):
    """``(softmax(logits + offsets) - onehot) / n``: d(mean CE)/d(logits)."""
    z = _adjust(logits, offsets)
    labels = _check_labels(labels, z.shape[1])
    r = softmax(z)
    r[np.arange(len(labels)), labels] -= 1.0
    return r / len(labels)


def grad_theta(model, propagated_features, labels, offsets=None):
    """Analytic gradient of the (adjusted) mean cross-entropy w.r.t. every parameter block."""
    x = _check_features(model, propagated_features)
    if model.hidden_weight is None:
        g = _output_residual(x @ model.weight + model.bias, labels, offsets)
        return {"weight": x.T @ g, "bias": g.sum(axis=0)}
    z1, h = _hidden(model, x)
    g = _output_residual(h @ model.weight + model.bias, labels, offsets)
    dz1 = (g @ model.weight.T) * (z1 > 0)
    return {
        "weight": h.T @ g,
        "bias": g.sum(axis=0),
        "hidden_weight": x.T @ dz1,
        "hidden_bias": dz1.sum(axis=0),
    }


@dataclass
class LossTerm:
    """One summand of a training objective: ``scale * CE(f(features) + offsets, labels)``."""

    features: np.ndarray
    labels: np.ndarray
    offsets: np.ndarray | None = None
    scale: float = 1.0


def objective(model, terms):
    """Total loss and gradient of a sum of loss terms."""
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    for term in terms:
        if term.scale == 0 or len(term.labels) == 0:
            continue
        logits = forward(model, term.features)
        total += term.scale * adjusted_cross_entropy(logits, term.labels, term.offsets)
        for k, g in grad_theta(model, term.features, term.labels, term.offsets).items():
            grads[k] += term.scale * g
    return total, grads


def fit_terms(model, terms, opt, history=None):
    """Full-batch optimization of ``sum(terms)``; returns a new model."""
    optimizer = Optimizer.from_config(opt)
    params = {k: v.copy() for k, v in model.params().items()}
    current = model.with_params(params)
    for epoch in range(1, opt.epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = objective(current, terms)
        if not np.isfinite(loss):
            raise DivergenceError("non-finite training loss", epoch=epoch)
        if history is not None:
            history.append(loss)
        if opt.weight_decay:
            grads = {k: g + opt.weight_decay * params[k] for k, g in grads.items()}
        params = optimizer.step(params, grads)
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise DivergenceError("non-finite parameters", epoch=epoch)
        current = model.with_params(params)
    return current


def fit(model, propagated_features, labels, offsets=None, opt=None, history=None):
    opt = opt or OptimizerConfig()
    return fit_terms(model, [LossTerm(propagated_features, labels, offsets)], opt, history)


def predict(logits, class_mask=None):
    """Row-wise argmax, optionally restricted to ``class_mask``; ties go to the lowest id."""
    z = np.asarray(logits, dtype=np.float64)
    if class_mask is None:
        return np.argmax(z, axis=1)
    mask = sorted(set(int(c) for c in class_mask))
    if not mask:
        raise ValueError("class mask must be non-empty")
    if mask[0] < 0 or mask[-1] >= z.shape[1]:
        raise ValueError("class mask outside the model's class space")
    cols = np.asarray(mask)
    return cols[np.argmax(z[:, cols], axis=1)]


def save_model(model, path):
    os.makedirs(path, exist_ok=True)
    meta = {
        "prop_depth": model.prop_depth,
        "class_count": model.class_count,
        "feature_dim": model.feature_dim,
        "hidden_dim": model.hidden_dim,
    }
    with open(os.path.join(path, "model.json"), "w") as f:
        json.dump(meta, f, indent=2)
    blocks = [model.weight, model.bias]
    if model.hidden_weight is not None:
        blocks += [model.hidden_weight, model.hidden_bias]
    flat = np.concatenate([b.ravel() for b in blocks]).astype("<f8")
    flat.tofile(os.path.join(path, "weights.bin"))


def load_model(path):
    with open(os.path.join(path, "model.json")) as f:
        meta = json.load(f)
    f_dim, c, h = meta["feature_dim"], meta["class_count"], meta.get("hidden_dim")
    in_dim = h or f_dim
    sizes = [in_dim * c, c] + ([f_dim * h, h] if h else [])
    flat = np.fromfile(os.path.join(path, "weights.bin"), dtype="<f8")
    if flat.size != sum(sizes):
        raise FormatError(
            f"weights.bin holds {flat.size * 8} bytes, expected {sum(sizes) * 8}")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    if h:
        return LinearSgcModel(parts[0].reshape(in_dim, c), parts[1], meta["prop_depth"],
                              parts[2].reshape(f_dim, h), parts[3])
    return LinearSgcModel(parts[0].reshape(in_dim, c), parts[1], meta["prop_depth"])
