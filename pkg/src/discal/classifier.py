"""Classifier core: MLP with a linear-feature skip connection, from scratch.

Two architectures:

  binary                Pr(t=1 | phi) = sigmoid(MLP(x) + w.l)
  separable_multiclass  Pr(t=k | slots) = softmax_k(g(slot_k)),
                        g(slot) = MLP(x_slot) + w.l_slot with shared params

where x is the nonlinear feature block (standardized using training
statistics) and l the trailing linear features (log densities / ranks, not
standardized -- their scale is meaningful).  The separable form is exactly
permutation-equivariant over slots, which is what makes diagnostics on
autocorrelated draws valid without thinning.

Training is minibatch gradient descent with adaptive moments, weighted
cross-entropy loss, and early stopping on held-out batches.  Everything is
deterministic given the seed (fixed shuffle order, fixed reduction order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .label_mapping import Batch, MappingKind
from .sim_model import InvalidParameterError

PROB_CLAMP = 1e-12

ARCH_BINARY = "binary"
ARCH_MULTICLASS = "separable_multiclass"


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch):
        super().__init__("training loss became non-finite at epoch %d" % epoch)
        self.epoch = epoch


@dataclass(frozen=True)
class WeightScheme:
    """Per-example loss/LPD weights.

    'unweighted' gives weight 1 to every example.  'balanced_binary' uses
    (M+1)/2 for label 0 and (M+1)/(2M) for label 1, which rebalances the
    1:M class imbalance so the weighted LPD + log 2 estimates the
    conditional Jensen-Shannon divergence.
    """

    kind: str = "unweighted"
    M: int | None = None

    def __post_init__(self):
        if self.kind not in ("unweighted", "balanced_binary"):
            raise InvalidParameterError("unknown weight scheme %r" % self.kind)
        if self.kind == "balanced_binary" and (self.M is None or self.M < 1):
            raise InvalidParameterError("balanced_binary requires M >= 1")


UNWEIGHTED = WeightScheme()


def balanced_binary(M):
    return WeightScheme("balanced_binary", M)


def example_weights(labels, scheme):
    labels = np.asarray(labels)
    if scheme.kind == "unweighted":
        return np.ones(labels.shape[0])
    M = scheme.M
    w1 = (M + 1) / (2.0 * M)
    w0 = (M + 1) / 2.0
    return np.where(labels == 0, w0, w1)


@dataclass
class ModelConfig:
    architecture: str
    input_dim: int
    hidden_sizes: tuple = (64, 64)
    activation: str = "tanh"
    n_linear_features: int = 0
    class_count: int = 2

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.architecture not in (ARCH_BINARY, ARCH_MULTICLASS):
            raise InvalidParameterError("unknown architecture %r" % self.architecture)
        if any(h < 1 for h in self.hidden_sizes):
            raise InvalidParameterError("hidden sizes must all be >= 1")
        if self.class_count < 2:
            raise InvalidParameterError("class_count must be >= 2")
        if self.activation not in ("tanh", "relu"):
            raise InvalidParameterError("unknown activation %r" % self.activation)
        if self.input_dim < 0 or self.n_linear_features < 0:
            raise InvalidParameterError("negative dimensions")
        if self.input_dim + self.n_linear_features == 0:
            raise InvalidParameterError("model needs at least one input feature")


@dataclass
class TrainSettings:
    learning_rate: float = 1e-3
    epochs: int = 100
    minibatch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_scheme: WeightScheme = UNWEIGHTED
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.2
    standardize: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidParameterError("learning_rate must be > 0")
        if self.epochs < 1:
            raise InvalidParameterError("epochs must be >= 1")


class Model:
    """MLP weights + linear-feature weight vector + input standardizer."""

    SERIAL_VERSION = 1

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        dims = [config.input_dim] + list(config.hidden_sizes) + [1]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        nlin = config.n_linear_features
        bound = 1.0 / np.sqrt(max(nlin, 1))
        self.w_linear = rng.uniform(-bound, bound, size=nlin)
        self.x_mean = np.zeros(config.input_dim)
        self.x_scale = np.ones(config.input_dim)

    # ---- parameter plumbing -------------------------------------------------

    def param_arrays(self):
        return self.weights + self.biases + [self.w_linear]

    def get_params(self):
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        offset = 0
        for arr in self.param_arrays():
            n = arr.size
            arr[...] = flat[offset:offset + n].reshape(arr.shape)
            offset += n
        if offset != flat.size:
            raise InvalidParameterError("parameter vector has wrong length")

    def set_standardizer(self, mean, scale):
        self.x_mean = np.asarray(mean, dtype=float)
        self.x_scale = np.asarray(scale, dtype=float)

    # ---- forward ------------------------------------------------------------

    def _activation(self, z):
        return np.tanh(z) if self.config.activation == "tanh" else np.maximum(z, 0.0)

    def _mlp_forward(self, X, keep_cache=False):
        """Scalar MLP output for each row of X (already standardized)."""
        cache = [X]
        h = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = self._activation(h @ W + b)
            cache.append(h)
        out = (h @ self.weights[-1] + self.biases[-1]).ravel()
        return (out, cache) if keep_cache else out

    def score(self, x_nl, x_lin, keep_cache=False):
        X = (x_nl - self.x_mean) / self.x_scale
        if keep_cache:
            out, cache = self._mlp_forward(X, keep_cache=True)
            return out + x_lin @ self.w_linear, cache
        return self._mlp_forward(X) + x_lin @ self.w_linear

    def split_feature(self, phi):
        """Split a binary feature row/matrix into (nonlinear, linear) blocks."""
        phi = np.asarray(phi, dtype=float)
        d = self.config.input_dim
        total = d + self.config.n_linear_features
        if phi.shape[-1] != total:
            raise InvalidParameterError("feature length %d, expected %d"
                                        % (phi.shape[-1], total))
        return phi[..., :d], phi[..., d:]


def forward_binary(model, phi):
    """Pr(t=1 | phi) for one feature vector or a matrix of them."""
    phi = np.asarray(phi, dtype=float)
    single = phi.ndim == 1
    x_nl, x_lin = model.split_feature(np.atleast_2d(phi))
    p1 = expit(model.score(x_nl, x_lin))
    return float(p1[0]) if single else p1


def _softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def forward_multiclass(model, slots_nl, slots_lin=None):
    """Probability simplex over slots; accepts (K,d) or batched (n,K,d)."""
    slots_nl = np.asarray(slots_nl, dtype=float)
    single = slots_nl.ndim == 2
    if single:
        slots_nl = slots_nl[None, ...]
    n, K, d = slots_nl.shape
    if d != model.config.input_dim:
        raise InvalidParameterError("slot dim %d, expected %d"
                                    % (d, model.config.input_dim))
    if slots_lin is None:
        slots_lin = np.zeros((n, K, model.config.n_linear_features))
    else:
        slots_lin = np.asarray(slots_lin, dtype=float)
        if single and slots_lin.ndim == 2:
            slots_lin = slots_lin[None, ...]
    scores = model.score(slots_nl.reshape(n * K, d),
                         slots_lin.reshape(n * K, -1)).reshape(n, K)
    probs = _softmax(scores)
    return probs[0] if single else probs


# ---- dataset assembly -------------------------------------------------------

@dataclass
class ExampleArrays:
    multiclass: bool
    x_nl: np.ndarray      # (N, d) or (N, K, d)
    x_lin: np.ndarray     # (N, p) or (N, K, p)
    labels: np.ndarray
    batch_ids: np.ndarray
    n_classes: int


def arrays_from_batches(batches):
    if not batches:
        raise InvalidParameterError("empty batch list")
    if isinstance(batches, ExampleArrays):
        return batches
    kind = batches[0].kind
    mc = kind is MappingKind.MULTICLASS
    labels = np.concatenate([b.labels for b in batches])
    ids = np.concatenate([np.full(b.n_examples, b.batch_id) for b in batches])
    if mc:
        nl_parts, lin_parts = zip(*(b.slot_views() for b in batches))
        x_nl = np.concatenate(nl_parts, axis=0)
        x_lin = np.concatenate(lin_parts, axis=0)
    else:
        x_nl = np.concatenate([b.nonlinear() for b in batches], axis=0)
        x_lin = np.concatenate([b.linear() for b in batches], axis=0)
    return ExampleArrays(multiclass=mc, x_nl=x_nl, x_lin=x_lin,
                         labels=labels.astype(int), batch_ids=ids,
                         n_classes=batches[0].n_classes)


def config_for_batches(batches, hidden_sizes=(64, 64), activation="tanh"):
    """Build a ModelConfig matching the layout of mapped batches."""
    b = batches[0]
    arch = ARCH_MULTICLASS if b.kind is MappingKind.MULTICLASS else ARCH_BINARY
    return ModelConfig(architecture=arch, input_dim=b.d_nonlinear,
                       hidden_sizes=hidden_sizes, activation=activation,
                       n_linear_features=b.n_linear, class_count=b.n_classes)


# ---- loss and gradient ------------------------------------------------------

def _clamped_log(p):
    return np.log(np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def _true_label_log_probs(model, data):
    """Log predicted probability of each example's true label (clamped)."""
    if data.multiclass:
        probs = forward_multiclass(model, data.x_nl, data.x_lin)
        p_true = probs[np.arange(len(data.labels)), data.labels]
        return _clamped_log(p_true)
    p1 = expit(model.score(data.x_nl, data.x_lin))
    p_true = np.where(data.labels == 1, p1, 1.0 - p1)
    return _clamped_log(p_true)


def loss(model, batch_set, weight_scheme=UNWEIGHTED):
    """Mean weighted negative log predicted probability of the true label."""
    data = arrays_from_batches(batch_set)
    w = example_weights(data.labels, weight_scheme)
    return float(-np.mean(w * _true_label_log_probs(model, data)))


def gradient(model, batch_set, weight_scheme=UNWEIGHTED):
    """Exact gradient of loss() w.r.t. the flat parameter vector."""
    data = arrays_from_batches(batch_set)
    w = example_weights(data.labels, weight_scheme)
    n = len(data.labels)
    if data.multiclass:
        N, K, d = data.x_nl.shape
        x_nl = data.x_nl.reshape(N * K, d)
        x_lin = data.x_lin.reshape(N * K, -1)
        scores = model.score(x_nl, x_lin).reshape(N, K)
        probs = _softmax(scores)
        dscore = probs.copy()
        dscore[np.arange(N), data.labels] -= 1.0
        dscore *= (w / n)[:, None]
        dout = dscore.reshape(N * K)
    else:
        x_nl, x_lin = data.x_nl, data.x_lin
        p1 = expit(model.score(x_nl, x_lin))
        dout = w * (p1 - data.labels) / n
    return _backprop(model, x_nl, x_lin, dout)


def _backprop(model, x_nl, x_lin, dout):
    X = (x_nl - model.x_mean) / model.x_scale
    _, cache = model._mlp_forward(X, keep_cache=True)
    gw = [None] * len(model.weights)
    gb = [None] * len(model.biases)
    gw[-1] = cache[-1].T @ dout[:, None]
    gb[-1] = np.array([dout.sum()])
    da = np.outer(dout, model.weights[-1].ravel())
    for i in range(len(model.weights) - 2, -1, -1):
        a = cache[i + 1]
        if model.config.activation == "tanh":
            dz = da * (1.0 - a * a)
        else:
            dz = da * (a > 0)
        gw[i] = cache[i].T @ dz
        gb[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ model.weights[i].T
    g_lin = x_lin.T @ dout
    return np.concatenate([g.ravel() for g in gw] + [g.ravel() for g in gb]
                          + [g_lin.ravel()])


def predict_log_prob(model, example):
    """Log predicted probability of one mapped example's true label."""
    phi = np.asarray(example.feature, dtype=float)
    if model.config.architecture == ARCH_BINARY:
        p1 = forward_binary(model, phi)
        p_true = p1 if example.label == 1 else 1.0 - p1
        return float(_clamped_log(np.asarray(p_true)))
    K = model.config.class_count
    p = model.config.n_linear_features
    dslot = model.config.input_dim
    # layout: K*ds theta block, dy shared y block, K*p linear block
    ds = (phi.size - K * p - dslot) // (K - 1)
    dy = dslot - ds
    theta_block = phi[: K * ds].reshape(K, ds)
    y = phi[K * ds: K * ds + dy]
    lin = phi[K * ds + dy:].reshape(K, p)
    slots = np.hstack([theta_block, np.repeat(y[None, :], K, axis=0)])
    probs = forward_multiclass(model, slots, lin)
    return float(_clamped_log(np.asarray(probs[example.label])))


# ---- training ---------------------------------------------------------------

def _minibatch_view(data, idx):
    return ExampleArrays(multiclass=data.multiclass,
                         x_nl=data.x_nl[idx], x_lin=data.x_lin[idx],
                         labels=data.labels[idx], batch_ids=data.batch_ids[idx],
                         n_classes=data.n_classes)


def train(train_batches, config, settings):
    """Minibatch training with adaptive moments and early stopping.

    A fraction of the training *batches* (val_fraction, floor rule) is held
    out for early stopping; the returned model carries the parameters with
    the best held-out loss, or the final parameters when no hold-out exists.
    """
    if not train_batches:
        raise InvalidParameterError("empty training set")
    rng = np.random.default_rng(settings.seed)

    n_hold = int(len(train_batches) * settings.val_fraction)
    order = rng.permutation(len(train_batches))
    hold = [train_batches[i] for i in order[:n_hold]]
    fit = [train_batches[i] for i in order[n_hold:]]
    if not fit:
        fit, hold = hold, []
    fit_data = arrays_from_batches(fit)
    hold_data = arrays_from_batches(hold) if hold else None

    model = Model(config, seed=rng.integers(2**31))
    if settings.standardize and config.input_dim > 0:
        flat = fit_data.x_nl.reshape(-1, config.input_dim)
        mean = flat.mean(axis=0)
        scale = flat.std(axis=0)
        scale[scale == 0.0] = 1.0
        model.set_standardizer(mean, scale)

    params = model.get_params()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    step = 0
    best = (np.inf, params.copy())
    stale = 0
    n = len(fit_data.labels)
    bs = max(1, min(settings.minibatch_size, n))
    scheme = settings.weight_scheme
    for epoch in range(settings.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            g = gradient(model, _minibatch_view(fit_data, idx), scheme)
            step += 1
            m = settings.beta1 * m + (1 - settings.beta1) * g
            v = settings.beta2 * v + (1 - settings.beta2) * g * g
            mhat = m / (1 - settings.beta1 ** step)
            vhat = v / (1 - settings.beta2 ** step)
            params = params - settings.learning_rate * mhat / (np.sqrt(vhat) + settings.adam_eps)
            model.set_params(params)
        check = loss(model, hold_data if hold_data is not None else fit_data, scheme)
        if not np.isfinite(check):
            raise TrainingDivergedError(epoch)
        if hold_data is not None:
            if check < best[0] - 1e-12:
                best = (check, params.copy())
                stale = 0
            else:
                stale += 1
                if stale > settings.patience:
                    break
    if hold_data is not None and np.isfinite(best[0]):
        model.set_params(best[1])
    return model


# ---- serialization ----------------------------------------------------------

def model_to_json(model):
    payload = {
        "version": Model.SERIAL_VERSION,
        "config": {
            "architecture": model.config.architecture,
            "input_dim": model.config.input_dim,
            "hidden_sizes": list(model.config.hidden_sizes),
            "activation": model.config.activation,
            "n_linear_features": model.config.n_linear_features,
            "class_count": model.config.class_count,
        },
        "params": model.get_params().tolist(),
        "shapes": [list(a.shape) for a in model.param_arrays()],
        "x_mean": model.x_mean.tolist(),
        "x_scale": model.x_scale.tolist(),
    }
    return json.dumps(payload)


def model_from_json(text):
    payload = json.loads(text)
    if payload.get("version") != Model.SERIAL_VERSION:
        raise InvalidParameterError("unsupported model version %r" % payload.get("version"))
    cfg = ModelConfig(**{**payload["config"],
                         "hidden_sizes": tuple(payload["config"]["hidden_sizes"])})
    model = Model(cfg, seed=0)
    model.set_params(np.asarray(payload["params"]))
    model.set_standardizer(np.asarray(payload["x_mean"]), np.asarray(payload["x_scale"]))
    return model
