"""Feed-forward networks with hand-written reverse-mode gradients.

Hidden blocks are dense -> batch-norm -> activation -> dropout. The output
head is either a single linear unit (regression, MSE loss) or an MDN head of
three parallel dense sub-layers producing mixture logits, means and
softplus standard deviations (negative log-likelihood loss).

Parameters live in plain numpy arrays on small dataclasses; ``params(net)``
exposes them by name so the optimiser and the gradient code agree on keys.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from . import _kernels as K
from .mixture import LOG_2PI, GaussianMixture

log = logging.getLogger(__name__)

ACTIVATIONS = ("elu", "softplus", "softmax", "linear")
SIGMA_FLOOR = 1e-6
BN_EPS = 1e-3
BN_MOMENTUM = 0.99


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# -- activations ------------------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x))


def activation(kind: str, x):
    x = np.asarray(x)
    if kind == "elu":
        out = np.expm1(np.minimum(x, 0.0))
        out += np.maximum(x, 0.0)
        return out
    if kind == "softplus":
        return softplus(x)
    if kind == "softmax":
        return softmax(x, axis=-1)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def _activation_backward(kind, u, a, da):
    if kind == "elu":
        # d/du elu = 1 for u > 0, exp(u) = a + 1 otherwise
        return da * (np.minimum(a, 0.0) + 1.0)
    if kind == "softplus":
        return da * expit(u)
    if kind == "linear":
        return da
    if kind == "softmax":
        return a * (da - np.sum(da * a, axis=-1, keepdims=True))
    raise ValueError(f"unknown activation {kind!r}")


# -- architecture -----------------------------------------------------------


@dataclass
class HiddenLayer:
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    activation: str = "elu"
    dropout: float = 0.0

    @property
    def n_out(self) -> int:
        return self.W.shape[1]


@dataclass
class RegressionHead:
    W: np.ndarray
    b: np.ndarray
    kind: str = field(default="regression", init=False)


@dataclass
class MdnHead:
    W_alpha: np.ndarray
    b_alpha: np.ndarray
    W_mu: np.ndarray
    b_mu: np.ndarray
    W_sigma: np.ndarray
    b_sigma: np.ndarray
    kind: str = field(default="mdn", init=False)

    @property
    def n_components(self) -> int:
        return self.b_mu.shape[0]


@dataclass
class Network:
    layers: list
    head: RegressionHead | MdnHead
    x_mean: np.ndarray
    x_std: np.ndarray

    def __post_init__(self):
        width = self.x_mean.shape[0]
        if self.x_std.shape != (width,):
            raise ValueError("standardisation vectors must match the input width")
        for i, layer in enumerate(self.layers):
            if layer.W.shape[0] != width:
                raise ValueError(f"layer {i} expects {layer.W.shape[0]} inputs, got {width}")
            if not 0.0 <= layer.dropout <= 0.5:
                raise ValueError("dropout rate must lie in [0, 0.5]")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            width = layer.n_out
        head_w = self.head.W if self.head.kind == "regression" else self.head.W_mu
        if head_w.shape[0] != width:
            raise ValueError(f"head expects {head_w.shape[0]} inputs, got {width}")

    @property
    def n_inputs(self) -> int:
        return self.x_mean.shape[0]

    @property
    def head_kind(self) -> str:
        return self.head.kind


def params(net: Network) -> dict:
    """Trainable arrays keyed by name (views, so updates land in ``net``)."""
    out = {}
    for i, layer in enumerate(net.layers):
        for name in ("W", "b", "gamma", "beta"):
            out[f"h{i}.{name}"] = getattr(layer, name)
    head = net.head
    names = ("W", "b") if head.kind == "regression" else (
        "W_alpha", "b_alpha", "W_mu", "b_mu", "W_sigma", "b_sigma")
    for name in names:
        out[f"head.{name}"] = getattr(head, name)
    return out


def penalised(key: str) -> bool:
    """Dense weights and batch-norm gains carry the L2 penalty."""
    leaf = key.split(".", 1)[1]
    return leaf == "gamma" or leaf.startswith("W")


def build_network(
    n_inputs: int = 254,
    hidden: tuple = (64, 64),
    head: str = "regression",
    n_components: int = 5,
    dropout: float = 0.0,
    activation_kind: str = "elu",
    seed: int = 0,
    y: np.ndarray | None = None,
    x_mean: np.ndarray | None = None,
    x_std: np.ndarray | None = None,
    dtype=np.float64,
) -> Network:
    """Fresh network with fan-in scaled uniform weights.

    When training targets ``y`` are given the output biases start at sensible
    values: the target mean for regression, and for an MDN means spread over
    the target quantiles (to keep components from collapsing onto each other)
    with stds of about one component's share of the target spread.
    ``dtype`` sets the parameter precision (float32 trains about twice as
    fast; gradient checks want float64).
    """
    rng = np.random.default_rng(seed)
    layers = []
    width = n_inputs
    for n_out in hidden:
        lim = np.sqrt(6.0 / width)
        layers.append(HiddenLayer(
            W=rng.uniform(-lim, lim, size=(width, n_out)),
            b=np.zeros(n_out),
            gamma=np.ones(n_out),
            beta=np.zeros(n_out),
            running_mean=np.zeros(n_out),
            running_var=np.ones(n_out),
            activation=activation_kind,
            dropout=dropout,
        ))
        width = n_out
    lim = np.sqrt(3.0 / width)

    def dense(n_out):
        return rng.uniform(-lim, lim, size=(width, n_out))

    if head == "regression":
        b = np.array([float(np.mean(y))]) if y is not None else np.zeros(1)
        out_head = RegressionHead(W=dense(1), b=b)
    elif head == "mdn":
        k = n_components
        if y is not None:
            y = np.asarray(y, dtype=float)
            b_mu = np.quantile(y, (np.arange(k) + 0.5) / k)
            spread = max(float(np.std(y)), 1e-3) / k
            b_sigma = np.full(k, spread + np.log(-np.expm1(-spread)))  # softplus^-1
        else:
            b_mu = np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)
            b_sigma = np.zeros(k)
        out_head = MdnHead(
            W_alpha=dense(k), b_alpha=np.zeros(k),
            W_mu=dense(k), b_mu=b_mu,
            W_sigma=dense(k), b_sigma=b_sigma,
        )
    else:
        raise ValueError(f"unknown head {head!r}")
    net = Network(
        layers=layers,
        head=out_head,
        x_mean=np.zeros(n_inputs) if x_mean is None else np.asarray(x_mean, float),
        x_std=np.ones(n_inputs) if x_std is None else np.asarray(x_std, float),
    )
    return astype(net, dtype)


def astype(net: Network, dtype) -> Network:
    """Copy of ``net`` with every array cast to ``dtype``."""
    net = copy.deepcopy(net)
    for layer in net.layers:
        for name in ("W", "b", "gamma", "beta", "running_mean", "running_var"):
            setattr(layer, name, getattr(layer, name).astype(dtype))
    for key, arr in params(net).items():
        setattr(net.head, key.split(".", 1)[1], arr.astype(dtype))
    net.x_mean = net.x_mean.astype(dtype)
    net.x_std = net.x_std.astype(dtype)
    return net


def dtype_of(net: Network):
    return net.x_mean.dtype


def standardiser(X: np.ndarray):
    """Per-feature mean and std; constant features keep unit scale."""
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


# -- forward / backward -----------------------------------------------------


def _as_batch(net, x):
    x = np.asarray(x, dtype=dtype_of(net))
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.n_inputs:
        raise ValueError(f"expected inputs of width {net.n_inputs}, got shape {x.shape}")
    return X, single


def _colsum(a):
    # BLAS gemv beats ndarray.sum(axis=0) severalfold on small batches
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def _standardise(net, X):
    return (X - net.x_mean) / net.x_std


def _forward(net: Network, h: np.ndarray, train: bool, rng):
    """Hidden stack forward pass on standardised inputs ``h``.

    Returns the last activation and per-layer caches.
    """
    caches = []
    for layer in net.layers:
        if train and layer.activation in K.FUSED:
            z = h @ layer.W
            zhat, u = np.empty_like(z), np.empty_like(z)
            mu, var, inv_std = K.bn_normalise(z, layer.b, layer.gamma, layer.beta, BN_EPS, zhat, u)
            a = act = activation(layer.activation, u)
        else:
            a, act, zhat, inv_std, u, mu, var = _bn_block(layer, h, train)
        mask = None
        if train and layer.dropout > 0:
            if rng is None:
                raise ValueError("train mode with dropout needs an rng")
            keep = 1.0 - layer.dropout
            mask = (rng.random(a.shape, dtype=a.dtype) < keep) / np.asarray(keep, a.dtype)
            a = a * mask
        caches.append(dict(h=h, zhat=zhat, inv_std=inv_std, u=u, act=act, mask=mask,
                           batch_mean=mu, batch_var=var))
        h = a
    return h, caches


def _bn_block(layer, h, train):
    # reference path: eval mode and activations without a fused kernel
    z = h @ layer.W + layer.b
    if train:
        m = z.shape[0]
        mu = _colsum(z) / m
        zc = z - mu
        var = _colsum(zc * zc) / m
    else:
        mu, var = layer.running_mean, layer.running_var
        zc = z - mu
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    zhat = zc * inv_std
    u = layer.gamma * zhat + layer.beta
    act = activation(layer.activation, u)
    return act, act, zhat, inv_std, u, mu, var


def _mdn_outputs(head: MdnHead, h):
    k = head.n_components
    W = np.concatenate([head.W_alpha, head.W_mu, head.W_sigma], axis=1)
    b = np.concatenate([head.b_alpha, head.b_mu, head.b_sigma])
    out = h @ W + b
    logits, mu, zs = out[:, :k], out[:, k:2 * k], out[:, 2 * k:]
    sigma = softplus(zs) + SIGMA_FLOOR
    return logits, mu, zs, sigma, W


def forward_regression(net: Network, x, mode: str = "eval", rng=None):
    if net.head_kind != "regression":
        raise ValueError("network has an MDN head; use forward_mdn")
    X, single = _as_batch(net, x)
    h, _ = _forward(net, _standardise(net, X), mode == "train", rng)
    out = (h @ net.head.W + net.head.b)[:, 0]
    return out[0] if single else out


def forward_mdn(net: Network, x, mode: str = "eval", rng=None) -> GaussianMixture:
    if net.head_kind != "mdn":
        raise ValueError("network has a regression head; use forward_regression")
    X, single = _as_batch(net, x)
    h, _ = _forward(net, _standardise(net, X), mode == "train", rng)
    logits, mu, zs, _, _ = _mdn_outputs(net.head, h)
    # summarise in double precision whatever the parameter dtype
    logits, mu, zs = (a.astype(np.float64) for a in (logits, mu, zs))
    w = softmax(logits, axis=-1)
    sigma = softplus(zs) + SIGMA_FLOOR
    if single:
        return GaussianMixture(w[0], mu[0], sigma[0])
    return GaussianMixture(w, mu, sigma)


def penalty(net: Network) -> float:
    return float(sum(np.vdot(p, p) for k, p in params(net).items() if penalised(k)))


def _set_param(net, key, arr):
    owner, leaf = key.split(".", 1)
    target = net.head if owner == "head" else net.layers[int(owner[1:])]
    setattr(target, leaf, arr)


def _pack(net):
    """Rebind every trainable array of ``net`` to a view of one flat vector.

    Returns the flat vector, a 0/1 mask of penalised entries and the slice
    of each named parameter.
    """
    ps = params(net)
    flat = np.empty(sum(p.size for p in ps.values()), dtype=dtype_of(net))
    mask = np.zeros_like(flat)
    slices = {}
    off = 0
    for key, p in ps.items():
        sl = slice(off, off + p.size)
        view = flat[sl].reshape(p.shape)
        view[...] = p
        _set_param(net, key, view)
        mask[sl] = penalised(key)
        slices[key] = sl
        off += p.size
    return flat, mask, slices


def loss_and_grad(net: Network, X, y, lam: float, mode: str = "train", rng=None,
                  need_grad: bool = True):
    """Mean data loss plus ``lam`` times the L2 penalty, and its gradient.

    Returns ``(loss, grads, caches)``; ``grads`` is keyed like ``params(net)``
    and ``caches`` carry batch statistics for running-average updates.
    """
    X, _ = _as_batch(net, X)
    y = np.asarray(y, dtype=dtype_of(net)).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape[0] != X.shape[0]:
        raise ValueError("inputs and targets differ in length")
    return _loss_and_grad(net, _standardise(net, X), y, lam, mode == "train", rng, need_grad)


def _loss_and_grad(net, H0, y, lam, train, rng, need_grad):
    n = H0.shape[0]
    h, caches = _forward(net, H0, train, rng)
    head = net.head
    grads = {}

    if head.kind == "regression":
        pred = (h @ head.W + head.b)[:, 0]
        err = pred - y
        data_loss = float(np.mean(err * err))
        if need_grad:
            dpred = (2.0 / n) * err[:, None]
            grads["head.W"] = h.T @ dpred
            grads["head.b"] = _colsum(dpred)
            dh = dpred @ head.W.T
    else:
        k = head.n_components
        W_cat = np.concatenate([head.W_alpha, head.W_mu, head.W_sigma], axis=1)
        out = h @ W_cat + np.concatenate([head.b_alpha, head.b_mu, head.b_sigma])
        d_out = np.empty_like(out)
        data_loss = K.mdn_nll(out, y, k, SIGMA_FLOOR, need_grad, d_out)
        if need_grad:
            gW = h.T @ d_out
            gb = _colsum(d_out)
            for j, name in enumerate(("alpha", "mu", "sigma")):
                grads[f"head.W_{name}"] = gW[:, j * k:(j + 1) * k]
                grads[f"head.b_{name}"] = gb[j * k:(j + 1) * k]
            dh = d_out @ W_cat.T

    total = data_loss + lam * penalty(net) if lam else data_loss
    if not need_grad:
        return total, None, caches

    for i in range(len(net.layers) - 1, -1, -1):
        layer, c = net.layers[i], caches[i]
        da = dh if c["mask"] is None else dh * c["mask"]
        if train and layer.activation in K.FUSED:
            elu = layer.activation == "elu"
            if not elu:
                da = _activation_backward(layer.activation, c["u"], c["act"], da)
            dz = np.empty_like(da)
            g_gamma, g_beta, g_bias = K.bn_backward(
                da, c["act"], elu, c["zhat"], layer.gamma, c["inv_std"], dz)
            grads[f"h{i}.gamma"] = g_gamma
            grads[f"h{i}.beta"] = g_beta
            grads[f"h{i}.W"] = c["h"].T @ dz
            grads[f"h{i}.b"] = g_bias
            if i > 0:
                dh = dz @ layer.W.T
            continue
        du = _activation_backward(layer.activation, c["u"], c["act"], da)
        g_gamma = _colsum(du * c["zhat"])
        g_beta = _colsum(du)
        grads[f"h{i}.gamma"] = g_gamma
        grads[f"h{i}.beta"] = g_beta
        dzhat = du * layer.gamma
        if train:
            # colsum(dzhat) = gamma*g_beta and colsum(dzhat*zhat) = gamma*g_gamma
            m = dzhat.shape[0]
            dz = (c["inv_std"] / m) * (
                m * dzhat - layer.gamma * g_beta - c["zhat"] * (layer.gamma * g_gamma))
        else:
            dz = dzhat * c["inv_std"]
        grads[f"h{i}.W"] = c["h"].T @ dz
        grads[f"h{i}.b"] = _colsum(dz)
        if i > 0:
            dh = dz @ layer.W.T

    if lam:
        for k, p in params(net).items():
            if penalised(k):
                grads[k] = grads[k] + 2.0 * lam * p
    return total, grads, caches


def loss(net: Network, X, y, lam: float, mode: str = "train", rng=None) -> float:
    return loss_and_grad(net, X, y, lam, mode=mode, rng=rng, need_grad=False)[0]


def gradient(net: Network, X, y, lam: float, mode: str = "train", rng=None) -> dict:
    return loss_and_grad(net, X, y, lam, mode=mode, rng=rng)[1]


# -- optimisation -----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    decay_rate: float = 0.5
    decay_steps: int = 10_000
    l2: float = 0.1
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.decay_steps < 1:
            raise ValueError("epochs, batch_size and decay_steps must be positive")
        if self.learning_rate <= 0 or not 0 < self.decay_rate <= 1:
            raise ValueError("learning rate must be positive and decay rate in (0, 1]")
        if self.l2 < 0 or not 0 <= self.dropout <= 0.5:
            raise ValueError("l2 must be non-negative and dropout in [0, 0.5]")


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Smooth exponential decay: ``lr * decay_rate ** (step / decay_steps)``."""
    return cfg.learning_rate * cfg.decay_rate ** (step / cfg.decay_steps)


class Adam:
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, parameters: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in parameters.items()}
        self.v = {k: np.zeros_like(v) for k, v in parameters.items()}
        self.t = 0

    def step(self, parameters: dict, grads: dict) -> None:
        """Update ``parameters`` in place from ``grads``."""
        lr = learning_rate(self.t, self.cfg)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in parameters.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(net: Network, X, y, cfg: TrainConfig):
    """Mini-batch Adam training on a copy of ``net``.

    Returns ``(trained_net, history)`` with one mean training loss per epoch.
    The input network is left untouched.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if X.shape[1] != net.n_inputs or y.shape[0] != X.shape[0]:
        raise ValueError("training inputs/targets do not match the network")
    net = copy.deepcopy(net)
    H = _standardise(net, X.astype(dtype_of(net)))
    y = y.astype(dtype_of(net))
    for layer in net.layers:
        layer.dropout = cfg.dropout
    # one flat parameter vector keeps the optimiser step to a handful of ufuncs
    flat, mask, slices = _pack(net)
    grad = np.empty_like(flat)
    m1, m2 = np.zeros_like(flat), np.zeros_like(flat)
    lam = cfg.l2
    step = 0
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    history = []
    Hp, yp = np.empty_like(H), np.empty_like(y)
    for epoch in range(cfg.epochs):
        # one gather per epoch, then every batch is a contiguous slice
        order = rng.permutation(n)
        np.take(H, order, axis=0, out=Hp)
        np.take(y, order, out=yp)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            stop = min(start + cfg.batch_size, n)
            value, grads, caches = _loss_and_grad(net, Hp[start:stop], yp[start:stop],
                                                  0.0, True, rng, True)
            for key, sl in slices.items():
                grad[sl] = grads[key].ravel()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            step += 1
            pen = K.adam_l2_step(
                flat, grad, m1, m2, mask, lam, learning_rate(step - 1, cfg),
                Adam.beta1, Adam.beta2, 1.0 - Adam.beta1**step, 1.0 - Adam.beta2**step,
                Adam.eps)
            value += lam * pen
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            for layer, c in zip(net.layers, caches):
                layer.running_mean *= BN_MOMENTUM
                layer.running_mean += (1 - BN_MOMENTUM) * c["batch_mean"]
                layer.running_var *= BN_MOMENTUM
                layer.running_var += (1 - BN_MOMENTUM) * c["batch_var"]
            total += value * (stop - start)
        history.append(total / n)
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.6g", epoch, history[-1])
    return net, np.array(history)


# -- persistence ------------------------------------------------------------


def to_dict(net: Network) -> dict:
    layers = [
        dict(activation=l.activation, dropout=l.dropout,
             **{k: getattr(l, k).tolist() for k in
                ("W", "b", "gamma", "beta", "running_mean", "running_var")})
        for l in net.layers
    ]
    head = {k: v.tolist() for k, v in params(net).items() if k.startswith("head.")}
    return dict(head_kind=net.head_kind, layers=layers, head=head,
                x_mean=net.x_mean.tolist(), x_std=net.x_std.tolist())


def from_dict(d: dict) -> Network:
    layers = [
        HiddenLayer(activation=l["activation"], dropout=l["dropout"],
                    **{k: np.array(l[k], dtype=float) for k in
                       ("W", "b", "gamma", "beta", "running_mean", "running_var")})
        for l in d["layers"]
    ]
    h = {k.split(".", 1)[1]: np.array(v, dtype=float) for k, v in d["head"].items()}
    if d["head_kind"] == "regression":
        h["W"] = h["W"].reshape(-1, 1)
        head = RegressionHead(**h)
    else:
        head = MdnHead(**h)
    return Network(layers=layers, head=head, x_mean=np.array(d["x_mean"], float),
                   x_std=np.array(d["x_std"], float))
