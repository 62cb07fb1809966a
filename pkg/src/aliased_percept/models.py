"""The three regressors behind one interface.

Each :class:`TrainedModel` owns its input and target standardisation, so
callers pass raw observations and get predictions in target units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import gp, net as nn
from .mixture import GaussianMixture, conditional_mean, conditional_mode_density, conditional_mode_weight
from .persist import load_container, save_container
from .tactile_sim import TactileDataset

MODEL_KINDS = ("gp", "nn", "mdn5")
TARGETS = ("position", "orientation", "curvature")
PREDICTION_RULES = ("mode_density", "mode_weight", "mean")


@dataclass
class ModelConfig:
    """Architecture and training settings for any of the three model kinds."""

    hidden: tuple = (64, 64)
    activation: str = "elu"
    dtype: str = "float32"
    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 1e-3
    l2: float = 0.01
    dropout: float = 0.0
    n_components: int = 5
    kernel: str = "matern52"
    length: float | None = None
    inducing: int = 512
    hypers: tuple | None = None  # fixed GP (signal, length, noise); fitted when None
    prediction_rule: str = "mode_density"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden layer widths must be positive")
        if self.kernel not in gp.KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.inducing < 1:
            raise ValueError("inducing count must be positive")
        if self.hypers is not None:
            self.hypers = tuple(float(h) for h in self.hypers)
            if len(self.hypers) != 3 or min(self.hypers) <= 0:
                raise ValueError("hypers must be three positive numbers: signal, length, noise")
        if self.prediction_rule not in PREDICTION_RULES:
            raise ValueError(f"unknown prediction rule {self.prediction_rule!r}")
        self.train_config(0)  # validates the optimiser settings

    def train_config(self, seed: int) -> nn.TrainConfig:
        return nn.TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                              learning_rate=self.learning_rate, l2=self.l2,
                              dropout=self.dropout, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        if self.hypers is not None:
            d["hypers"] = list(self.hypers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CapabilityError(TypeError):
    """Requested output (e.g. an uncertainty) that the model kind cannot give."""


@dataclass
class TrainedModel:
    kind: str
    target: str
    y_mean: float
    y_std: float
    config: ModelConfig
    seed: int
    net: nn.Network | None = None
    gp_model: gp.GpModel | None = None
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def _gp_inputs(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def mixture(self, X) -> GaussianMixture:
        """Predictive mixtures in target units (MDN only)."""
        if self.kind != "mdn5":
            raise CapabilityError(f"{self.kind} models do not predict a distribution")
        g = nn.forward_mdn(self.net, np.atleast_2d(X))
        return g.scaled(self.y_std).shifted(self.y_mean)

    def predict(self, X, rule: str | None = None) -> np.ndarray:
        """Point predictions; ``rule`` (MDN only) defaults to the configured one."""
        rule = rule or self.config.prediction_rule
        if rule not in PREDICTION_RULES:
            raise ValueError(f"unknown prediction rule {rule!r}")
        X = np.atleast_2d(X)
        if self.kind == "mdn5":
            g = self.mixture(X)
            if rule == "mean":
                return conditional_mean(g)
            pick = conditional_mode_density if rule == "mode_density" else conditional_mode_weight
            return pick(g)[1]
        if self.kind == "nn":
            z = nn.forward_regression(self.net, X)
        else:
            z = gp.predict(self.gp_model, self._gp_inputs(X))[0]
        return np.asarray(z, dtype=float) * self.y_std + self.y_mean

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        d = dict(kind=self.kind, target=self.target, y_mean=self.y_mean, y_std=self.y_std,
                 config=self.config.to_dict(), seed=self.seed, history=self.history.tolist())
        if self.kind == "gp":
            d["gp"] = gp.to_dict(self.gp_model)
            d["x_mean"], d["x_std"] = self.x_mean.tolist(), self.x_std.tolist()
        else:
            d["net"] = nn.to_dict(self.net)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        config = ModelConfig.from_dict(d["config"])
        m = cls(kind=d["kind"], target=d["target"], y_mean=d["y_mean"], y_std=d["y_std"],
                config=config, seed=d["seed"], history=np.array(d["history"], dtype=float))
        if m.kind == "gp":
            m.gp_model = gp.from_dict(d["gp"])
            m.x_mean, m.x_std = np.array(d["x_mean"]), np.array(d["x_std"])
        else:
            m.net = nn.astype(nn.from_dict(d["net"]), np.dtype(config.dtype))
        return m

    def save(self, path) -> None:
        save_container(path, f"trained-{self.kind}", self.to_dict())

    @classmethod
    def load(cls, path) -> "TrainedModel":
        kind, payload = load_container(path)
        if not kind.startswith("trained-"):
            raise ValueError(f"{path}: holds a {kind!r}, not a trained model")
        return cls.from_dict(payload)


def fit(kind: str, data: TactileDataset, target: str, config: ModelConfig | None = None,
        seed: int = 0) -> TrainedModel:
    """Train one model of ``kind`` on ``data`` for ``target``."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")
    config = config or ModelConfig()
    if len(data) == 0:
        raise ValueError("empty training set")
    y = data.target(target).astype(float)
    y_mean = float(y.mean())
    y_std = float(y.std()) or 1.0
    z = (y - y_mean) / y_std
    model = TrainedModel(kind, target, y_mean, y_std, config, seed)
    if kind == "gp":
        x_mean, x_std = nn.standardiser(data.X)
        H = (data.X - x_mean) / x_std
        if config.hypers is None:
            hyp = fit_gp_hypers(data, target, config, seed)
            kernel, noise = hyp.kernel, hyp.noise
        else:
            signal, length, noise = config.hypers
            kernel = gp.Kernel(config.kernel, signal, length)
        inducing = gp.default_inducing(len(data), seed, config.inducing)
        model.gp_model = gp.fit_sor(H, z, kernel, noise, inducing)
        model.x_mean, model.x_std = x_mean, x_std
        return model
    x_mean, x_std = nn.standardiser(data.X)
    net = nn.build_network(
        n_inputs=data.X.shape[1], hidden=config.hidden,
        head="mdn" if kind == "mdn5" else "regression", n_components=config.n_components,
        dropout=config.dropout, activation_kind=config.activation, seed=seed, y=z,
        x_mean=x_mean, x_std=x_std, dtype=np.dtype(config.dtype))
    model.net, model.history = nn.train(net, data.X, z, config.train_config(seed))
    return model


def fit_gp_hypers(data: TactileDataset, target: str, config: ModelConfig,
                  seed: int = 0) -> gp.HyperFit:
    """Marginal-likelihood hyperparameters on the standardised problem ``fit`` solves."""
    x_mean, x_std = nn.standardiser(data.X)
    y = data.target(target).astype(float)
    z = (y - y.mean()) / (y.std() or 1.0)
    return gp.optimize_hypers((data.X - x_mean) / x_std, z, config.kernel, config.inducing,
                              length=config.length, seed=seed)
