"""Model components: shared stochastic encoder, outcome heads, critic,
learnable marginal prior, and the optional treatment-probability classifier.

Parameters live in plain float64 arrays wrapped as graph leaves. Any forward
pass can be run with frozen parameters (wrapped in stop_gradient), which is
how the alternating objectives keep their gradients apart.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as D
from .diffcore import Tensor

SIGMA_FLOOR = 1e-3
SIGMA_RAW_INIT = -5.0  # softplus(-5) ~ 7e-3: start near-deterministic

_ACTIVATIONS = {"elu": D.elu, "relu": D.relu}


@dataclass(frozen=True)
class MlpSpec:
    """Layer plan for a fully connected network."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "elu"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if not 1 <= len(self.hidden_dims) <= 3:
            raise ValueError(f"hidden_dims must have 1 to 3 entries, "
                             f"got {len(self.hidden_dims)}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def param_count(self) -> int:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(dims, dims[1:]))


def _init_affine(fan_in: int, fan_out: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    b = Tensor(np.zeros((fan_out,)))
    return w, b


def _maybe_freeze(params: list[Tensor], freeze: bool) -> list[Tensor]:
    return [D.stop_gradient(p) for p in params] if freeze else params


class Mlp:
    """Fully connected network built from an MlpSpec."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        self.layers: list[tuple[Tensor, Tensor]] = []
        dims = (spec.input_dim, *spec.hidden_dims, spec.output_dim)
        for fan_in, fan_out in zip(dims, dims[1:]):
            self.layers.append(_init_affine(fan_in, fan_out, rng))
        self._act = _ACTIVATIONS[spec.activation]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, x: Tensor, freeze: bool = False) -> Tensor:
        params = _maybe_freeze(self.parameters(), freeze)
        h = x
        last = len(self.layers) - 1
        for i in range(len(self.layers)):
            w, b = params[2 * i], params[2 * i + 1]
            h = D.add(D.matmul(h, w), b)
            if i != last:
                h = self._act(h)
        return h

    def param_count(self) -> int:
        return self.spec.param_count()


class GaussianEncoder:
    """Maps covariates to the mean and scale of a diagonal Gaussian over z.

    The scale is softplus of the head output plus a floor, so it stays
    strictly positive under any parameter values.
    """

    def __init__(self, input_dim: int, hidden_dims: tuple[int, ...], repr_dim: int,
                 activation: str, rng: np.random.Generator,
                 sigma_floor: float = SIGMA_FLOOR):
        if repr_dim < 1:
            raise ValueError("repr_dim must be >= 1")
        self.input_dim = input_dim
        self.hidden_dims = tuple(hidden_dims)
        self.repr_dim = repr_dim
        self.activation = activation
        self.sigma_floor = float(sigma_floor)
        if not 1 <= len(self.hidden_dims) <= 3:
            raise ValueError(f"hidden_dims must have 1 to 3 entries, "
                             f"got {len(self.hidden_dims)}")
        # trunk: every hidden layer gets an activation; heads are affine
        self._act = _ACTIVATIONS[activation]
        self.trunk: list[tuple[Tensor, Tensor]] = []
        dims = (input_dim, *self.hidden_dims)
        for fan_in, fan_out in zip(dims, dims[1:]):
            self.trunk.append(_init_affine(fan_in, fan_out, rng))
        self.mu_head = _init_affine(self.hidden_dims[-1], repr_dim, rng)
        self.sigma_head = _init_affine(self.hidden_dims[-1], repr_dim, rng)
        # start with a tight posterior; the compression term widens it as
        # its weight demands, which trains far better than the reverse
        self.sigma_head[1].data = np.full((repr_dim,), SIGMA_RAW_INIT)

    def parameters(self) -> list[Tensor]:
        out = [p for layer in self.trunk for p in layer]
        out.extend(self.mu_head)
        out.extend(self.sigma_head)
        return out

    def param_count(self) -> int:
        dims = (self.input_dim, *self.hidden_dims)
        trunk = sum((i + 1) * o for i, o in zip(dims, dims[1:]))
        heads = 2 * (self.hidden_dims[-1] + 1) * self.repr_dim
        return trunk + heads

    def encode(self, x: Tensor, freeze: bool = False) -> tuple[Tensor, Tensor]:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise D.ShapeError("encode", f"expected (batch, {self.input_dim}), "
                                         f"got {x.shape}")
        params = _maybe_freeze(self.parameters(), freeze)
        h = x
        for i in range(len(self.trunk)):
            h = self._act(D.add(D.matmul(h, params[2 * i]), params[2 * i + 1]))
        k = 2 * len(self.trunk)
        mu = D.add(D.matmul(h, params[k]), params[k + 1])
        sigma = D.add(D.softplus(D.add(D.matmul(h, params[k + 2]), params[k + 3])),
                      D.as_tensor(self.sigma_floor))
        return mu, sigma


def reparameterize(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    """z = mu + sigma * eps with caller-supplied standard normal noise."""
    return D.add(mu, D.mul(sigma, D.as_tensor(eps)))


class OutcomeHead:
    """Single affine layer from the representation to an outcome.

    Continuous mode predicts the mean of a unit-variance Gaussian; binary
    mode predicts a probability through a logistic link.
    """

    def __init__(self, repr_dim: int, kind: str, rng: np.random.Generator):
        if kind not in ("continuous", "binary"):
            raise ValueError(f"unknown outcome kind {kind!r}")
        self.repr_dim = repr_dim
        self.kind = kind
        self.w, self.b = _init_affine(repr_dim, 1, rng)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def param_count(self) -> int:
        return (self.repr_dim + 1) * 1

    def raw(self, z: Tensor, freeze: bool = False) -> Tensor:
        w, b = _maybe_freeze([self.w, self.b], freeze)
        return D.add(D.matmul(z, w), b)

    def predict(self, z: Tensor, freeze: bool = False) -> Tensor:
        out = self.raw(z, freeze)
        if self.kind == "binary":
            out = D.sigmoid(out)
        return out


class StatisticsNetwork:
    """Scalar-valued critic over (x, z, t); treatment enters as a real column."""

    def __init__(self, x_dim: int, repr_dim: int, hidden_dims: tuple[int, ...],
                 activation: str, rng: np.random.Generator):
        self.x_dim = x_dim
        self.repr_dim = repr_dim
        self.net = Mlp(MlpSpec(x_dim + repr_dim + 1, tuple(hidden_dims), 1,
                               activation), rng)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def param_count(self) -> int:
        return self.net.param_count()

    def value(self, x: Tensor, z: Tensor, t: Tensor, freeze: bool = False) -> Tensor:
        return self.net(D.concat_cols([x, z, t]), freeze=freeze)


class MarginalPrior:
    """Learnable diagonal Gaussian approximating the marginal of z."""

    def __init__(self, repr_dim: int, sigma_floor: float = SIGMA_FLOOR):
        self.repr_dim = repr_dim
        self.sigma_floor = float(sigma_floor)
        self.mean = Tensor(np.zeros((repr_dim,)))
        # raw chosen so the initial scale is 1.0
        raw0 = float(np.log(np.expm1(1.0 - sigma_floor)))
        self.raw_scale = Tensor(np.full((repr_dim,), raw0))

    def parameters(self) -> list[Tensor]:
        return [self.mean, self.raw_scale]

    def param_count(self) -> int:
        return 2 * self.repr_dim

    def moments(self, freeze: bool = False) -> tuple[Tensor, Tensor]:
        m, raw = _maybe_freeze([self.mean, self.raw_scale], freeze)
        scale = D.add(D.softplus(raw), D.as_tensor(self.sigma_floor))
        return m, scale

    def log_density(self, z: Tensor, freeze: bool = False) -> Tensor:
        """Row-wise log density of the diagonal Gaussian, shape (n, 1)."""
        m, scale = self.moments(freeze)
        u = D.div(D.sub(z, m), scale)
        per_dim = D.add(D.mul(D.square(u), D.as_tensor(0.5)), D.log(scale))
        row = D.tsum(per_dim, axis=1, keepdims=True)
        const = 0.5 * self.repr_dim * math.log(2.0 * math.pi)
        return D.neg(D.add(row, D.as_tensor(const)))


class PropensityClassifier:
    """Optional treatment-probability model; outputs are clipped for weighting."""

    def __init__(self, x_dim: int, hidden_dims: tuple[int, ...], activation: str,
                 rng: np.random.Generator, clip: float = 0.05):
        if not 0.0 < clip < 0.5:
            raise ValueError("clip must lie in (0, 0.5)")
        self.clip = float(clip)
        self.net = Mlp(MlpSpec(x_dim, tuple(hidden_dims), 1, activation), rng)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def param_count(self) -> int:
        return self.net.param_count()

    def logit(self, x: Tensor, freeze: bool = False) -> Tensor:
        return self.net(x, freeze=freeze)

    def probability(self, x: Tensor) -> np.ndarray:
        """Clipped p(t=1|x) per row, as a plain array (used for weights only)."""
        p = D.sigmoid(self.logit(x)).data.ravel()
        return np.clip(p, self.clip, 1.0 - self.clip)


@dataclass
class ModelConfig:
    """Architecture settings shared by the CLI, trainer, and checkpoints."""

    d_x: int
    repr_dim: int = 64
    hidden_dims: tuple[int, ...] = (64,)
    activation: str = "elu"
    outcome_kind: str = "continuous"
    sigma_floor: float = SIGMA_FLOOR
    use_propensity: bool = False
    propensity_clip: float = 0.05

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.outcome_kind not in ("continuous", "binary"):
            raise ValueError(f"unknown outcome kind {self.outcome_kind!r}")


class CibModel:
    """Parameter bundle: encoder, two outcome heads, marginal prior, critic,
    and the optional propensity classifier."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.encoder = GaussianEncoder(c.d_x, c.hidden_dims, c.repr_dim,
                                       c.activation, rng, c.sigma_floor)
        self.head0 = OutcomeHead(c.repr_dim, c.outcome_kind, rng)
        self.head1 = OutcomeHead(c.repr_dim, c.outcome_kind, rng)
        self.prior = MarginalPrior(c.repr_dim, c.sigma_floor)
        self.critic = StatisticsNetwork(c.d_x, c.repr_dim, c.hidden_dims,
                                        c.activation, rng)
        self.propensity = (PropensityClassifier(c.d_x, c.hidden_dims, c.activation,
                                                rng, c.propensity_clip)
                           if c.use_propensity else None)

    # parameter groups, named after their roles in the objective
    def encoder_params(self) -> list[Tensor]:
        return self.encoder.parameters()

    def head_params(self) -> list[Tensor]:
        return self.head0.parameters() + self.head1.parameters()

    def prior_params(self) -> list[Tensor]:
        return self.prior.parameters()

    def critic_params(self) -> list[Tensor]:
        return self.critic.parameters()

    def propensity_params(self) -> list[Tensor]:
        return self.propensity.parameters() if self.propensity else []

    def main_params(self) -> list[Tensor]:
        return self.encoder_params() + self.head_params() + self.prior_params()

    def all_params(self) -> list[Tensor]:
        return self.main_params() + self.critic_params() + self.propensity_params()

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.all_params()]

    def restore(self, arrays: list[np.ndarray]) -> None:
        params = self.all_params()
        if len(arrays) != len(params):
            raise ValueError("snapshot does not match model layout")
        for p, a in zip(params, arrays):
            if a.shape != p.data.shape:
                raise ValueError("snapshot array shape mismatch")
            p.data = a.copy()


def config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def save_model(path, model: CibModel, config_payload: dict, seed: int) -> None:
    """Checkpoint as JSON: architecture, flat parameter arrays, config hash, seed."""
    c = model.config
    groups = {
        "encoder": model.encoder.parameters(),
        "head0": model.head0.parameters(),
        "head1": model.head1.parameters(),
        "prior": model.prior.parameters(),
        "critic": model.critic.parameters(),
    }
    if model.propensity is not None:
        groups["propensity"] = model.propensity.parameters()
    doc = {
        "spec": {
            "d_x": c.d_x,
            "repr_dim": c.repr_dim,
            "hidden_dims": list(c.hidden_dims),
            "activation": c.activation,
            "outcome_kind": c.outcome_kind,
            "sigma_floor": c.sigma_floor,
            "use_propensity": c.use_propensity,
            "propensity_clip": c.propensity_clip,
        },
        "params": {
            name: [{"shape": list(p.data.shape), "values": p.data.ravel().tolist()}
                   for p in params]
            for name, params in groups.items()
        },
        "config_hash": config_hash(config_payload),
        "seed": int(seed),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> tuple[CibModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, raw document)."""
    with open(path) as fh:
        doc = json.load(fh)
    s = doc["spec"]
    config = ModelConfig(
        d_x=int(s["d_x"]),
        repr_dim=int(s["repr_dim"]),
        hidden_dims=tuple(s["hidden_dims"]),
        activation=s["activation"],
        outcome_kind=s["outcome_kind"],
        sigma_floor=float(s["sigma_floor"]),
        use_propensity=bool(s["use_propensity"]),
        propensity_clip=float(s["propensity_clip"]),
    )
    model = CibModel(config, np.random.default_rng(0))
    groups = {
        "encoder": model.encoder.parameters(),
        "head0": model.head0.parameters(),
        "head1": model.head1.parameters(),
        "prior": model.prior.parameters(),
        "critic": model.critic.parameters(),
    }
    if model.propensity is not None:
        groups["propensity"] = model.propensity.parameters()
    for name, params in groups.items():
        stored = doc["params"][name]
        if len(stored) != len(params):
            raise ValueError(f"checkpoint group {name!r} does not match model layout")
        for p, rec in zip(params, stored):
            arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
            if arr.shape != p.data.shape:
                raise ValueError(f"checkpoint array shape mismatch in {name!r}")
            p.data = arr
    return model, doc
