"""Adam-based alternating optimization: critic steps interleaved with main
steps, periodic validation, early stopping, and grid search over configs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from . import diffcore as D
from . import objective as O
from .data import ObservationalDataset
from .diffcore import Tensor
from .nets import CibModel, ModelConfig
from .seeding import stream

HYPER_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


class NonFiniteLossError(RuntimeError):
    """Training hit a non-finite loss; names the first bad term."""

    def __init__(self, term: str, iteration: int):
        self.term = term
        self.iteration = iteration
        super().__init__(f"non-finite loss term {term!r} at iteration {iteration}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings plus the regularizer weights.

    ``iteration_unit`` is "step" (one minibatch per iteration) or "epoch"
    (one pass over the training split per iteration).
    """

    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iterations: int = 2000
    early_stop_patience: int = 10
    validate_every: int = 20
    batch_size: int = 128
    critic_steps: int = 1
    critic_warmup: int = 20
    beta: float = 1.0
    lambda_m: float = 1.0
    lambda_v: float = 1.0
    gradient_penalty: float = 1.0
    cpvr_samples: int = 10
    deterministic_encoder: bool = False
    iteration_unit: str = "step"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.iteration_unit not in ("step", "epoch"):
            raise ValueError(f"unknown iteration unit {self.iteration_unit!r}")
        if self.cpvr_samples < 2:
            raise ValueError("cpvr_samples must be >= 2")

    @property
    def hyper(self) -> O.Hyper:
        return O.Hyper(beta=self.beta, lambda_m=self.lambda_m,
                       lambda_v=self.lambda_v)

    def sort_key(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class Adam:
    """Standard bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter shape {p.data.shape}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * np.square(g)
            m_hat = self.m[i] / (1.0 - b1 ** self.t)
            v_hat = self.v[i] / (1.0 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: Adam, grads: list[np.ndarray]) -> None:
    state.step(grads)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless minibatch index stream: shuffle per epoch, no replacement."""
    while True:
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo:lo + batch_size]


def factual_nll(model: CibModel, ds: ObservationalDataset) -> float:
    """Mean negative log likelihood of factual outcomes at z = mu."""
    x_in = D.as_tensor(ds.x)
    mu, _ = model.encoder.encode(x_in)
    y = D.as_tensor(ds.y_f.reshape(-1, 1))
    ll0 = O._row_log_lik(model.head0, mu, y).data.ravel()
    ll1 = O._row_log_lik(model.head1, mu, y).data.ravel()
    ll = np.where(ds.t == 1, ll1, ll0)
    return float(-ll.mean())


@dataclass
class FitResult:
    model: CibModel
    log: list[dict] = field(default_factory=list)
    best_valid: float | None = None
    stopped_at: int = 0

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _check_finite(report: O.LossReport, iteration: int) -> None:
    for term in ("l0", "l1", "lc", "lm", "lv", "total"):
        if not np.isfinite(getattr(report, term)):
            raise NonFiniteLossError(term, iteration)


def fit(model: CibModel, train: ObservationalDataset,
        valid: ObservationalDataset | None, cfg: TrainConfig) -> FitResult:
    """Alternating optimization of the full objective.

    Each iteration runs ``critic_steps`` Adam updates of the critic on its
    penalized objective, then one Adam update of encoder, heads, and prior on
    the negated total. Validation factual NLL is checked every
    ``validate_every`` iterations; the best-validation parameters are
    restored at the end.
    """
    if not ((train.t == 0).any() and (train.t == 1).any()):
        raise O.DegenerateBatchError("training split must contain both groups")
    n = train.n
    dz = model.config.repr_dim
    batch_rng = stream(cfg.seed, "minibatch")
    noise_rng = stream(cfg.seed, "noise")
    batch_size = min(cfg.batch_size, n)
    batches = _minibatches(n, batch_size, batch_rng)
    steps_per_iter = 1 if cfg.iteration_unit == "step" else max(1, -(-n // batch_size))

    opt_main = Adam(model.main_params(), cfg.learning_rate,
                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    opt_critic = Adam(model.critic_params(), cfg.learning_rate,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    opt_prop = None
    if model.propensity is not None:
        opt_prop = Adam(model.propensity_params(), cfg.learning_rate,
                        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def encode_z(xb):
        x_in = D.as_tensor(xb)
        mu, sigma = model.encoder.encode(x_in)
        if cfg.deterministic_encoder:
            return mu
        eps = noise_rng.standard_normal(size=(xb.shape[0], dz))
        return O.reparameterize(mu, sigma, eps)

    def critic_update(xb, tb) -> float:
        z = encode_z(xb)
        perm = noise_rng.permutation(tb.shape[0])
        co = O.dv_critic_objective(model.critic, xb, z, tb, tb[perm],
                                   gamma=cfg.gradient_penalty)
        grads = D.backward(D.neg(co.objective), model.critic_params())
        opt_critic.step(grads)
        return co.objective.item()

    def propensity_update(xb, tb) -> None:
        logit = model.propensity.logit(D.as_tensor(xb))
        ll = O.bernoulli_log_lik(logit, D.as_tensor(tb.reshape(-1, 1).astype(np.float64)))
        loss = D.neg(D.mean(ll))
        grads = D.backward(loss, model.propensity_params())
        opt_prop.step(grads)

    # critic warm-up so the disentangling term starts informative
    needs_critic = cfg.lambda_m != 0.0
    if needs_critic:
        for _ in range(cfg.critic_warmup):
            idx = next(batches)
            if len(idx) < 2:
                continue
            critic_update(train.x[idx], train.t[idx])

    log: list[dict] = []
    best_valid = None
    best_snapshot = None
    checks_since_best = 0
    stopped_at = 0

    for it in range(1, cfg.max_iterations + 1):
        critic_value = None
        report = None
        for _ in range(steps_per_iter):
            idx = next(batches)
            xb, tb, yb = train.x[idx], train.t[idx], train.y_f[idx]
            if opt_prop is not None:
                propensity_update(xb, tb)
            if needs_critic and len(idx) >= 2:
                for _ in range(cfg.critic_steps):
                    critic_value = critic_update(xb, tb)
            eps = None
            if not cfg.deterministic_encoder:
                eps = noise_rng.standard_normal(size=(len(idx), dz))
            eps_cf = None
            if cfg.lambda_v != 0.0 and not cfg.deterministic_encoder:
                eps_cf = noise_rng.standard_normal(size=(cfg.cpvr_samples, len(idx), dz))
            total, report = O.total_objective(model, xb, tb, yb, cfg.hyper,
                                              eps, eps_cf,
                                              deterministic=cfg.deterministic_encoder)
            _check_finite(report, it)
            grads = D.backward(D.neg(total), model.main_params())
            opt_main.step(grads)
        report.critic = critic_value
        rec = {"iter": it, **report.as_dict()}
        stopped_at = it

        if valid is not None and it % cfg.validate_every == 0:
            v = factual_nll(model, valid)
            rec["validLoss"] = v
            if best_valid is None or v < best_valid:
                best_valid = v
                best_snapshot = model.snapshot()
                checks_since_best = 0
            else:
                checks_since_best += 1
            if checks_since_best >= cfg.early_stop_patience:
                log.append(rec)
                break
        log.append(rec)

    if best_snapshot is not None:
        model.restore(best_snapshot)
    return FitResult(model=model, log=log, best_valid=best_valid,
                     stopped_at=stopped_at)


def build_and_fit(model_config: ModelConfig, train: ObservationalDataset,
                  valid: ObservationalDataset | None, cfg: TrainConfig) -> FitResult:
    model = CibModel(model_config, stream(cfg.seed, "init"))
    return fit(model, train, valid, cfg)


@dataclass
class GridResult:
    best: TrainConfig
    reports: list[dict]


def grid_search(space: list[TrainConfig], model_config: ModelConfig,
                train: ObservationalDataset, valid: ObservationalDataset) -> GridResult:
    """Train every config and pick the best validation factual NLL.

    Ties break on the lexicographic order of the serialized config, so the
    winner never depends on the order of the search space.
    """
    if not space:
        raise ValueError("grid_search needs a non-empty config space")
    reports = []
    for cfg in space:
        result = build_and_fit(model_config, train, valid, cfg)
        score = result.best_valid
        if score is None:
            score = factual_nll(result.model, valid)
        reports.append({"config": cfg, "valid_loss": score})
    best = min(reports, key=lambda r: (r["valid_loss"], r["config"].sort_key()))
    return GridResult(best=best["config"], reports=reports)


def default_grid(base: TrainConfig, betas=HYPER_GRID, lambda_ms=HYPER_GRID,
                 lambda_vs=HYPER_GRID) -> list[TrainConfig]:
    """The regularizer-weight search grid around a base config."""
    for vals in (betas, lambda_ms, lambda_vs):
        bad = set(vals) - set(HYPER_GRID)
        if bad:
            raise ValueError(f"grid values {sorted(bad)} outside {HYPER_GRID}")
    return [replace(base, beta=b, lambda_m=m, lambda_v=v)
            for b in betas for m in lambda_ms for v in lambda_vs]
