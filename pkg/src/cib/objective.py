"""The five loss terms of the training objective and the critic's own objective.

Sign convention: every term is written so the model MAXIMIZES
``l0 + l1 - beta*lc + lambda_m*lm + lambda_v*lv``; the trainer minimizes the
negation. Constant outcome-entropy terms are dropped everywhere since they do
not depend on any trainable parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as D
from .diffcore import Tensor
from .nets import CibModel, MarginalPrior, OutcomeHead, StatisticsNetwork, reparameterize

LOG_2PI = math.log(2.0 * math.pi)


class DegenerateBatchError(ValueError):
    """A batch is unusable for a loss term (missing group, too small)."""


@dataclass
class LossReport:
    """Per-term values on the maximization scale, plus the weighted total.

    ``total == l0 + l1 - beta*lc + lambda_m*lm + lambda_v*lv`` holds exactly.
    ``critic`` carries the most recent critic objective value when available.
    Constant entropy terms of the outcome variables are omitted from l0/l1.
    """

    l0: float
    l1: float
    lc: float
    lm: float
    lv: float
    total: float
    critic: float | None = None

    def as_dict(self) -> dict:
        out = {"l0": self.l0, "l1": self.l1, "lC": self.lc, "lM": self.lm,
               "lV": self.lv, "total": self.total}
        if self.critic is not None:
            out["criticObj"] = self.critic
        return out


@dataclass(frozen=True)
class Hyper:
    """Weights of the three regularizers."""

    beta: float = 1.0
    lambda_m: float = 1.0
    lambda_v: float = 1.0


def gaussian_log_lik(pred: Tensor, y: Tensor) -> Tensor:
    """Row-wise log density of y under N(pred, 1)."""
    sq = D.square(D.sub(y, pred))
    return D.neg(D.add(D.mul(sq, D.as_tensor(0.5)), D.as_tensor(0.5 * LOG_2PI)))


def bernoulli_log_lik(logit: Tensor, y: Tensor) -> Tensor:
    """Row-wise log likelihood of y in {0,1} under sigmoid(logit), stable form."""
    pos = D.mul(y, D.softplus(D.neg(logit)))
    neg = D.mul(D.sub(D.as_tensor(1.0), y), D.softplus(logit))
    return D.neg(D.add(pos, neg))


def _row_log_lik(head: OutcomeHead, z: Tensor, y: Tensor) -> Tensor:
    if head.kind == "binary":
        return bernoulli_log_lik(head.raw(z), y)
    return gaussian_log_lik(head.raw(z), y)


def expressiveness_loss(head: OutcomeHead, z: Tensor, y: Tensor,
                        weights: np.ndarray) -> Tensor:
    """Weighted mean log likelihood of factual outcomes under one head.

    The caller selects a treatment group through the weights: rows outside
    the group carry weight zero. With propensity weighting enabled the
    in-group weights are inverse clipped scores; the normalization by the
    weight sum makes the estimator self-normalized.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    wsum = float(w.sum())
    if wsum <= 0.0:
        raise DegenerateBatchError("empty treatment group in batch")
    ll = _row_log_lik(head, z, y)
    return D.div(D.tsum(D.mul(ll, D.as_tensor(w))), D.as_tensor(wsum))


def gaussian_kl_rows(mu: Tensor, sigma: Tensor, prior: MarginalPrior,
                     freeze_prior: bool = False) -> Tensor:
    """Row-wise KL(N(mu, sigma^2) || prior) for diagonal Gaussians, shape (n, 1)."""
    pm, ps = prior.moments(freeze=freeze_prior)
    log_ratio = D.sub(D.log(ps), D.log(sigma))
    quad = D.div(D.add(D.square(sigma), D.square(D.sub(mu, pm))),
                 D.mul(D.square(ps), D.as_tensor(2.0)))
    per_dim = D.sub(D.add(log_ratio, quad), D.as_tensor(0.5))
    return D.tsum(per_dim, axis=1, keepdims=True)


def compression_loss(mu: Tensor, sigma: Tensor, prior: MarginalPrior) -> Tensor:
    """Batch-mean closed-form KL between the encoder posterior and the prior."""
    return D.mean(gaussian_kl_rows(mu, sigma, prior))


def logmeanexp(t: Tensor) -> Tensor:
    """log(mean(exp(t))), stabilized with a constant max shift."""
    m = float(np.max(t.data))
    return D.add(D.log(D.mean(D.exp(D.sub(t, D.as_tensor(m))))), D.as_tensor(m))


@dataclass
class CriticObjective:
    """Donsker-Varadhan value, gradient penalty, and the penalized objective."""

    objective: Tensor  # dv - gamma * penalty; maximize over critic params
    dv: Tensor
    penalty: Tensor


def dv_critic_objective(critic: StatisticsNetwork, x, z: Tensor, t: np.ndarray,
                        t_marginal: np.ndarray, gamma: float = 1.0) -> CriticObjective:
    """Critic objective: DV bound minus a zero-centered gradient penalty.

    ``z`` is detached, so encoder parameters receive exactly zero gradient.
    The joint term pairs z with the observed t; the product-distribution term
    uses a within-batch permutation of t. The penalty is the squared gradient
    norm of the critic with respect to its (z, t) inputs on the joint branch.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    t_marginal = np.asarray(t_marginal, dtype=np.float64).reshape(-1, 1)
    n = t.shape[0]
    if n < 2:
        raise DegenerateBatchError("need at least 2 rows to sample the "
                                   "product distribution by permutation")
    x_in = D.as_tensor(x)
    z_in = D.stop_gradient(z if isinstance(z, Tensor) else D.as_tensor(z))
    t_in = D.as_tensor(t)
    f_joint = critic.value(x_in, z_in, t_in)
    f_marg = critic.value(x_in, z_in, D.as_tensor(t_marginal))
    dv = D.sub(D.mean(f_joint), logmeanexp(f_marg))
    gz, gt = D.grad(D.tsum(f_joint), [z_in, t_in])
    penalty = D.mean(D.add(D.tsum(D.square(gz), axis=1, keepdims=True),
                           D.square(gt)))
    objective = D.sub(dv, D.mul(D.as_tensor(float(gamma)), penalty))
    return CriticObjective(objective=objective, dv=dv, penalty=penalty)


def disentangle_loss(critic: StatisticsNetwork, x, z: Tensor, t: np.ndarray) -> Tensor:
    """Encoder-side term pushing z independent of t given x: -mean(critic).

    Critic parameters are frozen; gradients reach only the encoder through z.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return D.neg(D.mean(critic.value(D.as_tensor(x), z, D.as_tensor(t), freeze=True)))


def counterfactual_variance_loss(mu: Tensor, sigma: Tensor, head0: OutcomeHead,
                                 head1: OutcomeHead, t: np.ndarray,
                                 eps: np.ndarray) -> Tensor:
    """Negative mean unbiased variance of counterfactual predictions over
    eps.shape[0] representation samples; heads are frozen so only the encoder
    is regularized."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 3:
        raise D.ShapeError("counterfactual_variance_loss",
                           f"eps must be (k, batch, repr_dim), got {eps.shape}")
    k = eps.shape[0]
    if k < 2:
        raise DegenerateBatchError("variance needs at least 2 representation samples")
    t_col = D.as_tensor(np.asarray(t, dtype=np.float64).reshape(-1, 1))
    cf_is_head0 = t_col                      # treated rows ask the control head
    cf_is_head1 = D.sub(D.as_tensor(1.0), t_col)
    preds = []
    for i in range(k):
        z = reparameterize(mu, sigma, eps[i])
        p0 = head0.predict(z, freeze=True)
        p1 = head1.predict(z, freeze=True)
        preds.append(D.add(D.mul(cf_is_head0, p0), D.mul(cf_is_head1, p1)))
    total = preds[0]
    for p in preds[1:]:
        total = D.add(total, p)
    mean_pred = D.mul(total, D.as_tensor(1.0 / k))
    ss = D.square(D.sub(preds[0], mean_pred))
    for p in preds[1:]:
        ss = D.add(ss, D.square(D.sub(p, mean_pred)))
    var_rows = D.mul(ss, D.as_tensor(1.0 / (k - 1)))
    return D.neg(D.mean(var_rows))


def group_weights(t: np.ndarray, group: int,
                  scores: np.ndarray | None = None) -> np.ndarray:
    """Row weights selecting one treatment group.

    Without scores the in-group weight is 1. With clipped propensity scores
    s(t=1|x) the weight is the empirical batch marginal p(t=group) divided by
    the score of the observed group.
    """
    t = np.asarray(t)
    mask = (t == group).astype(np.float64)
    if scores is None:
        return mask
    p_group = float(mask.mean())
    s_group = scores if group == 1 else 1.0 - scores
    return mask * (p_group / s_group)


def total_objective(model: CibModel, x: np.ndarray, t: np.ndarray, y: np.ndarray,
                    hyper: Hyper, eps: np.ndarray, eps_cf: np.ndarray | None,
                    deterministic: bool = False) -> tuple[Tensor, LossReport]:
    """Assemble the full objective on one batch.

    Returns the maximization-scale total as a graph node plus the per-term
    report. ``eps`` is one noise draw per row; ``eps_cf`` holds the draws for
    the variance term (ignored when lambda_v is zero).
    """
    t = np.asarray(t)
    if not ((t == 0).any() and (t == 1).any()):
        raise DegenerateBatchError("batch must contain both treatment groups")
    y_col = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    x_in = D.as_tensor(np.asarray(x, dtype=np.float64))
    y_in = D.as_tensor(y_col)

    mu, sigma = model.encoder.encode(x_in)
    z = mu if deterministic else reparameterize(mu, sigma, eps)

    scores = None
    if model.propensity is not None:
        scores = model.propensity.probability(x_in)
    l0 = expressiveness_loss(model.head0, z, y_in, group_weights(t, 0, scores))
    l1 = expressiveness_loss(model.head1, z, y_in, group_weights(t, 1, scores))
    lc = compression_loss(mu, sigma, model.prior)
    if hyper.lambda_m != 0.0:
        lm = disentangle_loss(model.critic, x_in, z, t)
    else:
        lm = D.as_tensor(0.0)
    if hyper.lambda_v != 0.0 and not deterministic:
        if eps_cf is None:
            raise ValueError("eps_cf required when lambda_v is nonzero")
        lv = counterfactual_variance_loss(mu, sigma, model.head0, model.head1,
                                          t, eps_cf)
    else:
        lv = D.as_tensor(0.0)

    total = D.add(l0, l1)
    total = D.sub(total, D.mul(D.as_tensor(float(hyper.beta)), lc))
    total = D.add(total, D.mul(D.as_tensor(float(hyper.lambda_m)), lm))
    total = D.add(total, D.mul(D.as_tensor(float(hyper.lambda_v)), lv))

    report = LossReport(l0=l0.item(), l1=l1.item(), lc=lc.item(), lm=lm.item(),
                        lv=lv.item(), total=total.item())
    return total, report
