"""Metrics, per-sample uncertainty, rejection curves, sanity baselines, and
the ablation runner."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as D
from . import objective as O
from .data import ObservationalDataset
from .nets import CibModel
from .seeding import stream
from .trainer import TrainConfig, build_and_fit


class MetricError(ValueError):
    pass


def ite_prediction(model: CibModel, x: np.ndarray, samples: int = 100,
                   rng: np.random.Generator | None = None,
                   deterministic: bool = False) -> np.ndarray:
    """Predicted effect per row: mean over posterior samples of head1 - head0.

    Deterministic mode evaluates at z = mu and ignores the sample count.
    """
    if samples < 1:
        raise MetricError("samples must be >= 1")
    x_in = D.as_tensor(np.asarray(x, dtype=np.float64))
    mu, sigma = model.encoder.encode(x_in)
    if deterministic:
        draws = [mu]
    else:
        if rng is None:
            raise MetricError("stochastic prediction needs an rng")
        dz = model.config.repr_dim
        draws = [O.reparameterize(mu, sigma, rng.standard_normal((x_in.shape[0], dz)))
                 for _ in range(samples)]
    acc = np.zeros(x_in.shape[0])
    for z in draws:
        p1 = model.head1.predict(z).data.ravel()
        p0 = model.head0.predict(z).data.ravel()
        acc += p1 - p0
    return acc / len(draws)


def factual_prediction(model: CibModel, x: np.ndarray, t: np.ndarray,
                       samples: int = 100,
                       rng: np.random.Generator | None = None,
                       deterministic: bool = False) -> np.ndarray:
    """Predicted factual outcome per row under the observed treatment."""
    x_in = D.as_tensor(np.asarray(x, dtype=np.float64))
    mu, sigma = model.encoder.encode(x_in)
    if deterministic:
        draws = [mu]
    else:
        if rng is None:
            raise MetricError("stochastic prediction needs an rng")
        dz = model.config.repr_dim
        draws = [O.reparameterize(mu, sigma, rng.standard_normal((x_in.shape[0], dz)))
                 for _ in range(samples)]
    t = np.asarray(t)
    acc = np.zeros(x_in.shape[0])
    for z in draws:
        p1 = model.head1.predict(z).data.ravel()
        p0 = model.head0.predict(z).data.ravel()
        acc += np.where(t == 1, p1, p0)
    return acc / len(draws)


def counterfactual_prediction(model: CibModel, x: np.ndarray, t: np.ndarray,
                              samples: int = 100,
                              rng: np.random.Generator | None = None,
                              deterministic: bool = False) -> np.ndarray:
    """Predicted outcome per row under the unobserved treatment."""
    return factual_prediction(model, x, 1 - np.asarray(t), samples, rng,
                              deterministic)


def sqrt_pehe(tau_true: np.ndarray, tau_hat: np.ndarray) -> float:
    """Root mean squared error between true and predicted effects."""
    tau_true = np.asarray(tau_true, dtype=np.float64)
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    if tau_true.shape != tau_hat.shape:
        raise MetricError(f"length mismatch: {tau_true.shape} vs {tau_hat.shape}")
    if tau_true.size == 0:
        raise MetricError("need at least one row")
    return float(np.sqrt(np.mean(np.square(tau_true - tau_hat))))


def ate_error(tau_true: np.ndarray, tau_hat: np.ndarray) -> float:
    tau_true = np.asarray(tau_true, dtype=np.float64)
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    if tau_true.shape != tau_hat.shape:
        raise MetricError(f"length mismatch: {tau_true.shape} vs {tau_hat.shape}")
    return float(abs(tau_true.mean() - tau_hat.mean()))


def policy_risk_detailed(y_f: np.ndarray, t: np.ndarray, e: np.ndarray,
                         tau_hat: np.ndarray) -> tuple[float, bool]:
    """Estimated risk of treating according to the predicted effect.

    The policy treats when tau_hat >= 0 (ties treat). Estimated over the
    randomized subset: value-weighted means of factual outcomes where the
    observed treatment matches the policy. When a policy-and-treatment cell
    is empty but its policy share is not, the group mean over the randomized
    treatment arm substitutes and the fallback flag is set.
    """
    y_f = np.asarray(y_f, dtype=np.float64)
    t = np.asarray(t)
    e = np.asarray(e)
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    if not (y_f.shape == t.shape == e.shape == tau_hat.shape):
        raise MetricError("policy_risk inputs must share one length")
    in_e = e == 1
    n_e = int(in_e.sum())
    if n_e == 0:
        raise MetricError("randomized subset is empty")
    policy_treat = tau_hat >= 0

    fallback = False

    def term(policy_mask: np.ndarray, group: int) -> float:
        nonlocal fallback
        share_mask = policy_mask & in_e
        share = share_mask.sum() / n_e
        if share == 0.0:
            return 0.0
        cell = share_mask & (t == group)
        if cell.sum() == 0:
            fallback = True
            cell = in_e & (t == group)
            if cell.sum() == 0:
                return 0.0
        return float(y_f[cell].mean()) * float(share)

    value = 1.0 - (term(policy_treat, 1) + term(~policy_treat, 0))
    return float(value), fallback


def policy_risk(y_f: np.ndarray, t: np.ndarray, e: np.ndarray,
                tau_hat: np.ndarray) -> float:
    return policy_risk_detailed(y_f, t, e, tau_hat)[0]


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


def auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic; ties count half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise MetricError("labels and scores must share one length")
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n1 == 0 or n0 == 0:
        raise MetricError("auc needs both classes present")
    ranks = _midranks(scores)
    u = ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def uncertainty_score(model: CibModel, x: np.ndarray) -> np.ndarray:
    """Row-wise KL between the encoder posterior and the learned marginal prior.

    Large values flag covariates the encoder considers out of distribution.
    """
    x_in = D.as_tensor(np.asarray(x, dtype=np.float64))
    mu, sigma = model.encoder.encode(x_in)
    return O.gaussian_kl_rows(mu, sigma, model.prior).data.ravel()


def rejection_curve(metric_fn, uncertainty: np.ndarray, ks, rng: np.random.Generator):
    """Metric after dropping the top-k fraction by uncertainty, per k.

    ``metric_fn`` receives the kept row indices. Each point also carries a
    random-drop control with the same drop count. Fractions must be strictly
    increasing inside [0, 1).
    """
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    ks = [float(k) for k in ks]
    if any(not 0.0 <= k < 1.0 for k in ks):
        raise MetricError("rejection fractions must lie in [0, 1)")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise MetricError("rejection fractions must be strictly increasing")
    n = len(uncertainty)
    by_uncertainty = np.argsort(-uncertainty, kind="stable")
    points = []
    for k in ks:
        drop = int(np.ceil(k * n))
        if drop >= n:
            raise MetricError(f"k={k} drops every row")
        keep = np.sort(by_uncertainty[drop:])
        keep_random = np.sort(rng.permutation(n)[drop:])
        points.append({"k": k, "metric": float(metric_fn(keep)),
                       "control": float(metric_fn(keep_random))})
    return points


def ols2_baseline(train: ObservationalDataset):
    """Separate least-squares outcome models per treatment group.

    Returns a function mapping covariates to predicted effects. Falls back to
    a tiny ridge when a group is too small or its normal equations are
    singular.
    """
    coefs = []
    for group in (0, 1):
        mask = train.t == group
        xg = train.x[mask]
        yg = train.y_f[mask]
        design = np.hstack([np.ones((xg.shape[0], 1)), xg])
        gram = design.T @ design
        rhs = design.T @ yg
        use_ridge = xg.shape[0] <= train.d_x
        if not use_ridge:
            try:
                coef = np.linalg.solve(gram, rhs)
                if not np.isfinite(coef).all():
                    use_ridge = True
            except np.linalg.LinAlgError:
                use_ridge = True
        if use_ridge:
            warnings.warn(f"group {group}: singular or underdetermined normal "
                          f"equations, using ridge fallback")
            coef = np.linalg.solve(gram + 1e-6 * np.eye(gram.shape[0]), rhs)
        coefs.append(coef)

    def tau_hat(x: np.ndarray) -> np.ndarray:
        design = np.hstack([np.ones((x.shape[0], 1)), np.asarray(x, dtype=np.float64)])
        return design @ coefs[1] - design @ coefs[0]

    return tau_hat


@dataclass
class EvalReport:
    """Metrics for one split; fields stay None when their ground truth is absent."""

    in_sample: bool
    sqrt_pehe: float | None = None
    ate_error: float | None = None
    policy_risk: float | None = None
    policy_risk_fallback: bool = False
    auc: float | None = None
    factual_rmse: float | None = None
    per_sample_kl: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rejection_curve: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        out = {"inSample": self.in_sample}
        for key, val in (("sqrtPehe", self.sqrt_pehe), ("ateError", self.ate_error),
                         ("policyRisk", self.policy_risk), ("auc", self.auc),
                         ("factualRmse", self.factual_rmse)):
            if val is not None:
                out[key] = val
        if self.policy_risk is not None:
            out["policyRiskFallback"] = self.policy_risk_fallback
        out["perSampleKl"] = [float(v) for v in self.per_sample_kl]
        out["rejectionCurve"] = self.rejection_curve
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, sort_keys=True)
            fh.write("\n")


def write_curve_csv(path, curves: dict[str, list[dict]]) -> None:
    """Rejection curves as CSV rows (split, k, metric, controlMetric)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "k", "metric", "controlMetric"])
        for split_name, points in curves.items():
            for p in points:
                writer.writerow([split_name, repr(p["k"]), repr(p["metric"]),
                                 repr(p["control"])])


def evaluate_split(model: CibModel, ds: ObservationalDataset, in_sample: bool,
                   samples: int = 100, seed: int = 0,
                   reject_ks=None) -> EvalReport:
    """Full metric report on one split; which metrics appear depends on the
    ground truth the dataset carries."""
    rng = stream(seed, "eval-noise")
    tau_hat = ite_prediction(model, ds.x, samples=samples, rng=rng)
    report = EvalReport(in_sample=in_sample)
    report.per_sample_kl = uncertainty_score(model, ds.x)

    tau_true = ds.true_ite()
    if tau_true is not None:
        report.sqrt_pehe = sqrt_pehe(tau_true, tau_hat)
        report.ate_error = ate_error(tau_true, tau_hat)
    if ds.e is not None and (ds.e == 1).any():
        value, fallback = policy_risk_detailed(ds.y_f, ds.t, ds.e, tau_hat)
        report.policy_risk = value
        report.policy_risk_fallback = fallback
    if ds.outcome_kind == "binary" and ds.y_cf is not None:
        cf_scores = counterfactual_prediction(model, ds.x, ds.t, samples=samples,
                                              rng=stream(seed, "eval-noise-cf"))
        report.auc = auc(ds.y_cf.astype(np.int64), cf_scores)
    yf_hat = factual_prediction(model, ds.x, ds.t, samples=samples,
                                rng=stream(seed, "eval-noise-f"))
    report.factual_rmse = float(np.sqrt(np.mean(np.square(ds.y_f - yf_hat))))

    if reject_ks is not None:
        if tau_true is not None:
            metric_fn = lambda keep: sqrt_pehe(tau_true[keep], tau_hat[keep])
        else:
            metric_fn = lambda keep: float(
                np.sqrt(np.mean(np.square(ds.y_f[keep] - yf_hat[keep]))))
        report.rejection_curve = rejection_curve(
            metric_fn, report.per_sample_kl, reject_ks, stream(seed, "eval-reject"))
    return report


ABLATION_ARMS = (
    ("cib", {}),
    ("no_migdr", {"lambda_m": 0.0}),
    ("no_cpvr", {"lambda_v": 0.0}),
    ("no_regularizer", {"lambda_m": 0.0, "lambda_v": 0.0}),
)


def ablation_run(model_config, train: ObservationalDataset,
                 valid: ObservationalDataset, test: ObservationalDataset,
                 base_cfg: TrainConfig, samples: int = 100) -> dict:
    """Four training runs differing only in which regularizers are zeroed.

    All arms share the seed, data splits, and initialization stream, so the
    rows are directly comparable.
    """
    table = {}
    for name, overrides in ABLATION_ARMS:
        cfg = replace(base_cfg, **overrides)
        result = build_and_fit(model_config, train, valid, cfg)
        in_report = evaluate_split(result.model, train.concat(valid),
                                   in_sample=True, samples=samples,
                                   seed=cfg.seed)
        out_report = evaluate_split(result.model, test, in_sample=False,
                                    samples=samples, seed=cfg.seed)
        table[name] = {"in": in_report.as_dict(), "out": out_report.as_dict(),
                       "config": {"beta": cfg.beta, "lambda_m": cfg.lambda_m,
                                  "lambda_v": cfg.lambda_v}}
    return table
