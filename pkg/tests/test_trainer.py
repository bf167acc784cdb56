import numpy as np
import pytest

from cib import diffcore as D
from cib import objective as O
from cib import trainer as T
from cib.data import ObservationalDataset, SplitSpec, split, synthesize_benchmark
from cib.nets import ModelConfig
from cib.seeding import stream

from conftest import tiny_model


def linear_dataset(n=400, seed=0, noise=0.05):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1))
    t = (rng.uniform(size=n) < 0.5).astype(np.int64)
    y0 = 0.5 * x[:, 0] + 0.2
    y1 = 0.5 * x[:, 0] + 1.2
    y_f = np.where(t == 1, y1, y0) + noise * rng.standard_normal(n)
    return ObservationalDataset(x=x, t=t, y_f=y_f, mu0=y0, mu1=y1)


def small_config(**kw):
    base = dict(learning_rate=1e-2, max_iterations=60, batch_size=64,
                validate_every=10, early_stop_patience=3, critic_warmup=5,
                beta=0.1, lambda_m=0.1, lambda_v=0.1, seed=0)
    base.update(kw)
    return T.TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        T.TrainConfig(max_iterations=0)
    with pytest.raises(ValueError):
        T.TrainConfig(iteration_unit="minute")
    with pytest.raises(ValueError):
        T.TrainConfig(cpvr_samples=1)


def test_adam_zero_gradient_keeps_parameters():
    p = D.Tensor(np.array([1.0, -2.0]))
    before = p.data.copy()
    opt = T.Adam([p], lr=1e-4)
    opt.step([np.zeros(2)])
    assert np.array_equal(p.data, before)
    assert opt.t == 1


def test_adam_first_step_matches_formula():
    p = D.Tensor(np.array([0.0]))
    opt = T.Adam([p], lr=1e-4)
    g = 0.1
    opt.step([np.array([g])])
    expected = -1e-4 * g / (g + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)
    assert p.data[0] == pytest.approx(-9.999e-5, abs=1e-8)


def test_adam_identical_seeds_identical_trajectories():
    def run():
        rng = stream(9, "init")
        p = D.Tensor(rng.normal(size=(3, 2)))
        opt = T.Adam([p], lr=1e-3)
        g_rng = stream(9, "noise")
        for _ in range(25):
            opt.step([g_rng.normal(size=(3, 2))])
        return p.data

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch_errors():
    p = D.Tensor(np.zeros((2, 2)))
    opt = T.Adam([p], lr=1e-3)
    with pytest.raises(ValueError):
        opt.step([np.zeros(3)])


def test_fit_linear_problem_reaches_low_rmse():
    ds = linear_dataset()
    train, valid, test = split(ds, SplitSpec(seed=1))
    cfg = T.TrainConfig(learning_rate=1e-2, max_iterations=600, batch_size=128,
                        validate_every=50, early_stop_patience=12,
                        beta=0.0, lambda_m=0.0, lambda_v=0.0, seed=2)
    mc = ModelConfig(d_x=1, repr_dim=8, hidden_dims=(16,))
    result = T.build_and_fit(mc, train, valid, cfg)
    model = result.model
    mu, _ = model.encoder.encode(D.Tensor(valid.x))
    pred = np.where(valid.t == 1,
                    model.head1.predict(mu).data.ravel(),
                    model.head0.predict(mu).data.ravel())
    rmse = float(np.sqrt(np.mean((pred - valid.y_f) ** 2)))
    assert rmse < 0.1


def test_training_log_length_and_recombination_identity():
    ds = linear_dataset(n=200, seed=3)
    train, valid, _ = split(ds, SplitSpec(seed=3))
    cfg = small_config(max_iterations=25)
    result = T.build_and_fit(ModelConfig(d_x=1, repr_dim=4, hidden_dims=(8,)),
                             train, valid, cfg)
    assert len(result.log) <= cfg.max_iterations
    for rec in result.log:
        recombined = ((rec["l0"] + rec["l1"]) - cfg.beta * rec["lC"]
                      + cfg.lambda_m * rec["lM"] + cfg.lambda_v * rec["lV"])
        assert rec["total"] == recombined


def test_early_stopping_restores_best_validation_parameters():
    ds = linear_dataset(n=300, seed=4)
    train, valid, _ = split(ds, SplitSpec(seed=4))
    cfg = small_config(max_iterations=120, validate_every=10,
                       early_stop_patience=2, seed=5)
    result = T.build_and_fit(ModelConfig(d_x=1, repr_dim=4, hidden_dims=(8,)),
                             train, valid, cfg)
    recorded = [rec["validLoss"] for rec in result.log if "validLoss" in rec]
    assert result.best_valid == min(recorded)
    assert T.factual_nll(result.model, valid) == result.best_valid


def test_fit_is_deterministic_bit_for_bit():
    ds = synthesize_benchmark(120, 3, 1.0, 0.5, 7)
    train, valid, _ = split(ds, SplitSpec(seed=7))
    mc = ModelConfig(d_x=3, repr_dim=4, hidden_dims=(8,))

    def run():
        result = T.build_and_fit(mc, train, valid, small_config(seed=11,
                                                                max_iterations=20))
        return result.model.snapshot(), result.log

    snap_a, log_a = run()
    snap_b, log_b = run()
    assert all(np.array_equal(a, b) for a, b in zip(snap_a, snap_b))
    assert log_a == log_b


def test_critic_and_main_updates_stay_in_their_lanes():
    # one critic update must leave (encoder, heads, prior) untouched and
    # one main update must leave the critic untouched
    model = tiny_model(seed=11)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 3))
    t = np.array([0, 1] * 6)
    y = rng.normal(size=12)

    main_before = [p.data.copy() for p in model.main_params()]
    opt_critic = T.Adam(model.critic_params(), lr=1e-3)
    mu, sigma = model.encoder.encode(D.Tensor(x))
    z = O.reparameterize(mu, sigma, rng.normal(size=(12, 2)))
    co = O.dv_critic_objective(model.critic, x, z, t, t[rng.permutation(12)])
    opt_critic.step(D.backward(D.neg(co.objective), model.critic_params()))
    assert all(np.array_equal(a, p.data)
               for a, p in zip(main_before, model.main_params()))

    critic_before = [p.data.copy() for p in model.critic_params()]
    opt_main = T.Adam(model.main_params(), lr=1e-3)
    total, _ = O.total_objective(model, x, t, y, O.Hyper(0.1, 0.1, 0.1),
                                 rng.normal(size=(12, 2)),
                                 rng.normal(size=(4, 12, 2)))
    opt_main.step(D.backward(D.neg(total), model.main_params()))
    assert all(np.array_equal(a, p.data)
               for a, p in zip(critic_before, model.critic_params()))


def test_nan_loss_aborts_with_term_name():
    ds = linear_dataset(n=100, seed=5)
    train, valid, _ = split(ds, SplitSpec(seed=5))
    model = tiny_model(seed=6, d_x=1, repr_dim=4, hidden=(8,))
    model.head0.w.data = np.full_like(model.head0.w.data, np.nan)
    with pytest.raises(T.NonFiniteLossError) as err:
        T.fit(model, train, valid, small_config(max_iterations=3))
    assert err.value.term in ("l0", "l1", "total")
    assert err.value.iteration == 1


def test_epoch_iteration_unit_runs_whole_passes():
    ds = linear_dataset(n=100, seed=8)
    train, valid, _ = split(ds, SplitSpec(seed=8))
    cfg = small_config(max_iterations=4, batch_size=16, iteration_unit="epoch")
    result = T.build_and_fit(ModelConfig(d_x=1, repr_dim=4, hidden_dims=(8,)),
                             train, valid, cfg)
    assert len(result.log) == 4


def test_grid_search_single_and_perfect_configs():
    ds = linear_dataset(n=200, seed=9)
    train, valid, _ = split(ds, SplitSpec(seed=9))
    mc = ModelConfig(d_x=1, repr_dim=4, hidden_dims=(8,))
    only = small_config(max_iterations=10, seed=1)
    res = T.grid_search([only], mc, train, valid)
    assert res.best == only

    # a config allowed to actually learn beats one that cannot move
    frozen = small_config(max_iterations=1, learning_rate=1e-12, seed=2)
    learner = small_config(max_iterations=60, learning_rate=1e-2, seed=2,
                           beta=0.0, lambda_m=0.0, lambda_v=0.0)
    res = T.grid_search([frozen, learner], mc, train, valid)
    assert res.best == learner


def test_grid_search_winner_is_order_invariant():
    ds = linear_dataset(n=150, seed=10)
    train, valid, _ = split(ds, SplitSpec(seed=10))
    mc = ModelConfig(d_x=1, repr_dim=4, hidden_dims=(8,))
    rng = np.random.default_rng(13)
    space = [small_config(max_iterations=8, seed=s) for s in (1, 2, 3)]
    winners = set()
    for _ in range(4):
        order = list(rng.permutation(3))
        res = T.grid_search([space[i] for i in order], mc, train, valid)
        winners.add(res.best.sort_key())
    assert len(winners) == 1


def test_default_grid_values_are_constrained():
    base = small_config()
    grid = T.default_grid(base, betas=(0.01, 0.1), lambda_ms=(1.0,),
                          lambda_vs=(10.0,))
    assert len(grid) == 2
    with pytest.raises(ValueError):
        T.default_grid(base, betas=(0.5,))


def test_write_log_jsonl(tmp_path):
    ds = linear_dataset(n=100, seed=12)
    train, valid, _ = split(ds, SplitSpec(seed=12))
    result = T.build_and_fit(ModelConfig(d_x=1, repr_dim=4, hidden_dims=(8,)),
                             train, valid, small_config(max_iterations=5))
    path = tmp_path / "train.log.jsonl"
    result.write_log(path)
    import json
    lines = path.read_text().strip().split("\n")
    assert len(lines) == len(result.log)
    rec = json.loads(lines[0])
    assert {"iter", "l0", "l1", "lC", "lM", "lV", "total"} <= set(rec)
