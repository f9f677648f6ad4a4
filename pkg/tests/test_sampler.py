from dataclasses import replace

import numpy as np
import pytest

import nptl.sampler as sampler
from nptl.datasets import LabeledDataset, gen_gaussian_mixture
from nptl.diagnostics import weighted_mean_moments
from nptl.dirichlet import WeightDraw
from nptl.models import ModelSpec, ParamVector, init_params, weighted_loss
from nptl.optim import OptimizerConfig, TrainingDiverged
from nptl.sampler import (
    AllMembersDiverged,
    PosteriorEnsemble,
    SamplerConfig,
    derive_seed,
    ensemble_baseline,
    finetune,
    l2sp_finetune,
    nptl_objective,
    nptl_sample,
)
from nptl.transfer import PseudoDataset, make_base_measure

SPEC = ModelSpec("mlp", 2, 3, (6,), "swish")
FAST = OptimizerConfig(base_lr=0.05, batch_size=16, epochs=3)


@pytest.fixture(scope="module")
def problem():
    data = gen_gaussian_mixture(3, 2, 60, 2.0, seed=1)
    init = init_params(SPEC, np.random.default_rng(2))
    pseudo = make_base_measure(SPEC, init, data.features)
    return data, init, pseudo


def _mean_model(n, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal(n)
    xt = 0.5 + r.standard_normal(n)
    spec = ModelSpec("linear-regression", 1, 1)
    train = LabeledDataset(np.zeros((n, 1)), x, "mean-model")
    pseudo = PseudoDataset(np.zeros((n, 1)), xt[:, None])
    init = ParamVector.for_spec(spec, np.zeros(2))
    return spec, init, train, pseudo, x, xt


# ---------------------------------------------------------------- objective

def test_objective_train_only(problem):
    data, init, pseudo = problem
    n = len(data)
    draw = WeightDraw(np.ones(n), np.zeros(n))
    expect = weighted_loss(SPEC, init, data.features, data.targets, np.ones(n))
    assert abs(nptl_objective(SPEC, init, data, pseudo, draw) - expect) <= 1e-10


def test_objective_pseudo_only(problem):
    data, init, pseudo = problem
    n = len(data)
    draw = WeightDraw(np.zeros(n), np.ones(n))
    expect = weighted_loss(SPEC, init, pseudo.inputs, pseudo.soft_labels, np.ones(n))
    assert abs(nptl_objective(SPEC, init, data, pseudo, draw) - expect) <= 1e-10


def test_objective_linear_in_draw(problem, rng):
    data, init, pseudo = problem
    n = len(data)
    d1 = WeightDraw(rng.exponential(size=n), rng.exponential(size=n))
    d2 = WeightDraw(rng.exponential(size=n), rng.exponential(size=n))
    both = nptl_objective(SPEC, init, data, pseudo, d1 + d2)
    split = nptl_objective(SPEC, init, data, pseudo, d1) + nptl_objective(SPEC, init, data, pseudo, d2)
    assert abs(both - split) <= 1e-9 * abs(both)


def test_objective_rejects_short_draw(problem):
    data, init, pseudo = problem
    with pytest.raises(ValueError):
        nptl_objective(SPEC, init, data, pseudo, WeightDraw(np.ones(3), np.ones(3)))


# ---------------------------------------------------------------- sampling

def test_single_member_zero_steps_is_init(problem):
    data, init, pseudo = problem
    cfg = SamplerConfig(M=1, alpha=1.0, opt=OptimizerConfig(steps=0))
    ens = nptl_sample(cfg, SPEC, init, data, pseudo)
    assert len(ens) == 1 and ens.members[0].values.tobytes() == init.values.tobytes()


def test_members_never_worse_than_init(problem):
    data, init, pseudo = problem
    ens = nptl_sample(SamplerConfig(M=4, alpha=2.0, L=5, opt=FAST), SPEC, init, data, pseudo)
    for rec in ens.records:
        assert rec.error is None and rec.objective <= rec.initial_objective


def test_members_independent_of_count(problem):
    data, init, pseudo = problem
    a = nptl_sample(SamplerConfig(M=2, alpha=1.0, opt=FAST, master_seed=3), SPEC, init, data, pseudo)
    b = nptl_sample(SamplerConfig(M=4, alpha=1.0, opt=FAST, master_seed=3), SPEC, init, data, pseudo)
    for p, q in zip(a.members, b.members):
        assert p.values.tobytes() == q.values.tobytes()
    assert [r.seed for r in b.records] == [derive_seed(3, 0, m) for m in range(4)]


def test_member_order_independent_of_schedule(problem):
    data, init, pseudo = problem
    cfg = SamplerConfig(M=3, alpha=1.0, opt=FAST, master_seed=5)
    prob = sampler._Problem.build(SPEC, init, data, pseudo)
    forward = [sampler._run_nptl_member(prob, cfg, m)[1] for m in range(3)]
    backward = [sampler._run_nptl_member(prob, cfg, m)[1] for m in (2, 1, 0)][::-1]
    for p, q in zip(forward, backward):
        assert p.values.tobytes() == q.values.tobytes()


def test_deterministic_across_workers(problem):
    data, init, pseudo = problem
    cfg = SamplerConfig(M=4, alpha=1.0, opt=FAST, master_seed=7)
    a = nptl_sample(cfg, SPEC, init, data, pseudo, workers=1)
    b = nptl_sample(cfg, SPEC, init, data, pseudo, workers=2)
    assert all(p.values.tobytes() == q.values.tobytes() for p, q in zip(a.members, b.members))


def test_distinct_seeds_distinct_members(problem):
    data, init, pseudo = problem
    ens = nptl_sample(SamplerConfig(M=2, alpha=1.0, opt=FAST), SPEC, init, data, pseudo)
    assert not np.array_equal(ens.members[0].values, ens.members[1].values)


@pytest.mark.parametrize("blocked", [False, True])
@pytest.mark.parametrize("alpha", [0.0, 1.0, 10.0])
def test_mean_model_moment_oracle(blocked, alpha):
    n, M = 200, 2000
    spec, init, train, pseudo, x, xt = _mean_model(n, seed=int(alpha) + 10 * blocked)
    cfg = SamplerConfig(M=M, alpha=alpha, L=10, blocked=blocked, solver="exact", master_seed=1)
    ens = nptl_sample(cfg, spec, init, train, pseudo)
    theta = np.array([p.values[1] for p in ens.members])
    mean, var = weighted_mean_moments(x, xt, alpha, blocked=blocked, L=10)
    assert abs(theta.mean() - mean) <= 4 * np.sqrt(var / M)
    # the closed form for the non-blocked mean
    assert mean == pytest.approx((x.sum() + alpha / n * xt.sum()) / (n + alpha), rel=1e-12)


def test_exact_solver_needs_linear_model(problem):
    data, init, pseudo = problem
    with pytest.raises(ValueError):
        nptl_sample(SamplerConfig(M=1, solver="exact"), SPEC, init, data, pseudo)


@pytest.mark.parametrize("kw", [dict(M=0), dict(L=0), dict(alpha=-1.0), dict(solver="adam")])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        SamplerConfig(**kw)


# ---------------------------------------------------------------- divergence

@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_all_members_diverged(problem):
    data, init, pseudo = problem
    cfg = SamplerConfig(M=2, opt=OptimizerConfig(base_lr=1e200, epochs=2))
    with pytest.raises(AllMembersDiverged):
        nptl_sample(cfg, SPEC, init, data, pseudo)


def test_some_members_diverged(problem, monkeypatch):
    data, init, pseudo = problem
    real = sampler.sgd_minimize
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise TrainingDiverged(4, float("nan"))
        return real(*args, **kwargs)

    monkeypatch.setattr(sampler, "sgd_minimize", flaky)
    ens = nptl_sample(SamplerConfig(M=3, opt=FAST), SPEC, init, data, pseudo)
    assert len(ens.members) == 2
    assert ens.records[1].error is not None and "step 4" in ens.records[1].error
    assert ens.records[0].error is None and ens.records[2].error is None


# ---------------------------------------------------------------- baselines

def test_ensemble_single_is_plain_finetune(problem):
    data, init, _ = problem
    ens = ensemble_baseline(1, SPEC, init, data, FAST, master_seed=4)
    ref = finetune(SPEC, init, data, FAST, np.random.default_rng(derive_seed(4, 1, 0)))
    assert ens.members[0].values.tobytes() == ref.params.values.tobytes()


def test_ensemble_zero_steps(problem):
    data, init, _ = problem
    ens = ensemble_baseline(3, SPEC, init, data, OptimizerConfig(steps=0), master_seed=0)
    assert all(p == init for p in ens.members)


def test_ensemble_members_differ(problem):
    data, init, _ = problem
    ens = ensemble_baseline(2, SPEC, init, data, FAST, master_seed=0)
    assert not np.array_equal(ens.members[0].values, ens.members[1].values)


def test_ensemble_rejects_zero_count(problem):
    data, init, _ = problem
    with pytest.raises(ValueError):
        ensemble_baseline(0, SPEC, init, data, FAST, master_seed=0)


def test_l2sp_huge_beta_is_plain_finetune(problem):
    data, init, _ = problem
    anchor = init.replace(init.values + 1.0)
    a = l2sp_finetune(SPEC, init, anchor, 1e12, data, FAST, np.random.default_rng(0))
    b = finetune(SPEC, init, data, FAST, np.random.default_rng(0))
    assert np.max(np.abs(a.params.values - b.params.values)) <= 1e-6


def test_l2sp_tiny_beta_pins_anchor():
    spec = ModelSpec("linear-regression", 2, 1)
    empty = LabeledDataset(np.zeros((0, 2)), np.zeros(0), "")
    init = ParamVector.for_spec(spec, [1.0, -2.0, 0.5])
    anchor = ParamVector.for_spec(spec, [0.3, 0.1, -0.4])
    beta = 1e-8
    # constant step of beta / 2 halves the distance to the anchor each step
    opt = OptimizerConfig(base_lr=beta / 2, schedule="constant", momentum=0.0, steps=60)
    out = l2sp_finetune(spec, init, anchor, beta, empty, opt)
    assert np.max(np.abs(out.params.values - anchor.values)) <= 1e-6


def test_l2sp_penalty_monotone_on_quadratic():
    r = np.random.default_rng(0)
    spec = ModelSpec("linear-regression", 3, 1)
    anchor = ParamVector.for_spec(spec, r.standard_normal(4))
    X = r.standard_normal((40, 3))
    # noise-free targets: data and penalty share the minimiser, the anchor
    y = X @ anchor.values[:3] + anchor.values[3]
    data = LabeledDataset(X, y, "")
    beta = 0.05
    A = np.hstack([X, np.ones((40, 1))])
    hess = A.T @ A / 40 + np.eye(4) / (beta * 40)
    lr = 0.5 / np.linalg.eigvalsh(hess).max()
    opt = OptimizerConfig(base_lr=lr, schedule="constant", momentum=0.0, batch_size=40, epochs=50)
    out = l2sp_finetune(spec, anchor.replace(anchor.values + 3.0), anchor, beta, data, opt)
    pen = np.array(out.penalty_history)
    assert len(pen) == 51 and np.all(np.diff(pen) <= 0)


def test_l2sp_rejects_beta(problem):
    data, init, _ = problem
    with pytest.raises(ValueError):
        l2sp_finetune(SPEC, init, init, 0.0, data, FAST)


# ---------------------------------------------------------------- persistence

def test_ensemble_save_load(problem, tmp_path):
    data, init, pseudo = problem
    ens = nptl_sample(SamplerConfig(M=2, opt=FAST), SPEC, init, data, pseudo)
    back = PosteriorEnsemble.load(ens.save(tmp_path / "ens"))
    assert back.spec == SPEC and back.config == ens.config
    assert all(p == q for p, q in zip(back.members, ens.members))
    assert [r.seed for r in back.records] == [r.seed for r in ens.records]


def test_ensemble_load_missing_member(problem, tmp_path):
    data, init, pseudo = problem
    d = nptl_sample(SamplerConfig(M=2, opt=FAST), SPEC, init, data, pseudo).save(tmp_path / "ens")
    (d / "member_0001.npv").unlink()
    with pytest.raises(FileNotFoundError, match="member_0001"):
        PosteriorEnsemble.load(d)


def test_derive_seed_distinct():
    seeds = {derive_seed(0, s, m) for s in range(3) for m in range(100)}
    assert len(seeds) == 300
    assert derive_seed(1, 0, 0) != derive_seed(0, 0, 0)
    assert derive_seed(0, 0, 0) == derive_seed(0, 0, 0)
