import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gabornet import tensor as T
from gabornet.checkpoint import load_checkpoint
from gabornet.config import FreeAdvConfig, RegConfig, TrainConfig
from gabornet.data import synthetic_bars
from gabornet.gabor import GaborFamily
from gabornet.models import build_gabor_lenet, build_lenet, build_model, build_tiny_cnn
from gabornet.spectral import family_bound
from gabornet.tensor import Tensor
from gabornet.training import (TrainingDiverged, cap_sigmas, decays, fit, free_adv_fit, lr_at,
                               regularized_loss, sgd_step, update_perturbation)


@pytest.fixture(scope="module")
def bars():
    return synthetic_bars(512, 4, seed=0)


# ------------------------------------------------------------------ architectures

def test_lenet_parameter_count():
    assert build_lenet(0).num_params() == 61_706


def test_gabor_lenet_first_layer_count():
    model = build_gabor_lenet(0)
    first = model.layer("gabor1").params()
    assert sum(t.size for t in first.values()) == 126
    assert model.num_params() == 61_706 - 156 + 126


@pytest.mark.parametrize("arch", ["lenet", "lenet_gabor", "tiny_cnn"])
def test_zero_input_gives_finite_logits(arch):
    model = build_model(arch, 0)
    with T.no_grad():
        out = model.forward(Tensor(np.zeros((2, 1, 28, 28))))
    assert out.shape == (2, 10) and np.isfinite(out.data).all()


@pytest.mark.parametrize("arch", ["lenet", "lenet_gabor", "tiny_cnn"])
def test_registry_names_unique(arch):
    names = list(build_model(arch, 0).params())
    assert len(names) == len(set(names))


def test_unknown_architecture():
    with pytest.raises(ValueError):
        build_model("alexnet")


# ------------------------------------------------------------------ losses

def test_reg_none_returns_ce():
    ce = Tensor(1.25)
    assert regularized_loss(ce, [], RegConfig("none")) is ce


def _fams(*sigmas):
    return [GaborFamily.from_values(s, 1.0, 1.0, 0.0, [1.0]) for s in sigmas]


def test_reg_sigma2_example():
    loss = regularized_loss(Tensor(1.0), _fams(1.0, 2.0), RegConfig("sigma2", beta=0.1))
    assert loss.item() == pytest.approx(0.5, abs=1e-15)


def test_reg_tanh_zero_sigma():
    assert regularized_loss(Tensor(0.8), _fams(0.0), RegConfig("tanh", 1e-3, 3.0)).item() == 0.8


def test_reg_needs_families():
    with pytest.raises(ValueError):
        regularized_loss(Tensor(1.0), [], RegConfig("sigma2"))


@given(st.floats(-5, 5).filter(lambda s: abs(s) > 1e-3), st.floats(1e-4, 1.0), st.sampled_from(["sigma2", "tanh"]))
def test_penalty_gradient_pushes_sigma_outward(sigma, beta, mode):
    fams = _fams(sigma)
    with T.Tape() as tape:
        tape.backward(regularized_loss(Tensor(0.0), fams, RegConfig(mode, beta, 3.0)))
    g = fams[0].sigma.grad
    # Descent moves sigma along -g; that must increase |sigma|.
    assert np.sign(-g) == np.sign(sigma)
    if mode == "sigma2":
        assert g == pytest.approx(-2 * beta * sigma, rel=1e-12)


@pytest.mark.parametrize("kw", [dict(mode="l1"), dict(beta=-1.0), dict(beta=math.inf),
                                dict(mode="tanh", mu=math.nan)])
def test_reg_config_validation(kw):
    with pytest.raises(ValueError):
        RegConfig(**kw)


# ------------------------------------------------------------------ optimizer

def _param(v, g):
    t = Tensor(np.array([v]), requires_grad=True)
    t.grad = np.array([g])
    return t


def test_sgd_plain_step():
    p = {"fc.weight": _param(1.0, 1.0)}
    sgd_step(p, {}, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p["fc.weight"].data[0] == pytest.approx(0.9)


def test_momentum_second_step_is_1_9x():
    p = {"fc.weight": _param(0.0, 1.0)}
    vel = {}
    sgd_step(p, vel, 0.1, 0.9, 0.0)
    first = -p["fc.weight"].data[0]
    sgd_step(p, vel, 0.1, 0.9, 0.0)
    second = -p["fc.weight"].data[0] - first
    assert second / first == pytest.approx(1.9)


@pytest.mark.parametrize("name", ["gabor1.f0.sigma", "gabor1.f0.gamma", "gabor1.f0.lambda",
                                  "gabor1.f0.psi", "fc.bias"])
def test_weight_decay_skips_shape_parameters_and_biases(name):
    p = {name: _param(1.5, 0.0)}
    sgd_step(p, {}, 0.1, 0.9, 0.5)
    assert p[name].data[0] == 1.5 and not decays(name)


@pytest.mark.parametrize("name", ["conv1.weight", "gabor1.f0.alpha", "gabor1.pointwise.weight"])
def test_weight_decay_applies_to_weights_and_alpha(name):
    p = {name: _param(1.0, 0.0)}
    sgd_step(p, {}, 0.1, 0.0, 0.5)
    assert p[name].data[0] == pytest.approx(0.95)


def test_sgd_missing_gradient():
    t = Tensor(np.ones(1), requires_grad=True)
    t.grad = None
    with pytest.raises(ValueError):
        sgd_step({"w.weight": t}, {}, 0.1, 0.9, 0.0)


def test_lr_schedule():
    cfg = TrainConfig(epochs=90, milestones=(30, 60))
    assert lr_at(0, cfg) == 1e-2
    assert lr_at(29, cfg) == 1e-2
    assert lr_at(30, cfg) == pytest.approx(1e-3)
    assert lr_at(60, cfg) == pytest.approx(1e-4)


@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(milestones=(15, 10)), dict(batch_size=0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_sigma_cap_clips_with_warning():
    fams = _fams(30.0, -40.0, 2.0)
    with pytest.warns(RuntimeWarning):
        cap_sigmas(fams, 25.0)
    assert [f.sigma.item() for f in fams] == [25.0, -25.0, 2.0]


# ------------------------------------------------------------------ training loop

def test_zero_epochs_writes_untrained_checkpoint(bars, tmp_path):
    model = build_tiny_cnn(3)
    before = {k: v.data.copy() for k, v in model.params().items()}
    log = fit(model, bars, TrainConfig(epochs=0, seed=3), test=bars, out_dir=tmp_path)
    assert log.rows == []
    assert (tmp_path / "metrics.csv").read_text() == \
        "epoch,lr,train_loss,train_acc,test_acc,sigma_0,lipschitz_bound_0\n"
    loaded, _, seed = load_checkpoint(tmp_path / "final.ckpt")
    assert seed == 3
    for k, v in loaded.params().items():
        assert np.array_equal(v.data, before[k])
    assert (tmp_path / "best.ckpt").exists()


def test_same_seed_bitwise_identical(bars):
    runs = []
    for _ in range(2):
        model = build_tiny_cnn(5)
        log = fit(model, bars.head(256), TrainConfig(epochs=2, seed=5))
        runs.append((model, log.csv()))
    assert runs[0][1] == runs[1][1]
    for (k, a), b in zip(runs[0][0].params().items(), runs[1][0].params().values()):
        assert np.array_equal(a.data, b.data), k


def test_tiny_cnn_learns_synthetic_bars(bars):
    log = fit(build_tiny_cnn(0), bars, TrainConfig(epochs=30, seed=0))
    train_acc = [row[3] for row in log.rows]
    assert max(train_acc) >= 90.0
    # Frozen from the first run: 90% is first crossed after epoch index 8.
    assert next(i for i, a in enumerate(train_acc) if a >= 90.0) == 8


def test_metrics_columns_and_logged_bound(bars, tmp_path):
    model = build_tiny_cnn(1)
    fit(model, bars.head(128), TrainConfig(epochs=2, seed=1), test=bars.head(64), out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_acc,test_acc,sigma_0,lipschitz_bound_0"
    last = lines[-1].split(",")
    assert all(len(v.split(".")[1]) == 6 for v in last[1:])
    fam = model.families()[0]
    assert float(last[5]) == pytest.approx(fam.sigma.item(), abs=5e-7)
    assert float(last[6]) == pytest.approx(family_bound(fam, model.gabor_layers()[0].grid), abs=5e-7)


def test_divergence_reports_epoch_and_batch(bars):
    model = build_tiny_cnn(0)
    with pytest.raises(TrainingDiverged) as info:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit(model, bars.head(256), TrainConfig(lr=1e150, epochs=3, seed=0, sigma_cap=None))
    assert info.value.epoch >= 0 and info.value.batch >= 0
    assert isinstance(info.value, T.NonFiniteError)


def test_fit_rejects_empty_dataset(bars):
    with pytest.raises(ValueError):
        fit(build_tiny_cnn(0), bars.head(0), TrainConfig(epochs=1))


# ------------------------------------------------------------------ free adversarial training

def test_free_adv_degenerate_equals_fit(bars):
    data = bars.head(256)
    a, b = build_tiny_cnn(2), build_tiny_cnn(2)
    log_a = fit(a, data, TrainConfig(epochs=2, seed=2))
    log_b = free_adv_fit(b, data, TrainConfig(epochs=2, seed=2), FreeAdvConfig(replays=1, epsilon=0.0))
    assert log_a.csv() == log_b.csv()
    for x, y in zip(a.params().values(), b.params().values()):
        assert np.array_equal(x.data, y.data)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.99), st.integers(1, 6))
def test_perturbation_stays_in_ball(seed, eps, steps):
    g = np.random.default_rng(seed)
    delta = np.zeros((4, 1, 3, 3))
    for _ in range(steps):
        delta = update_perturbation(delta, g.normal(size=delta.shape), eps)
        assert np.abs(delta).max() <= eps


def test_free_adv_epoch_accounting(bars):
    log = free_adv_fit(build_tiny_cnn(0), bars.head(128), TrainConfig(epochs=5, seed=0),
                       FreeAdvConfig(replays=2, epsilon=0.1))
    assert len(log.rows) == 3
    assert [r[1] for r in log.rows] == [lr_at(0, TrainConfig()), lr_at(2, TrainConfig()), lr_at(4, TrainConfig())]


@pytest.mark.parametrize("kw", [dict(replays=0), dict(epsilon=1.0), dict(epsilon=-0.1)])
def test_free_adv_config_validation(kw):
    with pytest.raises(ValueError):
        FreeAdvConfig(**kw)
