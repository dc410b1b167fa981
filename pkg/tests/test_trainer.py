import math

import numpy as np
import pytest

from cecfair import autodiff as ad
from cecfair.autodiff import Var
from cecfair.data import SyntheticConfig, generate_synthetic, standardize, train_test_split
from cecfair.matcher import PairedDataset, build_index, compute_baselines, match, pair
from cecfair.model import MLPModel, grad_params_of_scalar, logits_graph
from cecfair.trainer import (
    TrainConfig,
    TrainHistory,
    TrainingData,
    TrainingDiverged,
    Variant,
    loss_cec,
    loss_cec_graph,
    loss_eo,
    loss_eo_graph,
    loss_pred,
    loss_pred_graph,
    train,
)

from conftest import fd_grad, linear_model, rel_err


def _logits(values):
    return Var(np.asarray(values, dtype=np.float64))


# ------------------------------------------------------------ L_pred


def test_bce_at_zero_logit():
    assert loss_pred_graph(_logits([0.0]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_saturated():
    assert loss_pred_graph(_logits([20.0, -20.0]), [1, 0]).item() < 1e-8


def test_bce_matches_naive(rng):
    z = rng.normal(size=50) * 3
    y = rng.integers(0, 2, 50)
    p = 1 / (1 + np.exp(-z))
    naive = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(loss_pred_graph(_logits(z), y).item() - naive) < 1e-9


def test_bce_extreme_logits_finite():
    assert np.isfinite(loss_pred_graph(_logits([800.0, -800.0]), [0, 1]).item())


# ------------------------------------------------------------ L_EO


def test_eo_constant_logit_zero():
    y = np.array([0, 1, 0, 1, 1, 0])
    a = np.array([0, 0, 1, 1, 0, 1])
    val, flags = loss_eo_graph(_logits(np.full(6, 0.3)), y, a)
    assert val.item() == 0.0 and flags == ()


def test_eo_arithmetic_example():
    # positives: group 0 at p=0.8, group 1 at p=0.6; negatives equal
    p = np.array([0.8, 0.8, 0.6, 0.6, 0.3, 0.3])
    z = np.log(p / (1 - p))
    y = np.array([1, 1, 1, 1, 0, 0])
    a = np.array([0, 0, 1, 1, 0, 1])
    val, _ = loss_eo_graph(_logits(z), y, a)
    assert val.item() == pytest.approx(0.04, abs=1e-12)


def test_eo_two_pass_oracle(rng):
    z = rng.normal(size=64)
    y = rng.integers(0, 2, 64)
    a = rng.integers(0, 2, 64)
    p = 1 / (1 + np.exp(-z))

    def rate(yy, aa):
        s, c = 0.0, 0
        for pi, yi, ai in zip(p, y, a):
            if yi == yy and ai == aa:
                s += pi
                c += 1
        return s / c

    expect = (rate(1, 0) - rate(1, 1)) ** 2 + (rate(0, 0) - rate(0, 1)) ** 2
    val, _ = loss_eo_graph(_logits(z), y, a)
    assert abs(val.item() - expect) < 1e-12


def test_eo_missing_cell_flagged():
    val, flags = loss_eo_graph(_logits([0.1, 0.5, -0.3]), np.array([1, 1, 0]), np.array([0, 1, 0]))
    assert "empty_fpr_cell" in flags and math.isfinite(val.item())


def test_eo_value_helper_uses_model():
    m = MLPModel.init(3, (4,), seed=0)
    X = np.random.default_rng(0).normal(size=(20, 3))
    y = np.arange(20) % 2
    a = (np.arange(20) // 2) % 2
    val, _ = loss_eo_graph(logits_graph(m, [Var(p) for p in m.parameters()], X), y, a)
    assert loss_eo(m, X, y, a) == val.item()
    assert loss_pred(m, X, y) > 0


# ------------------------------------------------------------ L_CEC


def _paired(x, xc, b):
    n = len(x)
    return PairedDataset(np.arange(n), np.arange(n), np.asarray(x, float), np.asarray(xc, float),
                         np.zeros(n, int), np.zeros(n, int), np.asarray(b, float), np.zeros(n))


def test_cec_loss_identity_pairs_zero():
    m = MLPModel.init(3, (5,), seed=1)
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert loss_cec(m, _paired(x, x, np.zeros((4, 3)))) == 0.0


def test_cec_loss_antipodal_is_one():
    m = linear_model([1.0, 1.0])
    v = loss_cec(m, _paired([[1.0, 1.0]], [[-1.0, -1.0]], [[0.0, 0.0]]), 4)
    assert v == pytest.approx(1.0, abs=1e-7)


def test_cec_loss_empty_batch():
    assert loss_cec(linear_model([1.0]), _paired(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 1)))) == 0.0


def test_cec_loss_gradient_four_unit_net(rng):
    m = MLPModel.init(3, (4,), seed=6, dropout=0.0)
    x, xc, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3)) * 0.3
    params = m.variables()
    g = grad_params_of_scalar(params, loss_cec_graph(m, params, x, xc, b, 16))
    g_fd = fd_grad(lambda p: loss_cec(m.with_flat_parameters(p), _paired(x, xc, b), 16), m.flat_parameters())
    assert rel_err(g, g_fd) < 1e-4


def _total_graph(m, params, X, y, a, xc, b, lam_eo, lam_cec):
    z = logits_graph(m, params, X)
    eo, _ = loss_eo_graph(z, y, a)
    cec = loss_cec_graph(m, params, X, xc, b, 8)
    return ad.add(ad.add(loss_pred_graph(z, y), ad.mul(eo, lam_eo)), ad.mul(cec, lam_cec))


@pytest.mark.parametrize("lams", [(1.0, 1.0), (0.5, 2.0), (0.0, 5.0)])
def test_total_loss_gradient_small_net(lams, rng):
    m = MLPModel.init(4, (5, 3), seed=2, dropout=0.0)
    X = rng.normal(size=(12, 4))
    y = np.arange(12) % 2
    a = (np.arange(12) // 2) % 2
    xc = X + rng.normal(size=X.shape) * 0.5
    b = np.zeros_like(X) + 0.1
    params = m.variables()
    g = grad_params_of_scalar(params, _total_graph(m, params, X, y, a, xc, b, *lams))

    def value(p):
        mm = m.with_flat_parameters(p)
        return _total_graph(mm, [Var(q) for q in mm.parameters()], X, y, a, xc, b, *lams).item()

    assert rel_err(g, fd_grad(value, m.flat_parameters())) < 1e-4


# ------------------------------------------------------------ config


def test_variants_force_lambdas():
    base = dict(lambda_eo=2.0, lambda_cec=3.0)
    assert TrainConfig(**base, variant=Variant.PRED_ONLY).effective_lambdas == (0.0, 0.0)
    assert TrainConfig(**base, variant=Variant.PRED_EO).effective_lambdas == (2.0, 0.0)
    assert TrainConfig(**base, variant=Variant.PRED_CEC).effective_lambdas == (0.0, 3.0)
    assert TrainConfig(**base, variant=Variant.FULL).effective_lambdas == (2.0, 3.0)


def test_config_round_trip_and_validation():
    c = TrainConfig(lambda_eo=0.5, epochs=3, variant=Variant.PRED_CEC, hidden=(8, 4))
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        TrainConfig(lambda_eo=-1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


# ------------------------------------------------------------ training loop


def _setup(n=400, seed=0):
    ds = standardize(train_test_split(generate_synthetic(SyntheticConfig(n=n, seed=seed)), 0.2, seed=seed))
    tr = ds.train()
    cmap = match(build_index(tr), tr)
    bl = compute_baselines(tr)
    return tr, cmap, bl, TrainingData.build(tr, cmap, bl)


SMALL = dict(hidden=(16, 8), epochs=3, batch_size=32)


def test_training_deterministic():
    _, _, _, data = _setup()
    c = TrainConfig(**SMALL, seed=4)
    m1, h1 = train(data, c)
    m2, h2 = train(data, c)
    assert np.array_equal(m1.flat_parameters(), m2.flat_parameters())
    assert [b.total for b in h1.batches] == [b.total for b in h2.batches]


def test_zero_lambdas_full_equals_pred_only():
    _, _, _, data = _setup()
    full = TrainConfig(**SMALL, seed=1, lambda_eo=0.0, lambda_cec=0.0, variant=Variant.FULL)
    pred = TrainConfig(**SMALL, seed=1, variant=Variant.PRED_ONLY)
    m1, _ = train(data, full)
    m2, _ = train(data, pred)
    assert np.array_equal(m1.flat_parameters(), m2.flat_parameters())


def test_loss_composition_every_batch():
    _, _, _, data = _setup()
    c = TrainConfig(**SMALL, lambda_eo=0.7, lambda_cec=1.3, seed=2)
    _, hist = train(data, c)
    for b in hist.batches:
        assert abs(b.total - (b.l_pred + 0.7 * b.l_eo + 1.3 * b.l_cec)) < 1e-10
        assert 0.0 <= b.l_cec <= 1.0


def test_unmonitored_cec_recorded_as_nan_and_monitor_works():
    _, _, _, data = _setup()
    _, h = train(data, TrainConfig(**SMALL, variant=Variant.PRED_EO))
    assert all(math.isnan(b.l_cec) for b in h.batches)
    _, h = train(data, TrainConfig(**SMALL, variant=Variant.PRED_EO, monitor_cec=True))
    assert all(0.0 <= b.l_cec <= 1.0 for b in h.batches)
    for b in h.batches:
        assert abs(b.total - (b.l_pred + b.l_eo)) < 1e-10


def test_unmatched_rows_still_train():
    tr, _, bl, _ = _setup()
    cmap = match(build_index(tr), tr, tau_dist=2.5)
    data = TrainingData.build(tr, cmap, bl)
    assert 0 < data.matched.mean() < 1
    _, h = train(data, TrainConfig(**SMALL))
    assert len(h.batches) == 3 * math.ceil(tr.n / 32)


def test_history_csv(tmp_path):
    _, _, _, data = _setup()
    _, h = train(data, TrainConfig(**SMALL))
    h.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_pred,l_eo,l_cec,total" and len(lines) == 4
    assert isinstance(h, TrainHistory)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_checkpoint():
    _, _, _, data = _setup()
    with pytest.raises(TrainingDiverged) as exc:
        train(data, TrainConfig(**SMALL, lr=1e308, variant=Variant.PRED_ONLY))
    assert np.isfinite(exc.value.model.flat_parameters()).all()


def test_model_serializable(tmp_path):
    _, _, _, data = _setup()
    m, _ = train(data, TrainConfig(**{**SMALL, "epochs": 1}))
    m.save(tmp_path / "m.json")
    back = MLPModel.load(tmp_path / "m.json")
    assert np.array_equal(back.flat_parameters(), m.flat_parameters())
    assert back.dims == m.dims and back.dropout == m.dropout


def test_separable_toy_reaches_high_accuracy():
    r = np.random.default_rng(0)
    n = 2000
    X = r.normal(size=(n, 3))
    X[:, 0] += np.sign(X[:, 0]) * 0.5
    y = (X[:, 0] > 0).astype(int)
    a = r.integers(0, 2, n)
    data = TrainingData(X=np.column_stack([X, a]), y=y, a=a, row_ids=np.arange(n), matched=np.zeros(n, bool),
                        x_cf=np.zeros((n, 4)), baseline=np.zeros((n, 4)))
    m, _ = train(data, TrainConfig(variant=Variant.PRED_ONLY, seed=0))
    assert (m.predict(data.X) == y).mean() > 0.99


def test_cec_pressure_over_seeds():
    """Mean final CEC loss under FULL sits below PRED_ONLY's post-hoc CEC squared."""
    full_vals, pred_vals = [], []
    for seed in range(20):
        tr, cmap, bl, data = _setup(n=300, seed=seed)
        pairs = pair(tr, cmap, bl)
        c = dict(hidden=(16, 8), epochs=4, batch_size=32, lr=3e-3, seed=seed)
        _, hf = train(data, TrainConfig(**c, variant=Variant.FULL))
        mp, _ = train(data, TrainConfig(**c, variant=Variant.PRED_ONLY))
        full_vals.append(hf.epochs[-1].l_cec)
        pred_vals.append(loss_cec(mp, pairs))
    assert np.mean(full_vals) < np.mean(pred_vals)
