import csv

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dipcf import InputError, NumericalError, StateError
from dipcf.core_model import encode, predict_class, predictor_forward
from dipcf.dip_generator import generate, init_generator
from dipcf.inversion import (
    CounterfactualResult,
    InversionConfig,
    alpha_norm_regularizer,
    dip_objective,
    encoding_distance,
    generate_counterfactual,
    loss_regularizer,
    recover_preimage,
    tv_regularizer,
    write_result_archive,
)
from dipcf.loss_estimator import estimate_loss

from conftest import make_tiny

SMALL_GEN = dict(generator_channels=(4, 8), iterations=15)


def f64(shape, seed=0, low=0.0, high=1.0):
    g = torch.Generator().manual_seed(seed)
    return low + (high - low) * torch.rand(shape, generator=g, dtype=torch.float64)


# ---------------------------------------------------------------- objective terms

def test_encoding_distance_examples():
    a = f64((3, 4, 4))
    assert encoding_distance(a, a).item() == 0.0
    assert encoding_distance(a, a + 1).item() == pytest.approx(1.0, abs=1e-12)
    b = f64((3, 4, 4), seed=1)
    assert encoding_distance(a, b).item() == encoding_distance(b, a).item()
    with pytest.raises(InputError):
        encoding_distance(a, a[:2])


@given(st.integers(0, 10_000))
def test_encoding_distance_positive_for_distinct(seed):
    a, b = f64((2, 3, 3), seed), f64((2, 3, 3), seed + 1)
    assert encoding_distance(a, b).item() > 0


def test_tv_examples():
    assert tv_regularizer(torch.full((5, 5, 3), 0.7, dtype=torch.float64)).item() == 0.0
    two_by_one = torch.tensor([[[0.0]], [[1.0]]], dtype=torch.float64)
    assert tv_regularizer(two_by_one).item() == pytest.approx(1.0, abs=1e-7)


def test_tv_is_isotropic_per_pixel():
    x = torch.zeros(2, 2, 1, dtype=torch.float64)
    x[0, 0] = 1.0
    # pixel (0,0) has differences (-1, -1) -> sqrt(2); (0,1) and (1,0) see nothing further
    assert tv_regularizer(x).item() == pytest.approx(np.sqrt(2), abs=1e-7)


@pytest.mark.parametrize("alpha", [1.0, 2.0, 6.0])
def test_alpha_norm_examples(alpha):
    assert alpha_norm_regularizer(torch.zeros(4, 4, 3), alpha).item() == 0.0
    assert alpha_norm_regularizer(torch.full((2, 2, 1), 0.5), alpha).item() == pytest.approx(0.5 ** alpha)


@given(st.integers(0, 1000))
def test_regularizers_non_negative(seed):
    x = f64((4, 4, 3), seed, -1, 1)
    assert tv_regularizer(x).item() >= 0
    assert alpha_norm_regularizer(x, 6.0).item() >= 0


def test_loss_regularizer_closed_form(tiny):
    model, head = tiny
    x = f64((8, 8, 3), 2)
    with torch.no_grad():
        _, taps = predictor_forward(x, model)
        est = estimate_loss(taps, head)[0].item()
        assert loss_regularizer(x, model, head, est).item() == pytest.approx(0.0, abs=1e-20)
        head.fusion.bias += 0.5 - est
        assert loss_regularizer(x, model, head, 0.0).item() == pytest.approx(0.25, abs=1e-12)


def test_loss_regularizer_needs_trained_head(tiny):
    model, head = tiny
    head.trained = False
    with pytest.raises(StateError):
        loss_regularizer(f64((8, 8, 3)), model, head)


# ---------------------------------------------------------------- gradients

def test_loss_regularizer_gradient(tiny, fd, rel_err):
    model, head = tiny
    x = f64((8, 8, 3), 3).requires_grad_(True)
    loss_regularizer(x, model, head, 0.1).backward()
    numeric = fd(lambda v: loss_regularizer(v, model, head, 0.1), x)
    assert rel_err(x.grad, numeric) < 1e-3


def test_tv_gradient(fd, rel_err):
    x = f64((6, 6, 3), 4).requires_grad_(True)
    tv_regularizer(x).backward()
    assert rel_err(x.grad, fd(tv_regularizer, x)) < 1e-3


def test_alpha_norm_gradient(fd, rel_err):
    x = f64((6, 6, 3), 5, 0.1, 1.0).requires_grad_(True)
    alpha_norm_regularizer(x, 6.0).backward()
    assert rel_err(x.grad, fd(lambda v: alpha_norm_regularizer(v, 6.0), x)) < 1e-3


def test_composite_objective_gradient(fd, rel_err):
    """Eq.-level check: d/dtheta of distance + lambda1*M + lambda2*CE on a 2-level generator."""
    model, head = make_tiny(size=4)
    gen = init_generator((4, 4, 3), seed=0, channels=(2, 3), z_channels=2, batch_norm=False,
                         dtype=torch.float64)
    target = encode(f64((4, 4, 3), 6), 1, model).detach()
    params = list(gen.parameters())
    flat = torch.nn.utils.parameters_to_vector(params).detach()

    def objective(vec):
        torch.nn.utils.vector_to_parameters(vec, params)
        return dip_objective(generate(gen), target, model, head, 1, lambda1=0.02, lambda2=0.1,
                             target_loss=0.0, target_class=1)

    obj = objective(flat.clone())
    grads = torch.autograd.grad(obj, params)
    analytic = torch.cat([g.flatten() for g in grads])
    numeric = fd(objective, flat.clone())
    torch.nn.utils.vector_to_parameters(flat, params)
    assert rel_err(analytic, numeric) < 1e-3


# ---------------------------------------------------------------- runs

def _source(model, seed=7):
    x0 = f64((8, 8, 3), seed).numpy()
    return x0, encode(torch.from_numpy(x0), 1, model).detach()


def test_config_defaults_and_validation():
    cfg = InversionConfig()
    assert (cfg.block_index, cfg.iterations, cfg.lambda1, cfg.lambda2, cfg.target_loss) == (1, 5000, 0.02, 0.1, 0.0)
    assert cfg.step_size == 0.01
    assert InversionConfig(mode="explicit_tv").lambda_explicit == 1e-4
    alpha_cfg = InversionConfig(mode="explicit_alpha")
    assert (alpha_cfg.lambda_explicit, alpha_cfg.alpha) == (1e-6, 6.0)
    for bad in [dict(mode="gan"), dict(mode="counterfactual"), dict(lambda1=-1), dict(iterations=0),
                dict(block_index=5)]:
        with pytest.raises(InputError):
            InversionConfig(**bad)


@pytest.mark.parametrize("mode", ["dip_only", "dip_regularized", "explicit_tv", "explicit_alpha"])
def test_recover_preimage_contract(tiny, mode):
    model, head = tiny
    x0, target = _source(model)
    res = recover_preimage(target, x0, model, head, InversionConfig(mode=mode, seed=1, **SMALL_GEN))
    assert res.preimage.shape == (8, 8, 3)
    assert res.preimage.min() >= 0 and res.preimage.max() <= 1
    assert len(res.objective_trajectory) == 15
    assert res.objective_trajectory[res.best_iteration] <= res.objective_trajectory[0]
    assert res.objective_trajectory[res.best_iteration] == res.objective_trajectory.min()
    assert res.psnr_vs_reference is not None and np.isfinite(res.final_estimated_loss)
    assert 0 <= res.predicted_class < 3


def test_single_iteration(tiny):
    model, head = tiny
    x0, target = _source(model)
    res = recover_preimage(target, None, model, head, InversionConfig(iterations=1, generator_channels=(4, 8)))
    assert len(res.objective_trajectory) == 1 and res.best_iteration == 0
    assert res.psnr_vs_reference is None


def test_seeded_runs_are_identical(tiny):
    model, head = tiny
    x0, target = _source(model)
    cfg = InversionConfig(mode="dip_regularized", seed=3, **SMALL_GEN)
    a = recover_preimage(target, x0, model, head, cfg)
    b = recover_preimage(target, x0, model, head, cfg)
    assert np.array_equal(a.preimage, b.preimage)
    assert np.array_equal(a.objective_trajectory, b.objective_trajectory)


def test_run_restores_model_state(tiny):
    model, head = tiny
    model.train()
    x0, target = _source(model)
    recover_preimage(target, x0, model, head, InversionConfig(mode="dip_regularized", **SMALL_GEN))
    assert model.training and not head.training
    assert all(p.requires_grad for p in model.parameters())
    assert all(p.grad is None for p in model.parameters())


def test_regularized_needs_trained_head(tiny):
    model, head = tiny
    head.trained = False
    x0, target = _source(model)
    with pytest.raises(StateError):
        recover_preimage(target, x0, model, head, InversionConfig(mode="dip_regularized", **SMALL_GEN))
    recover_preimage(target, x0, model, head, InversionConfig(mode="dip_only", **SMALL_GEN))


def test_encoding_shape_must_match_block(tiny):
    model, head = tiny
    x0 = f64((8, 8, 3)).numpy()
    deeper = encode(torch.from_numpy(x0), 2, model).detach()
    with pytest.raises(InputError):
        recover_preimage(deeper, x0, model, head, InversionConfig(block_index=1, **SMALL_GEN))


def test_non_finite_objective_raises_with_trajectory(tiny):
    model, head = tiny
    x0, target = _source(model)
    target = target.clone()
    target[0, 0, 0] = float("nan")
    with pytest.raises(NumericalError) as err:
        recover_preimage(target, x0, model, head, InversionConfig(**SMALL_GEN))
    assert len(err.value.trajectory) == 1 and np.isnan(err.value.trajectory[0])


def _counterfactual_setup(model, seed=7):
    x0, target = _source(model, seed)
    label, _ = predict_class(x0, model)
    return x0, target, (label + 1) % 3, label


def test_counterfactual_result(tiny):
    model, head = tiny
    x0, _, y_t, y0 = _counterfactual_setup(model)
    res = generate_counterfactual(x0, y_t, model, head, InversionConfig(seed=2, **SMALL_GEN))
    assert isinstance(res, CounterfactualResult)
    assert res.original_class == y0 and res.target_class == y_t
    assert res.difference_map.shape == (8, 8)
    assert np.allclose(res.difference_map, np.abs(res.preimage - x0).sum(-1), atol=1e-6)
    assert res.flipped == (res.predicted_class == y_t)


def test_counterfactual_target_errors(tiny):
    model, head = tiny
    x0, _, _, y0 = _counterfactual_setup(model)
    for bad in (y0, 3, -1):
        with pytest.raises(InputError):
            generate_counterfactual(x0, bad, model, head, InversionConfig(**SMALL_GEN))


def test_counterfactual_without_ce_equals_regularized_inversion(tiny):
    model, head = tiny
    x0, target, y_t, _ = _counterfactual_setup(model)
    cf = generate_counterfactual(x0, y_t, model, head, InversionConfig(lambda2=0.0, seed=4, **SMALL_GEN))
    inv = recover_preimage(target, x0, model, head, InversionConfig(mode="dip_regularized", seed=4, **SMALL_GEN))
    assert np.array_equal(cf.preimage, inv.preimage)
    assert np.array_equal(cf.objective_trajectory, inv.objective_trajectory)


def test_counterfactual_without_weights_equals_plain_dip(tiny):
    model, head = tiny
    x0, target, y_t, _ = _counterfactual_setup(model)
    cfg = InversionConfig(lambda1=0.0, lambda2=0.0, seed=4, **SMALL_GEN)
    cf = generate_counterfactual(x0, y_t, model, head, cfg)
    inv = recover_preimage(target, x0, model, head, InversionConfig(mode="dip_only", seed=4, **SMALL_GEN))
    assert np.array_equal(cf.preimage, inv.preimage)
    assert np.array_equal(cf.objective_trajectory, inv.objective_trajectory)


def test_dip_only_ignores_lambda1(tiny):
    model, head = tiny
    x0, target = _source(model)
    a = recover_preimage(target, x0, model, head, InversionConfig(lambda1=0.0, **SMALL_GEN))
    b = recover_preimage(target, x0, model, head, InversionConfig(lambda1=5.0, **SMALL_GEN))
    assert np.array_equal(a.objective_trajectory, b.objective_trajectory)


def test_result_archive(tiny, tmp_path):
    model, head = tiny
    x0, _, y_t, _ = _counterfactual_setup(model)
    cfg = InversionConfig(seed=2, **SMALL_GEN)
    res = generate_counterfactual(x0, y_t, model, head, cfg)
    run = write_result_archive(tmp_path / "run", res, cfg.as_dict(), {"flipped": res.flipped})
    for name in ("counterfactual.png", "counterfactual.npy", "difference.png", "difference.npy",
                 "trajectory.csv", "config.txt", "metrics.csv"):
        assert (run / name).is_file()
    with open(run / "trajectory.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 16 and float(rows[-1][1]) == res.objective_trajectory[-1]
    assert "lambda2 = 0.1" in (run / "config.txt").read_text()
    with pytest.raises(FileExistsError):
        write_result_archive(tmp_path / "run", res, cfg.as_dict(), {})
