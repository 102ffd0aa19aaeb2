import numpy as np
import pytest

from conftest import mean_epe, smooth_field, translation_pairs, trilinear_oracle
from recorr import autodiff as ad
from recorr.config import parse_config
from recorr.errors import ContractError
from recorr.losses import sequence_loss
from recorr.pyramid import IterationSchedule, build_params, direct_features, exp_field, register
from recorr.synth import PerturbSpec, PhantomSpec, make_pair, make_phantom
from recorr.volume import fold_fraction, jacobian_det

SMALL = {"encoder": {"channels": [4, 4, 4, 6, 6]}, "updater": {"motion_channels": 4}, "refine": {"channels": 4}}


def test_schedule_length_and_validation():
    assert IterationSchedule((3, 3, 2, 2), True).length == 11
    assert IterationSchedule((1, 1, 1, 1), False).length == 4
    with pytest.raises(ContractError):
        IterationSchedule((0, 0, 0, 0))
    with pytest.raises(ContractError):
        IterationSchedule((1, 1, 1))


def test_cold_start_gives_identity(rng):
    cfg = parse_config(SMALL)
    p = build_params(cfg, dtype=np.float64)
    f, m = rng.normal(size=(1, 16, 16, 16)), rng.normal(size=(1, 16, 16, 16))
    for refine in (False, True):
        tr = register(f, m, p, cfg, schedule=IterationSchedule((3, 3, 2, 2), refine))
        assert len(tr) == (11 if refine else 10)
        assert all(fld.shape == (3, 16, 16, 16) for fld in tr.fields)
        assert not np.any(tr.final_numpy())


def test_trace_scales_and_diagnostics(rng):
    cfg = parse_config(SMALL)
    p = build_params(cfg, dtype=np.float64)
    f = rng.normal(size=(1, 16, 16, 16))
    tr = register(f, f, p, cfg, diagnostics=True)
    assert tr.scales == [0, 0, 0, 1, 1, 1, 2, 2, 3, 3, 4]
    assert len(tr.diagnostics) == 11 and all("similarity_mse" in d and "mean_abs_delta" in d for d in tr.diagnostics)


def test_register_rejects_bad_inputs(rng):
    cfg = parse_config(SMALL)
    p = build_params(cfg, dtype=np.float64)
    with pytest.raises(ContractError):
        register(np.zeros((1, 16, 16, 16)), np.zeros((1, 16, 16, 32)), p, cfg)
    with pytest.raises(ContractError):
        register(np.zeros((1, 16, 16, 16)), np.zeros((1, 16, 16, 16)), p, cfg, mode="other")


def test_parameters_shared_within_scale_distinct_across():
    cfg = parse_config(SMALL)
    p = build_params(cfg)
    prefixes = {k.split(".")[0] for k in p}
    assert prefixes == {"enc", "upd0", "upd1", "upd2", "upd3", "refine"}
    # one parameter set per scale regardless of the iteration count
    bigger = build_params(parse_config({**SMALL, "schedule": {"iterations": [5, 5, 5, 5]}}))
    assert list(bigger) == list(p)


def test_sequence_loss_gradient_reaches_every_updater_scale(rng):
    cfg = parse_config({**SMALL, "schedule": {"iterations": [1, 1, 1, 1]}})
    p = build_params(cfg, dtype=np.float64)
    for k, t in p.items():  # break the zero-head symmetry so every path is live
        if "head" in k or "refine.conv2" in k:
            t.data = rng.normal(scale=0.05, size=t.shape)
    img, lab = make_phantom(PhantomSpec(seed=0, dims=(16, 16, 16)))
    pair = make_pair(img, lab, PerturbSpec(kind="svf", s=4, magnitude=2.0, seed=0))
    f, m = pair.fixed.astype(np.float64), pair.moving.astype(np.float64)
    tr = register(f, m, p, cfg)
    sequence_loss(tr, f, m, cfg.loss).backward()
    for k, t in p.items():
        assert t.grad is not None and np.abs(t.grad).max() > 0, k


def test_direct_identical_pair_is_identity():
    img, _ = make_phantom(PhantomSpec(seed=4))
    cfg = parse_config({})
    for variant in ("standard", "diffeo"):
        tr = register(img.values, img.values, None, cfg, mode="direct", variant=variant)
        assert np.abs(tr.final_numpy()).mean() < 0.05


def test_direct_features_shapes_and_norm(rng):
    feats = direct_features(rng.normal(size=(1, 32, 32, 32)))
    assert [f.shape[1:] for f in feats] == [(2, 2, 2), (4, 4, 4), (8, 8, 8), (16, 16, 16), (32, 32, 32)]
    assert [f.shape[0] for f in feats] == [216, 216, 216, 216, 27]
    for f in feats:
        assert np.allclose(np.sum(f * f, axis=0), f.shape[0])
        assert np.allclose(f.mean(axis=0), 0, atol=1e-12)


def test_direct_recovers_translation_monotonically():
    cfg = parse_config({"schedule": {"iterations": [1, 1, 1, 1]}})
    for pair in translation_pairs(3):
        tr = register(pair.fixed, pair.moving, None, cfg, mode="direct")
        epe = [mean_epe(f.data, pair.true_field) for f in tr.fields]
        assert epe[-1] < 1.0
        assert all(b <= a + 1e-9 for a, b in zip(epe, epe[1:]))


def test_exp_field_zero_and_constant():
    assert not np.any(exp_field(np.zeros((3, 6, 6, 6))))
    v = np.zeros((3, 40, 40, 40))
    v[2] = 4.0
    u = exp_field(v)
    # Euler oracle of the flow: x' = v(x) with 1024 steps, trilinear samples of v
    p = np.array([20.0, 20.0, 20.0])
    x = p.copy()
    for _ in range(1024):
        x = x + np.array([trilinear_oracle(v[a], *x) for a in range(3)]) / 1024
    inner = u[:, 8:-8, 8:-8, 8:-8]
    assert np.abs(inner - (x - p)[:, None, None, None]).max() < 1e-3
    with pytest.raises(ContractError):
        exp_field(v, steps=0)


def test_exp_field_second_order_taylor(rng):
    # exp(v) = v + 1/2 (grad v) v + O(|v|^3): halving v shrinks the residual ~8x.
    # Five squarings compose 32 Euler steps, whose quadratic term carries the
    # factor (1 - 1/32). A random affine velocity keeps trilinear sampling and
    # np.gradient exact.
    A, b = rng.normal(size=(3, 3)), rng.normal(size=3)
    g = np.indices((16, 16, 16)).astype(float) - 7.5
    base = np.einsum("ab,b...->a...", A, g) + b[:, None, None, None]
    base /= np.abs(base).max()

    def residual(eps):
        v = eps * base
        grad = np.stack([np.stack(np.gradient(v[a]), axis=0) for a in range(3)])  # [a, b] = d v_a / d x_b
        approx = v + 0.5 * (1 - 2.0**-5) * np.einsum("ab...,b...->a...", grad, v)
        return np.abs(exp_field(v) - approx)[:, 3:-3, 3:-3, 3:-3].max()

    r1, r2 = residual(0.4), residual(0.2)
    assert 6 < r1 / r2 < 10


def test_exp_field_differentiable(rng):
    v = ad.Tensor(smooth_field(rng, (6, 6, 6), 0.6), requires_grad=True)
    u = exp_field(v)
    assert isinstance(u, ad.Tensor)
    ad.sum(u).backward()
    assert v.grad is not None and v.grad.shape == v.shape


def test_exp_field_fold_free_on_smooth_velocities(rng):
    for _ in range(10):
        v = smooth_field(rng, (16, 16, 16), 3.0, 2.5)
        assert fold_fraction(jacobian_det(exp_field(v))) == 0.0


def test_diffeo_learned_trace_sets_velocity(rng):
    cfg = parse_config({**SMALL, "variant": "diffeo"})
    p = build_params(cfg, dtype=np.float64)
    tr = register(rng.normal(size=(1, 16, 16, 16)), rng.normal(size=(1, 16, 16, 16)), p, cfg)
    assert tr.velocity is not None
    assert np.array_equal(exp_field(np.asarray(tr.velocity.data)), tr.final_numpy())
