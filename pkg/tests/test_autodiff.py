import numpy as np
import pytest

from recorr import autodiff as ad
from recorr.errors import ContractError, DataError
from recorr.gradcheck import check_op, numeric_grad, op_cases, rel_error
from recorr.io import decode_checkpoint, encode_checkpoint, load_checkpoint
from recorr.params import ParamStore, adamw_step


def T(x):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_identity_kernel_conv_is_identity(rng):
    x = rng.normal(size=(2, 4, 5, 3))
    w = np.zeros((2, 2, 3, 3, 3))
    w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1.0
    out = ad.conv3d(ad.Tensor(x), ad.Tensor(w))
    assert np.array_equal(out.data, x)


def test_conv3d_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 5, 4, 6))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    for stride in (1, 2):
        out = ad.conv3d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=stride).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        for o in range(3):
            for z in range(out.shape[1]):
                for y in range(out.shape[2]):
                    for q in range(out.shape[3]):
                        Z, Y, Q = stride * z, stride * y, stride * q
                        ref = np.sum(xp[:, Z:Z + 3, Y:Y + 3, Q:Q + 3] * w[o]) + b[o]
                        assert abs(out[o, z, y, q] - ref) < 1e-10


def test_activation_values():
    z = ad.Tensor(np.zeros((1, 1, 1, 1)))
    assert ad.sigmoid(z).data.item() == 0.5
    assert ad.tanh(z).data.item() == 0.0
    x = ad.Tensor(np.array([-1.0, 2.0]))
    assert np.array_equal(ad.leaky_relu(x).data, [-0.2, 2.0])


def test_constant_loss_gives_zero_gradients(rng):
    p = T(rng.normal(size=(2, 3, 3, 3)))
    loss = ad.sum(p * 0.0) + 5.0
    loss.backward()
    assert np.array_equal(p.grad, np.zeros_like(p.data))


def test_sum_of_params_gives_unit_gradients(rng):
    p, q = T(rng.normal(size=(2, 3))), T(rng.normal(size=(4,)))
    (ad.sum(p) + ad.sum(q)).backward()
    assert np.array_equal(p.grad, np.ones((2, 3))) and np.array_equal(q.grad, np.ones(4))


def test_backward_requires_scalar(rng):
    p = T(rng.normal(size=(2, 3)))
    with pytest.raises(ContractError):
        (p * 2.0).backward()


def test_shape_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        ad.add(T(np.zeros(3)), T(np.zeros(4)))
    with pytest.raises(ContractError):
        ad.conv3d(T(np.zeros((2, 4, 4, 4))), T(np.zeros((1, 3, 3, 3, 3))))


def test_split_concat_adjoint_roundtrip(rng):
    a, b = T(rng.normal(size=(2, 3, 3, 3))), T(rng.normal(size=(3, 3, 3, 3)))
    parts = ad.split(ad.concat([a, b]), [2, 3])
    assert np.array_equal(parts[0].data, a.data) and np.array_equal(parts[1].data, b.data)
    ga, gb = rng.normal(size=a.shape), rng.normal(size=b.shape)
    loss = ad.sum(parts[0] * ad.Tensor(ga)) + ad.sum(parts[1] * ad.Tensor(gb))
    loss.backward()
    assert np.array_equal(a.grad, ga) and np.array_equal(b.grad, gb)


def test_warp_field_gradient_zero_where_clamped_in_all_axes(rng):
    img = T(rng.normal(size=(2, 4, 4, 4)))
    u = rng.uniform(-0.4, 0.4, size=(3, 4, 4, 4))
    u[:, 0, 0, 0] = [-2.0, -3.0, -1.5]  # outside on every axis
    u[:, 3, 3, 3] = [5.0, 2.0, 9.0]
    f = T(u)
    ad.sum(ad.warp(img, f) * ad.Tensor(rng.normal(size=(2, 4, 4, 4)))).backward()
    assert np.array_equal(f.grad[:, 0, 0, 0], np.zeros(3))
    assert np.array_equal(f.grad[:, 3, 3, 3], np.zeros(3))
    assert np.abs(f.grad[:, 1:3, 1:3, 1:3]).min() > 0


def test_numeric_grad_oracle_on_polynomial():
    x = np.array([0.3, -1.2, 2.0])
    g = numeric_grad(lambda: float(np.sum(x**3)), [x], 0)
    assert np.allclose(g, 3 * x**2, atol=1e-6)
    assert rel_error(np.array([1.0]), np.array([1.0 + 1e-9])) < 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_every_op_matches_finite_differences(seed):
    # each seed draws fresh random shapes for every op: ten instances per op
    rng = np.random.default_rng(seed)
    for name, fn, inputs in op_cases(rng):
        res = check_op(name, fn, inputs, rng)
        assert res.ok, (name, res.error)


def test_random_composed_graph_matches_finite_differences(rng):
    x = rng.normal(size=(2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3)) * 0.3
    field = rng.uniform(-0.8, 0.8, size=(3, 4, 4, 4))
    while np.any(np.abs(field - np.round(field)) < 1e-3):
        field = rng.uniform(-0.8, 0.8, size=(3, 4, 4, 4))

    def fn(x_, w_, u_):
        h = ad.tanh(ad.conv3d(x_, w_))
        return ad.sigmoid(ad.warp(h, u_)) * ad.channels(h, 0, 3)

    res = check_op("composed", fn, [x, w, field], rng)
    assert res.ok, res.error


def test_adamw_trivial_cases():
    s = ParamStore(np.float64)
    p = s.add("p", np.array([1.0]))
    p.grad = np.zeros(1)
    adamw_step(s, 0.1)
    assert p.data[0] == 1.0 and s.step == 1 and p.grad is None
    s = ParamStore(np.float64)
    p = s.add("p", np.array([1.0]))
    p.grad = np.ones(1)
    adamw_step(s, 0.1)
    assert abs(p.data[0] - 0.9) < 1e-7


def test_adamw_converges_on_quadratic():
    # lr 0.3: at 0.1 Adam's step size alone leaves |p - 3| near 0.02 after 100 steps
    s = ParamStore(np.float64)
    p = s.add("p", np.array([0.0]))
    q, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        loss = ad.sum(ad.square(ad.add_scalar(p, -3.0)))
        loss.backward()
        adamw_step(s, 0.3)
        g = 2 * (q - 3)
        m, v = 0.9 * m + 0.1 * g, 0.999 * v + 0.001 * g * g
        q -= 0.3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(p.data[0] - q) < 1e-12
    assert abs(p.data[0] - 3.0) < 1e-2


def test_adamw_decoupled_weight_decay():
    s = ParamStore(np.float64)
    p = s.add("p", np.array([2.0]))
    p.grad = np.zeros(1)
    adamw_step(s, 0.1, weight_decay=0.5)
    assert abs(p.data[0] - 2.0 * (1 - 0.05)) < 1e-12


def test_clip_grad_norm():
    s = ParamStore(np.float64)
    a, b = s.add("a", np.zeros(1)), s.add("b", np.zeros(1))
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    norm, clipped = s.clip_grad_norm(1.0)
    assert norm == 5.0 and clipped
    assert abs(s.grad_norm() - 1.0) < 1e-9


def test_checkpoint_roundtrip_and_layout(tmp_path, rng):
    s = ParamStore(np.float32)
    s.add("enc.w", rng.normal(size=(2, 1, 3, 3, 3)))
    s.add("enc.b", rng.normal(size=(2,)))
    s["enc.w"].grad = np.ones((2, 1, 3, 3, 3), np.float32)
    s["enc.b"].grad = np.ones(2, np.float32)
    adamw_step(s, 0.01)
    path = tmp_path / "c.ckpt"
    s.save(path)
    raw = path.read_bytes()
    assert raw[:10] == b"RECORRCKPT" and int.from_bytes(raw[10:14], "little") == 1
    name_len = int.from_bytes(raw[14:18], "little")
    assert raw[18:18 + name_len] == b"enc.w"
    entries = load_checkpoint(path)
    assert set(entries) == {"enc.w", "enc.b", "enc.w.m", "enc.w.v", "enc.b.m", "enc.b.v", "step"}
    t = ParamStore(np.float32)
    t.add("enc.w", np.zeros((2, 1, 3, 3, 3)))
    t.add("enc.b", np.zeros(2))
    t.load(path)
    assert t.step == 1
    for k in s:
        assert np.array_equal(s[k].data, t[k].data)
        assert np.array_equal(s.m[k], t.m[k]) and np.array_equal(s.v[k], t.v[k])
    assert encode_checkpoint(t.state_dict()) == raw


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        decode_checkpoint(b"NOTACKPT")
    good = encode_checkpoint({"a": np.ones((2, 2))})
    with pytest.raises(DataError):
        decode_checkpoint(good[:-3])
    s = ParamStore()
    s.add("a", np.zeros((3,)))
    with pytest.raises(DataError):
        s.load_state_dict({"a": np.ones((2, 2))})
    with pytest.raises(DataError):
        s.load(tmp_path / "missing.ckpt")
