import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ueraser import ndgrad as nd
from reference import fd_gradients, ref_forward, ref_mean_ce, rel_error


def _random_params(in_shape, classes, seed, bias_std=0.1):
    rng = np.random.default_rng(seed + 1000)
    p = nd.init_params(in_shape, classes, seed)
    for k in p.arrays:
        if k.endswith(".b"):
            p.arrays[k] = rng.normal(0, bias_std, p.arrays[k].shape).astype(np.float32)
    return p


def _loss_and_grads(p, x, y):
    with nd.GradTape() as tape:
        loss = nd.mean(nd.cross_entropy(nd.forward(p, x), y))
    return loss, tape.backward(loss)


def test_zero_weights_give_dense_bias():
    p = nd.init_params((3, 8, 8), 5, seed=0)
    for k in p.arrays:
        p.arrays[k][...] = 0
    p.arrays["dense.b"][:] = np.arange(5, dtype=np.float32)
    x = np.random.default_rng(0).random((3, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(nd.forward(p, x).data, np.tile(np.arange(5), (3, 1)))


def test_duplicated_rows_identical():
    p = nd.init_params((3, 8, 8), 4, seed=1)
    img = np.random.default_rng(1).random((1, 3, 8, 8)).astype(np.float32)
    z = nd.forward(p, np.concatenate([img, img])).data
    np.testing.assert_array_equal(z[0], z[1])


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_reference(seed):
    p = _random_params((3, 16, 12), 4, seed)
    x = np.random.default_rng(seed).random((5, 3, 16, 12)).astype(np.float32)
    z = nd.forward(p, x).data
    ref = ref_forward(p.arrays, x)
    assert rel_error(z, ref) < 1e-5


def test_forward_shape_mismatch():
    p = nd.init_params((3, 8, 8), 4)
    with pytest.raises(nd.ConfigError):
        nd.forward(p, np.zeros((2, 3, 12, 12), np.float32))
    with pytest.raises(nd.ConfigError):
        nd.init_params((3, 10, 10), 4)


def test_forward_is_pure():
    p = nd.init_params((3, 8, 8), 4, seed=2)
    before = {k: v.copy() for k, v in p.arrays.items()}
    x = np.random.default_rng(2).random((2, 3, 8, 8)).astype(np.float32)
    a = nd.forward(p, x).data
    b = nd.forward(p, x).data
    assert a.tobytes() == b.tobytes()
    for k in before:
        np.testing.assert_array_equal(before[k], p.arrays[k])


def test_uniform_logits_loss_is_log_c():
    loss = nd.cross_entropy(np.zeros((4, 10), np.float32), [0, 3, 5, 9]).data
    np.testing.assert_allclose(loss, np.log(10), rtol=1e-6)
    assert abs(float(loss[0]) - 2.302585) < 1e-6


def test_large_margin_loss_vanishes():
    losses = []
    for margin in (1, 5, 10, 20):
        z = np.zeros((1, 3), np.float32)
        z[0, 1] = margin
        losses.append(float(nd.cross_entropy(z, [1]).data[0]))
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-8 and all(v >= 0 for v in losses)


def test_cross_entropy_matches_naive_float64():
    rng = np.random.default_rng(3)
    z = rng.normal(0, 3, (64, 7)).astype(np.float32)
    y = rng.integers(0, 7, 64)
    z64 = z.astype(np.float64)
    naive = -np.log(np.exp(z64)[np.arange(64), y] / np.exp(z64).sum(axis=1))
    np.testing.assert_allclose(nd.cross_entropy(z, y).data, naive, atol=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        nd.cross_entropy(np.zeros((2, 3), np.float32), [0, 3])


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(4).normal(0, 20, (50, 6))
    np.testing.assert_allclose(nd.softmax(z).sum(axis=1), 1.0, atol=1e-6)


def test_ce_gradient_closed_form():
    rng = np.random.default_rng(5)
    z = nd.Tensor(rng.normal(size=(6, 4)).astype(np.float32), name="z")
    y = rng.integers(0, 4, 6)
    with nd.GradTape() as tape:
        tape.watch(z)
        loss = nd.mean(nd.cross_entropy(z, y))
    g = tape.backward(loss)["z"]
    expected = (nd.softmax(z.data) - np.eye(4)[y]) / 6
    np.testing.assert_allclose(g, expected, atol=1e-7)


@pytest.mark.parametrize("seed", range(2))
def test_finite_difference_all_parameters(seed):
    p = _random_params((3, 4, 8), 3, seed)
    rng = np.random.default_rng(seed)
    x = rng.random((3, 3, 4, 8)).astype(np.float32)
    y = rng.integers(0, 3, 3)
    _, grads = _loss_and_grads(p, x, y)
    fd, _ = fd_gradients(p.arrays, x, y, h=1e-3)
    for name in nd.PARAM_ORDER:
        assert rel_error(grads[name], fd[name]) <= 1e-3, name


def test_input_gradient_zero_for_zero_upstream():
    p = _random_params((3, 8, 8), 4, 6)
    rng = np.random.default_rng(6)
    x = nd.Tensor(rng.random((3, 3, 8, 8)).astype(np.float32), name="x")
    y = rng.integers(0, 4, 3)
    with nd.GradTape() as tape:
        tape.watch(x)
        losses = nd.cross_entropy(nd.forward(p, x), y)
        # only image 0 contributes to the objective
        pick = nd.Tensor(np.array([1.0, 0.0, 0.0], np.float32))
        weighted = nd._record(losses.data * pick.data, (losses,), lambda g, needs: (g * pick.data,))
        total = nd.mean(weighted)
    tape.backward(total)
    assert np.abs(x.grad[0]).sum() > 0
    assert not x.grad[1:].any()


def _fd_input(p, x, y, h=1e-6):
    fd = np.zeros(x.size)
    flat = x.astype(np.float64).reshape(-1)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        fd[i] = (ref_mean_ce(p.arrays, up.reshape(x.shape), y) - ref_mean_ce(p.arrays, dn.reshape(x.shape), y)) / (2 * h)
    return fd.reshape(x.shape)


@pytest.mark.parametrize("constant", [False, True])
def test_input_gradient_matches_finite_differences(constant):
    p = _random_params((3, 4, 4), 3, 9)
    rng = np.random.default_rng(9)
    x = rng.random((2, 3, 4, 4)).astype(np.float32)
    if constant:
        # a nearly flat image sits on the standardization floor
        x[1] = 0.3 + 0.01 * x[1]
    y = np.array([0, 2])
    xt = nd.Tensor(x, name="x")
    with nd.GradTape() as tape:
        tape.watch(xt)
        loss = nd.mean(nd.cross_entropy(nd.forward(p, xt), y))
    tape.backward(loss)
    assert rel_error(xt.grad, _fd_input(p, x, y)) <= 1e-3


def test_backward_without_forward_is_state_error():
    tape = nd.GradTape()
    with pytest.raises(nd.StateError):
        tape.backward(nd.Tensor(np.float32(0)))


def test_tape_cleared_after_backward():
    p = nd.init_params((3, 8, 8), 2, seed=0)
    x = np.random.default_rng(0).random((2, 3, 8, 8)).astype(np.float32)
    with nd.GradTape() as tape:
        loss = nd.mean(nd.cross_entropy(nd.forward(p, x), [0, 1]))
    grads = nd.backward(tape, loss)
    assert set(grads) == set(nd.PARAM_ORDER)
    for k in grads:
        assert grads[k].shape == p.arrays[k].shape
    with pytest.raises(nd.StateError):
        tape.backward(loss)


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(5)), st.integers(0, 2 ** 16))
def test_permuting_rows_permutes_outputs(perm, seed):
    perm = np.array(perm)
    p = nd.init_params((3, 8, 8), 3, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.random((5, 3, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, 5)
    z = nd.forward(p, x).data
    zp = nd.forward(p, x[perm]).data
    np.testing.assert_allclose(zp, z[perm], rtol=1e-6, atol=1e-6)
    lp = nd.cross_entropy(zp, y[perm]).data
    np.testing.assert_allclose(lp, nd.cross_entropy(z, y).data[perm], rtol=1e-6, atol=1e-6)


def _unit_params():
    p = nd.init_params((3, 4, 4), 2, seed=0)
    for k in p.arrays:
        p.arrays[k][...] = 1.0
    return p


def test_sgd_plain_step():
    p = _unit_params()
    g = {k: np.full_like(v, 2.0) for k, v in p.arrays.items()}
    nd.sgd_step(p, g, lr=0.1, momentum=0.0, weight_decay=0.0)
    for v in p.arrays.values():
        np.testing.assert_allclose(v, 0.8)


def test_sgd_zero_lr_updates_momentum_only():
    p = _unit_params()
    g = {k: np.full_like(v, 2.0) for k, v in p.arrays.items()}
    nd.sgd_step(p, g, lr=0.0, momentum=0.9, weight_decay=5e-4)
    for k, v in p.arrays.items():
        np.testing.assert_array_equal(v, 1.0)
        np.testing.assert_allclose(p.momentum[k], 2.0 + 5e-4)


def test_sgd_momentum_recurrence():
    p = _unit_params()
    g = {k: np.full_like(v, 1.0) for k, v in p.arrays.items()}
    nd.sgd_step(p, g, lr=0.1, momentum=0.9, weight_decay=0.0)
    before = p.arrays["conv1.w"].copy()
    nd.sgd_step(p, g, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(before - p.arrays["conv1.w"], 0.1 * 1.9, rtol=1e-6)


def test_sgd_nonfinite_aborts():
    p = _unit_params()
    g = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    g["conv2.w"][0, 0, 0, 0] = np.inf
    before = {k: v.copy() for k, v in p.arrays.items()}
    with pytest.raises(nd.NonFiniteUpdate) as err:
        nd.sgd_step(p, g, lr=0.1)
    assert err.value.param == "conv2.w"
    for k in before:
        np.testing.assert_array_equal(before[k], p.arrays[k])


def test_clip_grad_norm():
    g = {"a": np.full(4, 10.0, np.float32)}
    clipped, norm = nd.clip_grad_norm(g, 10.0)
    assert norm == pytest.approx(20.0)
    assert np.linalg.norm(clipped["a"]) == pytest.approx(10.0, rel=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    p = _random_params((3, 8, 8), 4, 7)
    p.momentum["dense.w"][:] = 0.25
    nd.save_checkpoint(tmp_path / "m.bin", p, extra={"epoch": 3})
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"UERM"
    q, desc = nd.load_checkpoint(tmp_path / "m.bin")
    assert desc["epoch"] == 3 and desc["arch"] == "SmallConvNet"
    assert q.in_shape == (3, 8, 8) and q.num_classes == 4
    for k in nd.PARAM_ORDER:
        np.testing.assert_array_equal(q.arrays[k], p.arrays[k])
        np.testing.assert_array_equal(q.momentum[k], p.momentum[k])


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(nd.ConfigError):
        nd.load_checkpoint(tmp_path / "x.bin")
