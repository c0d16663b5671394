import numpy as np
import pytest
import scipy.sparse as sp

from slicerec import autodiff as ad
from slicerec.errors import ContractError
from slicerec.rng import stream


@pytest.fixture(autouse=True)
def debug_checks():
    ad.set_debug_checks(True)
    yield
    ad.set_debug_checks(False)


def fd_check(build_loss, arrays, h=1e-5, tol=1e-6):
    """Compare tape gradients of build_loss() against central differences
    w.r.t. every array in `arrays` (mutated in place by fd_gradient)."""
    tensors = [ad.tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = build_loss(*tensors)
    tape.backward(loss, params=tensors)
    for t, a in zip(tensors, arrays):
        numeric = ad.fd_gradient(lambda: build_loss(*[ad.tensor(x.values) for x in tensors]).item(), t.values, h=h)
        err = ad.gradcheck_error(t.grad, numeric)
        assert err < tol, f"gradient mismatch {err} for array of shape {a.shape}"


def test_backward_sum_is_ones():
    w = ad.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(w)
    tape.backward(loss)
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_backward_sigmoid_at_zero():
    x = ad.tensor([[0.0]], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sigmoid(x)
    tape.backward(loss)
    assert abs(x.grad[0, 0] - 0.25) < 1e-15


def test_backward_rejects_nonscalar():
    x = ad.tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.smul(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_untouched_params_get_zero_grad():
    used = ad.tensor(np.ones((2, 2)), requires_grad=True)
    unused = ad.tensor(np.ones((3, 1)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(used)
    tape.backward(loss, params=[used, unused])
    assert np.array_equal(unused.grad, np.zeros((3, 1)))


def test_three_layer_composite_matches_finite_differences():
    rng = stream(7, "fd")
    x = rng.normal(size=(4, 3))
    w1 = rng.normal(size=(3, 5))
    b1 = rng.normal(size=(1, 5))
    w2 = rng.normal(size=(5, 2))
    w3 = rng.normal(size=(2, 1))

    def loss(xt, w1t, b1t, w2t, w3t):
        h1 = ad.tanh(ad.add(ad.matmul(xt, w1t), b1t))
        h2 = ad.sigmoid(ad.matmul(h1, w2t))
        return ad.mean_all(ad.matmul(h2, w3t))

    fd_check(loss, [x, w1, b1, w2, w3], tol=1e-6)


def test_elementwise_primitives_match_finite_differences():
    rng = stream(11, "fd")
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))

    fd_check(lambda x, y: ad.sum_all(ad.mul(x, y)), [a, b])
    fd_check(lambda x, y: ad.sum_all(ad.sub(ad.exp(ad.smul(x, 0.3)), y)), [a, b])
    fd_check(lambda x, y: ad.mean_all(ad.relu(ad.add(x, y))), [a + 0.05, b])
    fd_check(lambda x, y: ad.sum_all(ad.log(ad.sadd(ad.sigmoid(ad.mul(x, y)), 0.5))), [a, b])
    fd_check(lambda x, y: ad.sum_all(ad.neg(ad.tanh(x))), [a, b])


def test_broadcast_add_and_mul_grads():
    rng = stream(12, "fd")
    a = rng.normal(size=(4, 3))
    bias = rng.normal(size=(1, 3))
    scalar = rng.normal(size=(1, 1))
    fd_check(lambda x, b: ad.sum_all(ad.tanh(ad.add(x, b))), [a, bias])
    fd_check(lambda x, s: ad.sum_all(ad.mul(x, s)), [a, scalar])
    fd_check(lambda s: ad.sum_all(ad.reciprocal(s)), [scalar + 2.0])


def test_structural_primitives_match_finite_differences():
    rng = stream(13, "fd")
    a = rng.normal(size=(4, 2))
    b = rng.normal(size=(4, 3))
    c = rng.normal(size=(2, 2))

    fd_check(lambda x, y: ad.sum_all(ad.tanh(ad.concat_cols([x, y]))), [a, b])
    fd_check(lambda x, y: ad.mean_all(ad.concat_rows([x, y])), [a, c])

    idx = np.array([0, 2, 2, 3])
    fd_check(lambda x: ad.sum_all(ad.exp(ad.gather_rows(x, idx))), [a])

    upd_idx = np.array([1, 3])
    fd_check(lambda x, y: ad.sum_all(ad.tanh(ad.row_update(x, upd_idx, y))), [a, c])

    seg = np.array([0, 0, 2, 1])
    fd_check(lambda x: ad.sum_all(ad.tanh(ad.segment_mean(x, seg, 3))), [a])

    col = np.array([0.5, 2.0, -1.0, 0.25])
    fd_check(lambda x: ad.sum_all(ad.row_scale(x, col)), [a])


def test_clip_gradient_masks_clamped_entries():
    x = ad.tensor([[0.0, 10.0, -10.0]], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.clip(x, lo=-1.0, hi=1.0))
    tape.backward(loss)
    assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_spmm_gradient_uses_symmetry():
    rng = stream(14, "fd")
    dense = np.zeros((5, 5))
    for i, j in [(0, 3), (1, 3), (2, 4)]:
        dense[i, j] = dense[j, i] = 0.7
    adj = sp.csr_matrix(dense)
    x = rng.normal(size=(5, 2))
    fd_check(lambda t: ad.sum_all(ad.tanh(ad.spmm(adj, t))), [x])


def test_dropout_modes_and_mean_preservation():
    rng = stream(15, "drop")
    x = ad.tensor(np.ones((100, 100)))
    assert ad.dropout(x, 0.0, rng, training=True) is x
    assert ad.dropout(x, 0.5, rng, training=False) is x
    out = ad.dropout(x, 0.5, rng, training=True)
    assert abs(out.values.mean() - 1.0) < 0.02
    with pytest.raises(ContractError):
        ad.dropout(x, 1.0, rng, training=True)


def test_dropout_gradient_matches_mask():
    rng_draws = stream(16, "drop")
    x = ad.tensor(np.full((4, 4), 2.0), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.dropout(x, 0.5, rng_draws, training=True)
        loss = ad.sum_all(out)
    tape.backward(loss)
    # gradient is the same scaled mask applied in the forward pass
    assert np.array_equal(x.grad, out.values / 2.0)


def test_tape_replay_recordings_do_not_interfere():
    w = ad.tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        loss1 = ad.sum_all(ad.smul(w, 1.0))
        loss2 = ad.sum_all(ad.smul(w, 3.0))
    tape.backward(loss2)
    assert np.array_equal(w.grad, np.full((2, 2), 3.0))
    assert loss1.grad is None


def test_determinism_bit_identical_runs():
    def run():
        rng = stream(42, "dropout")
        x = ad.tensor(stream(42, "init").normal(size=(6, 6)), requires_grad=True)
        with ad.Tape() as tape:
            h = ad.dropout(ad.tanh(x), 0.3, rng, training=True)
            loss = ad.mean_all(ad.mul(h, h))
        tape.backward(loss)
        return loss.values.copy(), x.grad.copy()

    la, ga = run()
    lb, gb = run()
    assert la.tobytes() == lb.tobytes()
    assert ga.tobytes() == gb.tobytes()


def test_adam_closed_form_first_step():
    p = ad.tensor([[0.0]], requires_grad=True, name="w")
    params = {"w": p}
    state = ad.AdamState(params, learning_rate=0.1)
    p.grad = np.array([[1.0]])
    ad.adam_step(params, state)
    # first-step magnitude is lr * g / (sqrt(g^2) + eps)
    assert abs(p.values[0, 0] + 0.1) < 1e-8


def test_adam_zero_grad_zero_decay_fixed_point():
    p = ad.tensor([[1.5]], requires_grad=True, name="w")
    params = {"w": p}
    state = ad.AdamState(params, learning_rate=0.1)
    p.grad = np.array([[0.0]])
    for _ in range(3):
        ad.adam_step(params, state, weight_decay=0.0)
    assert p.values[0, 0] == 1.5


def test_adam_weight_decay_shrinks_toward_zero():
    p = ad.tensor([[1.0]], requires_grad=True, name="w")
    params = {"w": p}
    state = ad.AdamState(params, learning_rate=0.01)
    before = p.values[0, 0]
    for _ in range(10):
        p.grad = np.array([[0.0]])
        ad.adam_step(params, state, weight_decay=1e-4)
    assert 0.0 < p.values[0, 0] < before


def test_clip_global_norm():
    a = ad.tensor(np.zeros((1, 1)), requires_grad=True, name="a")
    b = ad.tensor(np.zeros((1, 1)), requires_grad=True, name="b")
    a.grad = np.array([[3.0]])
    b.grad = np.array([[4.0]])
    params = {"a": a, "b": b}
    norm = ad.clip_global_norm(params, 1.0)
    assert abs(norm - 5.0) < 1e-12
    assert abs(a.grad[0, 0] - 0.6) < 1e-12
    assert abs(b.grad[0, 0] - 0.8) < 1e-12


def test_checkpoint_roundtrip(tmp_path):
    rng = stream(3, "ckpt")
    params = {
        "emb.user": ad.tensor(rng.normal(size=(4, 2)), requires_grad=True),
        "mlp.w1": ad.tensor(rng.normal(size=(2, 3)), requires_grad=True),
    }
    state = ad.AdamState(params, learning_rate=0.05)
    for p in params.values():
        p.grad = rng.normal(size=p.shape)
    ad.adam_step(params, state)

    ad.save_params(tmp_path / "params.bin", params)
    ad.save_optimizer(tmp_path / "optimizer.bin", state)

    restored = {
        "emb.user": ad.tensor(np.zeros((4, 2)), requires_grad=True),
        "mlp.w1": ad.tensor(np.zeros((2, 3)), requires_grad=True),
    }
    ad.load_params(tmp_path / "params.bin", restored)
    for name in params:
        assert restored[name].values.tobytes() == params[name].values.tobytes()

    fresh = ad.AdamState(restored, learning_rate=0.05)
    ad.load_optimizer(tmp_path / "optimizer.bin", fresh)
    assert fresh.step == 1
    for name in params:
        assert fresh.m[name].tobytes() == state.m[name].tobytes()
        assert fresh.v[name].tobytes() == state.v[name].tobytes()


def test_checkpoint_record_layout(tmp_path):
    params = {"w": ad.tensor([[1.0, 2.0]], requires_grad=True)}
    path = tmp_path / "params.bin"
    ad.save_params(path, params)
    raw = path.read_bytes()
    # u32 name length, name bytes, u32 rows, u32 cols, f64 little-endian values
    assert raw[:4] == (1).to_bytes(4, "little")
    assert raw[4:5] == b"w"
    assert raw[5:9] == (1).to_bytes(4, "little")
    assert raw[9:13] == (2).to_bytes(4, "little")
    assert np.frombuffer(raw[13:], dtype="<f8").tolist() == [1.0, 2.0]
