import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from fgforecast.numerics import (
    LSTM,
    MLP,
    AdamW,
    AdamWState,
    GCNLayer,
    GradientTape,
    Linear,
    NonFiniteError,
    Parameter,
    Tensor,
    adamw_step,
    backward,
    concat,
    gcn_forward,
    gradient_check,
    load_checkpoint,
    lstm_sequence,
    matmul,
    mlp_forward,
    mse_loss,
    normalize_adjacency,
    save_checkpoint,
    stack,
)
from fgforecast.numerics import tensor as T


def sig(x):
    return 1 / (1 + np.exp(-x))


def dense_gcn(h, a, w, b):
    a_hat = a + np.eye(len(a))
    d = a_hat.sum(axis=1)
    norm = a_hat / np.sqrt(d)[:, None] / np.sqrt(d)[None, :]
    return np.maximum(norm @ h @ w + b, 0.0)


def random_graph(rng, n, density=0.4):
    a = rng.uniform(0, 5, size=(n, n)) * (rng.uniform(size=(n, n)) < density)
    np.fill_diagonal(a, 0)
    return a


# ---------------------------------------------------------------- tensors and tape

def test_power_rule_and_unreachable():
    p = Parameter(np.array(3.0))
    q = Parameter(np.array(1.5))
    with GradientTape() as tape:
        loss = p * p
    backward(loss, tape)
    assert p.grad == 6.0 and q.grad == 0.0


def test_backward_non_scalar():
    p = Parameter(np.ones(3))
    with GradientTape() as tape:
        out = p * p
    with pytest.raises(ValueError):
        tape.backward(out)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0])) * Tensor(np.array([np.inf]))
    p = Parameter(np.ones(2))
    with pytest.raises(NonFiniteError):
        p.assign(np.array([np.nan, 1.0]))


def test_shared_subexpression_accumulates():
    p = Parameter(np.array([2.0, -1.0]))
    with GradientTape() as tape:
        y = p * p
        loss = (y + y * p).sum()
    tape.backward(loss)
    assert np.allclose(p.grad, 2 * p.data + 3 * p.data ** 2)


def test_elementary_ops_gradcheck(rng):
    a = Parameter(rng.normal(size=(3, 4)), name="a")
    b = Parameter(rng.normal(size=(4,)), name="b")
    c = Parameter(rng.normal(size=(4, 2)), name="c")

    def closure():
        x = T.tanh(a + b) * T.sigmoid(a - b)
        y = matmul(concat([x, T.relu(a)], axis=0), c)
        z = stack([y, y * y], axis=0)[1, 1:, :]
        return T.mean(T.square(z.reshape(-1))) + T.tsum(x, axis=0).sum()

    rep = gradient_check(closure, {"a": a, "b": b, "c": c})
    assert rep.passed, str(rep)


def test_spmm_gradcheck(rng):
    m = sp.csr_matrix(random_graph(rng, 5))
    x = Parameter(rng.normal(size=(5, 3)), name="x")
    rep = gradient_check(lambda: T.spmm(m, x).sum() * 0.5 + T.square(T.spmm(m, x)).sum(), [x])
    assert rep.passed, str(rep)


def test_linear_model_gradcheck_machine_precision(rng):
    w = Parameter(rng.normal(size=(3, 1)), name="w")
    x = Tensor(rng.normal(size=(6, 3)))
    rep = gradient_check(lambda: matmul(x, w).sum(), [w])
    assert rep.worst < 1e-9


def test_corrupted_backward_is_reported(rng):
    p = Parameter(rng.uniform(0.5, 2.0, size=4), name="p")

    def bad_square(a):
        return T._result(a.data * a.data, [a], lambda g: (g * a.data,), "bad_square")  # should be 2*g*a

    rep = gradient_check(lambda: bad_square(p).sum(), [p])
    assert not rep.passed


# ---------------------------------------------------------------- layers

def test_mlp_zero_params():
    m = MLP(3, 5, np.random.default_rng(0))
    for prm in m.parameters():
        prm.assign(np.zeros_like(prm.data))
    out = mlp_forward(Tensor(np.ones((2, 4, 3))), m)
    assert out.shape == (2, 4, 5) and np.all(out.data == 0)


def test_identity_affine_layer():
    lin = Linear(3, 3, np.random.default_rng(0))
    lin.weight.assign(np.eye(3))
    lin.bias.assign(np.zeros(3))
    x = np.random.default_rng(1).normal(size=(2, 3))
    assert np.array_equal(lin(Tensor(x)).data, x)


def test_mlp_dense_oracle(rng):
    m = MLP(3, 4, rng, hidden=5)
    x = rng.normal(size=(2, 3))
    l1, l2 = m.hidden, m.output
    ref = np.maximum(x @ l1.weight.data + l1.bias.data, 0) @ l2.weight.data + l2.bias.data
    assert np.allclose(mlp_forward(Tensor(x), m).data, ref, atol=1e-14)


def test_mlp_shape_mismatch(rng):
    with pytest.raises(ValueError):
        MLP(3, 4, rng)(Tensor(np.ones((2, 2))))


def test_gcn_single_node_no_edges(rng):
    layer = GCNLayer(3, 2, rng)
    x = rng.normal(size=(1, 3))
    out = gcn_forward(Tensor(x), sp.csr_matrix((1, 1)), layer).data
    assert np.allclose(out, np.maximum(x @ layer.weight.data + layer.bias.data, 0))


def test_gcn_zero_features(rng):
    layer = GCNLayer(3, 4, rng)
    out = gcn_forward(Tensor(np.zeros((2, 3))), sp.csr_matrix(np.array([[0, 2.0], [1.0, 0]])), layer).data
    assert np.allclose(out, np.maximum(layer.bias.data, 0)[None].repeat(2, 0))


def test_gcn_rejects_negative_weights():
    with pytest.raises(ValueError):
        normalize_adjacency(sp.csr_matrix(np.array([[0, -1.0], [0, 0]])))


def test_gcn_dimension_mismatch(rng):
    layer = GCNLayer(3, 2, rng)
    with pytest.raises(ValueError):
        gcn_forward(Tensor(np.zeros((4, 3))), sp.csr_matrix((3, 3)), layer)


def test_gcn_dense_oracle_random_graphs():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = int(rng.integers(5, 21))
        a = random_graph(rng, n)
        layer = GCNLayer(4, 3, rng)
        h = rng.normal(size=(n, 4))
        got = gcn_forward(Tensor(h), sp.csr_matrix(a), layer).data
        assert np.max(np.abs(got - dense_gcn(h, a, layer.weight.data, layer.bias.data))) < 1e-10


def test_gcn_time_axis_matches_per_step(rng):
    n, steps = 6, 4
    a = sp.csr_matrix(random_graph(rng, n))
    layer = GCNLayer(3, 2, rng)
    h = rng.normal(size=(n, steps, 3))
    together = gcn_forward(Tensor(h), a, layer).data
    for t in range(steps):
        assert np.allclose(together[:, t], gcn_forward(Tensor(h[:, t]), a, layer).data, atol=1e-14)


def test_gcn_permutation_equivariance():
    rng = np.random.default_rng(6)
    n = 12
    a = random_graph(rng, n)
    layer = GCNLayer(3, 5, rng)
    h = rng.normal(size=(n, 3))
    base = gcn_forward(Tensor(h), sp.csr_matrix(a), layer).data
    for _ in range(50):
        perm = rng.permutation(n)
        got = gcn_forward(Tensor(h[perm]), sp.csr_matrix(a[np.ix_(perm, perm)]), layer).data
        assert np.max(np.abs(got - base[perm])) < 1e-10


def test_lstm_zero_params_zero_output(rng):
    layer = LSTM(3, 4, rng)
    for prm in layer.parameters():
        prm.assign(np.zeros_like(prm.data))
    assert np.all(lstm_sequence(Tensor(rng.normal(size=(5, 3))), layer).data == 0)
    assert np.all(lstm_sequence(Tensor(np.zeros((5, 3))), layer).data == 0)


def test_lstm_single_step_hand_evaluation(rng):
    layer = LSTM(3, 2, rng)
    x = rng.normal(size=3)
    z = x @ layer.w_input.data + layer.bias.data  # h0 = 0
    i, f, g, o = sig(z[0:2]), sig(z[2:4]), np.tanh(z[4:6]), sig(z[6:8])
    c = i * g  # c0 = 0
    expected = o * np.tanh(c)
    assert np.allclose(lstm_sequence(Tensor(x[None]), layer).data, expected, atol=1e-15)


def test_lstm_two_steps_hand_evaluation(rng):
    layer = LSTM(2, 3, rng)
    xs = rng.normal(size=(2, 2))
    h = np.zeros(3)
    c = np.zeros(3)
    for x in xs:
        z = x @ layer.w_input.data + h @ layer.w_hidden.data + layer.bias.data
        i, f, g, o = sig(z[:3]), sig(z[3:6]), np.tanh(z[6:9]), sig(z[9:])
        c = f * c + i * g
        h = o * np.tanh(c)
    assert np.allclose(lstm_sequence(Tensor(xs), layer).data, h, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50))
def test_lstm_output_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    layer = LSTM(3, 4, rng)
    for prm in layer.parameters():
        prm.assign(prm.data * scale)
    out = lstm_sequence(Tensor(rng.normal(size=(6, 3)) * scale), layer).data
    assert np.all(np.abs(out) <= 1.0)


def test_lstm_rejects_empty_sequence(rng):
    with pytest.raises(ValueError):
        lstm_sequence(Tensor(np.zeros((0, 3))), LSTM(3, 2, rng))


def test_lstm_batched_matches_single(rng):
    layer = LSTM(3, 4, rng)
    xs = rng.normal(size=(5, 7, 3))
    batched = layer(Tensor(xs)).data
    for k in range(5):
        assert np.allclose(batched[k], layer(Tensor(xs[k])).data, atol=1e-14)


@pytest.mark.parametrize("which", ["mlp", "gcn", "lstm"])
def test_layer_gradchecks(which, rng):
    if which == "mlp":
        layer = MLP(3, 4, rng)
        x = Tensor(rng.normal(size=(5, 3)))
        closure = lambda: T.square(layer(x)).sum()
    elif which == "gcn":
        layer = GCNLayer(3, 4, rng)
        a = sp.csr_matrix(random_graph(rng, 6))
        x = Tensor(rng.normal(size=(6, 2, 3)))
        closure = lambda: T.square(gcn_forward(x, a, layer)).sum()
    else:
        layer = LSTM(3, 4, rng)
        x = Tensor(rng.normal(size=(2, 4, 3)))
        closure = lambda: T.square(layer(x)).sum()
    rep = gradient_check(closure, layer.named_parameters())
    assert rep.passed, str(rep)


def test_module_parameter_order_deterministic(rng):
    m = MLP(2, 3, np.random.default_rng(0))
    names = list(m.named_parameters())
    assert names == list(MLP(2, 3, np.random.default_rng(9)).named_parameters())
    assert len(set(p.id for p in m.parameters())) == len(names)


# ---------------------------------------------------------------- loss and optimizer

def test_mse_examples(rng):
    assert mse_loss(Tensor(np.array([1.0, 2.0])), np.array([1.0, 2.0])).item() == 0.0
    assert mse_loss(Tensor(np.zeros(2)), np.array([1.0, 3.0])).item() == 5.0
    assert mse_loss(Tensor(rng.normal(size=9)), rng.normal(size=9)).item() >= 0.0
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.zeros(2)), np.zeros(3))


def test_adamw_reference_step():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    opt = AdamW([p], lr=0.001, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    opt.step()
    assert abs(p.data[0] - 0.998990) < 1e-6
    assert abs(p.data[0] - (1 - 0.001 * 1 / (1 + 1e-8) - 0.001 * 0.01)) < 1e-15
    assert opt.state.t == 1


def test_adamw_zero_gradient():
    p = Parameter(np.array([2.0, -3.0]))
    adamw_step(AdamWState(weight_decay=0.0), [p])
    assert np.array_equal(p.data, [2.0, -3.0])
    q = Parameter(np.array([2.0, -3.0]))
    adamw_step(AdamWState(lr=0.001, weight_decay=0.01), [q])
    assert np.allclose(q.data, np.array([2.0, -3.0]) * (1 - 0.001 * 0.01), rtol=0, atol=1e-15)


def test_adamw_counter_and_moments():
    p = Parameter(np.ones(3))
    s = AdamWState()
    for k in range(1, 4):
        p.grad = np.full(3, 0.5)
        adamw_step(s, [p])
        assert s.t == k
    assert np.allclose(s.m[p.id], 0.5 * (1 - 0.9 ** 3))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=6))
def test_adamw_sign_property(gs):
    g = np.array(gs)
    p = Parameter(np.ones_like(g))
    p.grad = g
    s = AdamWState(beta1=0.0, beta2=0.0, eps=1e3, weight_decay=0.01)
    adamw_step(s, [p])
    step = p.data - (1 - s.lr * s.weight_decay)
    assert np.all(np.sign(step) == -np.sign(g))


def test_toy_regression_converges(rng):
    x = rng.normal(size=(40, 2))
    y = x @ np.array([1.5, -0.5]) + 0.3
    lin = Linear(2, 1, rng)
    opt = AdamW(lin.parameters(), lr=0.05, weight_decay=0.0)
    for _ in range(400):
        opt.zero_grad()
        with GradientTape() as tape:
            loss = mse_loss(lin(Tensor(x)).reshape(-1), y)
        tape.backward(loss)
        opt.step()
    assert loss.item() < 1e-6


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    arrays = {"b": rng.normal(size=(3, 4)), "a": np.array(2.5), "c.w": rng.normal(size=(2, 0, 3)),
              "d": np.array([np.pi, -0.0, 5e-324])}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == sorted(arrays)
    for k, v in arrays.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.astype("<f8").tobytes()
    save_checkpoint(tmp_path / "again.bin", dict(reversed(list(arrays.items()))))
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE0000")
    with pytest.raises(ValueError):
        load_checkpoint(p)
