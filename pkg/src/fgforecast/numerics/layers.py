"""The three layer types the forecaster needs: MLP, weighted GCN, LSTM."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import Parameter, Tensor, add, concat, matmul, relu, sigmoid, spmm, tanh


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Named parameter container; ``parameters()`` order is deterministic."""

    def parameters(self) -> list[Parameter]:
        out = []
        for key in sorted(vars(self)):
            value = getattr(self, key)
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for m in value:
                    out.extend(m.parameters())
        return out

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key in sorted(vars(self)):
            value = getattr(self, key)
            if isinstance(value, Parameter):
                out[prefix + key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{key}."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    out.update(m.named_parameters(f"{prefix}{key}.{i}."))
        return out


class Linear(Module):
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator):
        self.f_in, self.f_out = f_in, f_out
        self.weight = Parameter(uniform_init(rng, (f_in, f_out), f_in), name="weight")
        self.bias = Parameter(uniform_init(rng, (f_out,), f_in), name="bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.f_in:
            raise ValueError(f"Linear expects trailing dim {self.f_in}, got {x.shape}")
        return add(matmul_lead(x, self.weight), self.bias)


class MLP(Module):
    """One ReLU hidden layer followed by an affine output layer.

    The hidden width defaults to ``f_out``.  Leading dimensions broadcast.
    """

    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = f_out if hidden is None else hidden
        self.hidden = Linear(f_in, hidden, rng)
        self.output = Linear(hidden, f_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.output(relu(self.hidden(x)))


def mlp_forward(x: Tensor, layer: MLP) -> Tensor:
    return layer(x)


def normalize_adjacency(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` with D the row sums of ``A + I``."""
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if a.nnz and a.data.min() < 0:
        raise ValueError("adjacency has negative edge weights")
    a_hat = a + sp.identity(a.shape[0], format="csr")
    d = np.asarray(a_hat.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(d))
    return (d_inv_sqrt @ a_hat @ d_inv_sqrt).tocsr()


class GCNLayer(Module):
    """Kipf-Welling propagation ``relu(Â_norm H W + b)`` on a pre-normalized graph.

    ``h`` may carry trailing non-node axes, e.g. ``[N, T, F_in]``; the same
    propagation is applied along every one of them.
    """

    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator, activation: str = "relu"):
        self.f_in, self.f_out = f_in, f_out
        self.weight = Parameter(uniform_init(rng, (f_in, f_out), f_in), name="weight")
        self.bias = Parameter(uniform_init(rng, (f_out,), f_in), name="bias")
        if activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    def __call__(self, h: Tensor, norm_adj: sp.csr_matrix) -> Tensor:
        if h.shape[-1] != self.f_in:
            raise ValueError(f"GCN expects feature dim {self.f_in}, got {h.shape}")
        if norm_adj.shape[0] != h.shape[0]:
            raise ValueError(f"adjacency {norm_adj.shape} does not match {h.shape[0]} nodes")
        hw = matmul_lead(h, self.weight)
        flat = hw.reshape(h.shape[0], -1)
        out = spmm(norm_adj, flat).reshape(hw.shape)
        out = add(out, self.bias)
        return relu(out) if self.activation == "relu" else out


def gcn_forward(h: Tensor, adjacency: sp.spmatrix, layer: GCNLayer) -> Tensor:
    return layer(h, normalize_adjacency(adjacency))


class LSTM(Module):
    """Single-layer LSTM; gate order in the packed weights is (i, f, g, o)."""

    def __init__(self, f_in: int, hidden: int, rng: np.random.Generator):
        self.f_in, self.n_hidden = f_in, hidden
        self.w_input = Parameter(uniform_init(rng, (f_in, 4 * hidden), hidden), name="w_input")
        self.w_hidden = Parameter(uniform_init(rng, (hidden, 4 * hidden), hidden), name="w_hidden")
        self.bias = Parameter(uniform_init(rng, (4 * hidden,), hidden), name="bias")

    def __call__(self, inputs: Tensor, return_sequence: bool = False):
        """Run over ``inputs [..., T, F_in]`` from a zero state.

        Returns the final hidden state ``[..., H]``, or the full sequence
        ``[..., T, H]`` when ``return_sequence`` is set.
        """
        if inputs.ndim < 2 or inputs.shape[-2] < 1:
            raise ValueError("LSTM needs at least one time step")
        if inputs.shape[-1] != self.f_in:
            raise ValueError(f"LSTM expects input dim {self.f_in}, got {inputs.shape}")
        steps = inputs.shape[-2]
        n = self.n_hidden
        lead = inputs.shape[:-2]
        # input projection for all steps at once
        xw = add(matmul_lead(inputs, self.w_input), self.bias)
        h = Tensor(np.zeros(lead + (n,)))
        c = Tensor(np.zeros(lead + (n,)))
        seq = []
        for t in range(steps):
            z = add(xw[..., t, :], matmul_lead(h, self.w_hidden))
            i = sigmoid(z[..., 0:n])
            f = sigmoid(z[..., n : 2 * n])
            g = tanh(z[..., 2 * n : 3 * n])
            o = sigmoid(z[..., 3 * n : 4 * n])
            c = add(f * c, i * g)
            h = o * tanh(c)
            if return_sequence:
                seq.append(h.reshape(lead + (1, n)))
        if return_sequence:
            return concat(seq, axis=-2)
        return h


def matmul_lead(h: Tensor, w: Tensor) -> Tensor:
    """``h [..., H] @ w [H, K]`` for any number of leading axes (incl. none)."""
    if h.ndim == 2:
        return matmul(h, w)
    lead = h.shape[:-1]
    return matmul(h.reshape(-1, h.shape[-1]), w).reshape(lead + (w.shape[-1],))


def lstm_sequence(inputs: Tensor, layer: LSTM) -> Tensor:
    return layer(inputs)
