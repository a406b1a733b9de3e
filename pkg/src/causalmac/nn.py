"""Parameter storage, the layers the networks need, and the Adam optimizer.

All learnable weights live in a named ParameterStore so that checkpointing,
weight-decay and the shared-key-vector requirement fall out of one
mechanism: layers hold references to store entries, never copies.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, UsageError

CHECKPOINT_FORMAT_VERSION = 1

WEIGHT_INIT_STD = 0.01  # weights ~ N(0, 0.01 std); biases zero


class ParameterStore:
    """Named map from parameter path to a requires_grad Tensor."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        """Bit-exact copy of every parameter array."""
        return {k: t.data.copy() for k, t in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        if set(snap) != set(self._params):
            raise ContractError("snapshot names do not match the store")
        for k, arr in snap.items():
            t = self._params[k]
            if arr.shape != t.data.shape:
                raise ContractError(f"shape mismatch restoring {k!r}")
            t.data = arr.copy()

    def save(self, path):
        """Checkpoint: numpy .npz archive plus a version entry.

        Layout: one float64 array per parameter under its path name, and a
        reserved ``__version__`` scalar. Round-trips every bit.
        """
        payload = {k: t.data for k, t in self._params.items()}
        payload["__version__"] = np.asarray(CHECKPOINT_FORMAT_VERSION)
        np.savez(path, **payload)

    def load(self, path):
        with np.load(path) as zf:
            if "__version__" not in zf:
                raise UsageError(f"{path}: missing checkpoint version header")
            version = int(zf["__version__"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise UsageError(f"{path}: unsupported checkpoint version {version}")
            snap = {k: zf[k] for k in zf.files if k != "__version__"}
        self.restore(snap)

    def squared_norm(self) -> Tensor:
        """Differentiable sum of squares over every parameter."""
        total = Tensor(0.0)
        for t in self._params.values():
            total = total + ad.tsum(ad.square(t))
        return total


def init_weight(store: ParameterStore, name: str, shape, rng: np.random.Generator,
                std: float = WEIGHT_INIT_STD) -> Tensor:
    return store.add(name, rng.normal(0.0, std, size=shape))


def init_bias(store: ParameterStore, name: str, size: int) -> Tensor:
    return store.add(name, np.zeros(size))


class Affine:
    """x @ w + b with w: (in, out), b: (out,)."""

    def __init__(self, store: ParameterStore, prefix: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = init_weight(store, f"{prefix}/w", (in_dim, out_dim), rng)
        self.b = init_bias(store, f"{prefix}/b", out_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class MLP:
    """Affine chain with an activation after every layer except the last."""

    def __init__(self, store: ParameterStore, prefix: str, sizes: list[int],
                 rng: np.random.Generator, activation: str = "relu",
                 activate_last: bool = False):
        if len(sizes) < 2:
            raise ContractError("MLP needs at least input and output sizes")
        self.layers = [
            Affine(store, f"{prefix}/l{i}", sizes[i], sizes[i + 1], rng)
            for i in range(len(sizes) - 1)
        ]
        self.act = _ACTIVATIONS[activation]
        self.activate_last = activate_last

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.activate_last:
                x = self.act(x)
        return x


class GruCell:
    """Standard gated recurrent unit.

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    h~ = tanh(x W_h + (r*h) U_h + b_h)
    h' = (1-z)*h + z*h~
    """

    def __init__(self, store: ParameterStore, prefix: str, input_dim: int,
                 hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.w_z = init_weight(store, f"{prefix}/w_z", (input_dim, hidden_dim), rng)
        self.u_z = init_weight(store, f"{prefix}/u_z", (hidden_dim, hidden_dim), rng)
        self.b_z = init_bias(store, f"{prefix}/b_z", hidden_dim)
        self.w_r = init_weight(store, f"{prefix}/w_r", (input_dim, hidden_dim), rng)
        self.u_r = init_weight(store, f"{prefix}/u_r", (hidden_dim, hidden_dim), rng)
        self.b_r = init_bias(store, f"{prefix}/b_r", hidden_dim)
        self.w_h = init_weight(store, f"{prefix}/w_h", (input_dim, hidden_dim), rng)
        self.u_h = init_weight(store, f"{prefix}/u_h", (hidden_dim, hidden_dim), rng)
        self.b_h = init_bias(store, f"{prefix}/b_h", hidden_dim)

    def step(self, hidden: Tensor, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim or hidden.shape[-1] != self.hidden_dim:
            raise ContractError(
                f"gru_step dims: input {x.shape} vs {self.input_dim}, "
                f"hidden {hidden.shape} vs {self.hidden_dim}"
            )
        z = ad.sigmoid(ad.matmul(x, self.w_z) + ad.matmul(hidden, self.u_z) + self.b_z)
        r = ad.sigmoid(ad.matmul(x, self.w_r) + ad.matmul(hidden, self.u_r) + self.b_r)
        cand = ad.tanh(ad.matmul(x, self.w_h) + ad.matmul(r * hidden, self.u_h) + self.b_h)
        one = Tensor(np.ones_like(z.data))
        return (one - z) * hidden + z * cand

    def run(self, inputs: list[Tensor], batch: int) -> Tensor:
        """Fold a sequence of (batch, input_dim) tensors; empty sequence
        returns the zero initial hidden state."""
        h = Tensor(np.zeros((batch, self.hidden_dim)))
        for x in inputs:
            h = self.step(h, x)
        return h


def gru_step(cell: GruCell, hidden: Tensor, x: Tensor) -> Tensor:
    return cell.step(hidden, x)


class Adam:
    """Adaptive-moment optimizer with bias correction.

    ``weight_decay`` is the coupled L2 coefficient lambda: it adds
    2*lambda*param to the raw gradient, implementing a lambda*||w||^2
    penalty without materializing it in the loss.
    """

    def __init__(self, store: ParameterStore, lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(t.data) for k, t in store._params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in store._params.items()}

    def step(self):
        """Apply one update from the gradients currently in the store."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.store._params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay != 0.0:
                g = g + 2.0 * self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_update(store: ParameterStore, optimizer: Adam):
    """One optimizer step followed by clearing the gradients."""
    optimizer.step()
    store.zero_grad()
