"""Dense-matrix reverse-mode differentiation on an explicit tape.

Everything is 64-bit and 2-D: scalars are (1, 1) matrices, batches are
(n, d).  A :class:`Tape` records a fixed program once (shapes are checked
at record time), then `forward` / `backward` can be re-run as parameter
values change during training.  Parameter arrays are registered by
reference, so an optimizer may update them in place between passes.

The primitive set is intentionally small: matmul, broadcasting
add/sub/mul, scalar scale, column slicing, elementwise
sigmoid/tanh/relu/exp/square/abs, and a reduce-sum.  That is enough for
an LSTM cell, fully-connected stacks, and the smooth objectives built on
top of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Matrices are plain 2-D float64 ndarrays throughout this package.
Matrix = np.ndarray

# Arguments of exp/sigmoid are clamped here before exponentiation;
# sharpness-scaled surrogates can legitimately produce huge inputs.
EXP_CLAMP = 500.0


class TapeError(RuntimeError):
    """Raised for malformed tapes or out-of-order forward/backward calls."""


def as_matrix(x, name: str = "matrix") -> Matrix:
    """Validate and return ``x`` as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise TapeError(f"{name}: expected a 2-D array, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise TapeError(f"{name}: contains non-finite entries")
    return a


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -EXP_CLAMP, EXP_CLAMP)))


@dataclass
class _Node:
    op: str
    args: tuple
    aux: object
    shape: tuple
    name: str


class Tape:
    """An ordered record of primitive operations with gradient replay.

    Build the program once through the recording methods (`matmul`,
    `add`, ...), each of which returns an integer node id.  Then call
    :meth:`forward` (optionally re-binding input values) and
    :meth:`backward`.  Adjoints are reset at the start of every backward
    pass, and backward refuses to run twice on one forward pass.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._values: list = []
        self._adjoints: list = []
        self._inputs: list[int] = []
        self._params: list[int] = []
        self._param_arrays: list[np.ndarray] = []
        self._output: int | None = None
        self._forward_ran = False
        self._backward_ran = False

    # -- declarations -------------------------------------------------

    def input(self, shape, name: str = "input") -> int:
        shape = (int(shape[0]), int(shape[1]))
        nid = self._record("input", (), None, shape, name)
        self._inputs.append(nid)
        return nid

    def param(self, array: np.ndarray, name: str = "param") -> int:
        """Register a trainable array by reference (updated in place)."""
        if not isinstance(array, np.ndarray) or array.ndim != 2 or array.dtype != np.float64:
            raise TapeError(f"{name}: parameters must be 2-D float64 ndarrays")
        nid = self._record("param", (), None, array.shape, name)
        self._params.append(nid)
        self._param_arrays.append(array)
        return nid

    def const(self, array, name: str = "const") -> int:
        a = as_matrix(array, name)
        nid = self._record("const", (), a, a.shape, name)
        return nid

    # -- primitives ----------------------------------------------------

    def matmul(self, a: int, b: int, name: str = "matmul") -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa[1] != sb[0]:
            raise TapeError(f"{name}: inner dims {sa} x {sb} do not match")
        return self._record("matmul", (a, b), None, (sa[0], sb[1]), name)

    def add(self, a: int, b: int, name: str = "add") -> int:
        return self._record("add", (a, b), None, self._bshape(a, b, name), name)

    def sub(self, a: int, b: int, name: str = "sub") -> int:
        return self._record("sub", (a, b), None, self._bshape(a, b, name), name)

    def mul(self, a: int, b: int, name: str = "mul") -> int:
        return self._record("mul", (a, b), None, self._bshape(a, b, name), name)

    def scale(self, a: int, c: float, name: str = "scale") -> int:
        return self._record("scale", (a,), float(c), self._shape(a), name)

    def slice_cols(self, a: int, start: int, stop: int, name: str = "slice") -> int:
        sa = self._shape(a)
        if not (0 <= start < stop <= sa[1]):
            raise TapeError(f"{name}: column range [{start}:{stop}) out of bounds for {sa}")
        return self._record("slice", (a,), (start, stop), (sa[0], stop - start), name)

    def concat_cols(self, a: int, b: int, name: str = "concat") -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa[0] != sb[0]:
            raise TapeError(f"{name}: row counts {sa} and {sb} differ")
        return self._record("concat", (a, b), sa[1], (sa[0], sa[1] + sb[1]), name)

    def sigmoid(self, a: int, name: str = "sigmoid") -> int:
        return self._record("sigmoid", (a,), None, self._shape(a), name)

    def tanh(self, a: int, name: str = "tanh") -> int:
        return self._record("tanh", (a,), None, self._shape(a), name)

    def relu(self, a: int, name: str = "relu") -> int:
        return self._record("relu", (a,), None, self._shape(a), name)

    def exp(self, a: int, name: str = "exp") -> int:
        return self._record("exp", (a,), None, self._shape(a), name)

    def square(self, a: int, name: str = "square") -> int:
        return self._record("square", (a,), None, self._shape(a), name)

    def absval(self, a: int, name: str = "abs") -> int:
        return self._record("abs", (a,), None, self._shape(a), name)

    def sum(self, a: int, name: str = "sum") -> int:
        return self._record("sum", (a,), None, (1, 1), name)

    # -- execution -----------------------------------------------------

    def forward(self, inputs=None) -> Matrix:
        """Run the recorded program and return the output node's value."""
        if self._output is None:
            if not self._nodes:
                raise TapeError("empty tape")
            self._output = len(self._nodes) - 1
        inputs = [] if inputs is None else list(inputs)
        if len(inputs) != len(self._inputs):
            raise TapeError(
                f"expected {len(self._inputs)} input arrays, got {len(inputs)}"
            )
        bound = {}
        for nid, arr in zip(self._inputs, inputs):
            node = self._nodes[nid]
            a = as_matrix(arr, node.name)
            if a.shape != node.shape:
                raise TapeError(
                    f"input '{node.name}' (node {nid}): expected shape "
                    f"{node.shape}, got {a.shape}"
                )
            bound[nid] = a
        vals = self._values
        pidx = 0
        for nid, node in enumerate(self._nodes):
            op = node.op
            if op == "input":
                vals[nid] = bound[nid]
            elif op == "param":
                arr = self._param_arrays[pidx]
                pidx += 1
                if arr.shape != node.shape:
                    raise TapeError(
                        f"param '{node.name}' (node {nid}): shape changed from "
                        f"{node.shape} to {arr.shape}"
                    )
                vals[nid] = arr
            elif op == "const":
                vals[nid] = node.aux
            elif op == "matmul":
                vals[nid] = vals[node.args[0]] @ vals[node.args[1]]
            elif op == "add":
                vals[nid] = vals[node.args[0]] + vals[node.args[1]]
            elif op == "sub":
                vals[nid] = vals[node.args[0]] - vals[node.args[1]]
            elif op == "mul":
                vals[nid] = vals[node.args[0]] * vals[node.args[1]]
            elif op == "scale":
                vals[nid] = vals[node.args[0]] * node.aux
            elif op == "slice":
                start, stop = node.aux
                vals[nid] = vals[node.args[0]][:, start:stop]
            elif op == "concat":
                vals[nid] = np.hstack([vals[node.args[0]], vals[node.args[1]]])
            elif op == "sigmoid":
                vals[nid] = sigmoid(vals[node.args[0]])
            elif op == "tanh":
                vals[nid] = np.tanh(vals[node.args[0]])
            elif op == "relu":
                vals[nid] = np.maximum(vals[node.args[0]], 0.0)
            elif op == "exp":
                vals[nid] = np.exp(np.clip(vals[node.args[0]], -EXP_CLAMP, EXP_CLAMP))
            elif op == "square":
                vals[nid] = vals[node.args[0]] ** 2
            elif op == "abs":
                vals[nid] = np.abs(vals[node.args[0]])
            elif op == "sum":
                vals[nid] = np.array([[vals[node.args[0]].sum()]])
            else:  # pragma: no cover
                raise TapeError(f"unknown op '{op}'")
        self._forward_ran = True
        self._backward_ran = False
        return vals[self._output]

    def backward(self) -> list[Matrix]:
        """Accumulate adjoints and return one gradient per parameter.

        Requires a scalar (1, 1) output and a preceding forward pass;
        a second backward without a fresh forward is refused.
        """
        if not self._forward_ran:
            raise TapeError("backward called before forward")
        if self._backward_ran:
            raise TapeError("backward already ran for this forward pass")
        out = self._output
        if self._nodes[out].shape != (1, 1):
            raise TapeError(
                f"backward needs a scalar output, got shape {self._nodes[out].shape}"
            )
        vals = self._values
        adj = self._adjoints
        for nid, node in enumerate(self._nodes):
            adj[nid] = np.zeros(node.shape)
        adj[out][0, 0] = 1.0
        for nid in range(out, -1, -1):
            node = self._nodes[nid]
            g = adj[nid]
            op = node.op
            if op in ("input", "param", "const"):
                continue
            if op == "matmul":
                a, b = node.args
                adj[a] += g @ vals[b].T
                adj[b] += vals[a].T @ g
            elif op == "add":
                a, b = node.args
                adj[a] += _unbroadcast(g, self._nodes[a].shape)
                adj[b] += _unbroadcast(g, self._nodes[b].shape)
            elif op == "sub":
                a, b = node.args
                adj[a] += _unbroadcast(g, self._nodes[a].shape)
                adj[b] -= _unbroadcast(g, self._nodes[b].shape)
            elif op == "mul":
                a, b = node.args
                adj[a] += _unbroadcast(g * vals[b], self._nodes[a].shape)
                adj[b] += _unbroadcast(g * vals[a], self._nodes[b].shape)
            elif op == "scale":
                adj[node.args[0]] += g * node.aux
            elif op == "slice":
                start, stop = node.aux
                adj[node.args[0]][:, start:stop] += g
            elif op == "concat":
                split = node.aux
                adj[node.args[0]] += g[:, :split]
                adj[node.args[1]] += g[:, split:]
            elif op == "sigmoid":
                s = vals[nid]
                adj[node.args[0]] += g * s * (1.0 - s)
            elif op == "tanh":
                t = vals[nid]
                adj[node.args[0]] += g * (1.0 - t * t)
            elif op == "relu":
                adj[node.args[0]] += g * (vals[node.args[0]] > 0.0)
            elif op == "exp":
                adj[node.args[0]] += g * vals[nid]
            elif op == "square":
                adj[node.args[0]] += g * 2.0 * vals[node.args[0]]
            elif op == "abs":
                adj[node.args[0]] += g * np.sign(vals[node.args[0]])
            elif op == "sum":
                adj[node.args[0]] += g[0, 0]
        self._backward_ran = True
        return [adj[nid].copy() for nid in self._params]

    # -- introspection ---------------------------------------------------

    def value(self, nid: int) -> Matrix:
        if not self._forward_ran:
            raise TapeError("no forward pass has run")
        return self._values[nid]

    @property
    def param_arrays(self) -> list[np.ndarray]:
        return list(self._param_arrays)

    @property
    def n_inputs(self) -> int:
        return len(self._inputs)

    # -- internals -------------------------------------------------------

    def _record(self, op, args, aux, shape, name) -> int:
        self._nodes.append(_Node(op, args, aux, shape, name))
        self._values.append(None)
        self._adjoints.append(None)
        self._forward_ran = False
        self._output = None
        return len(self._nodes) - 1

    def _shape(self, nid: int) -> tuple:
        return self._nodes[nid].shape

    def _bshape(self, a: int, b: int, name: str) -> tuple:
        sa, sb = self._shape(a), self._shape(b)
        if sa == sb:
            return sa
        # Scalar, row-vector, and column-vector broadcasting.
        if sb == (1, 1) or (sb[0] == 1 and sb[1] == sa[1]) or (sb[1] == 1 and sb[0] == sa[0]):
            return sa
        if sa == (1, 1) or (sa[0] == 1 and sa[1] == sb[1]) or (sa[1] == 1 and sa[0] == sb[0]):
            return sb
        raise TapeError(f"{name}: shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return np.array([[g.sum()]])
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=1, keepdims=True)


def forward_eval(tape: Tape, inputs=None) -> Matrix:
    """Evaluate the tape's final node given input values."""
    return tape.forward(inputs)


def backward_grad(tape: Tape) -> list[Matrix]:
    """Gradient of the tape's scalar output w.r.t. every parameter."""
    return tape.backward()


# -- finite-difference gradient checking -------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: list[float]
    failures: list[tuple[str, int, float]]  # (param name, flat index, rel err)
    tolerance: float

    @property
    def ok(self) -> bool:
        return not self.failures


def finite_difference_check(
    tape: Tape,
    inputs=None,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward gradients against central finite differences.

    The tape output must be scalar.  Perturbs every parameter entry (or a
    deterministic random subset when ``max_entries_per_param`` is set) and
    reports per-parameter maximum relative errors.
    """
    tape.forward(inputs)
    grads = tape.backward()
    names = [tape._nodes[nid].name for nid in tape._params]
    per_param = []
    failures = []
    worst = 0.0
    for arr, g, name in zip(tape._param_arrays, grads, names):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            r = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(r.choice(flat.size, size=max_entries_per_param, replace=False))
        pmax = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = tape.forward(inputs)[0, 0]
            flat[i] = orig - step
            fm = tape.forward(inputs)[0, 0]
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            denom = max(abs(fd), abs(gflat[i]), 1.0)
            rel = abs(fd - gflat[i]) / denom
            if rel > pmax:
                pmax = rel
            if rel > tolerance:
                failures.append((name, int(i), float(rel)))
        per_param.append(pmax)
        worst = max(worst, pmax)
    # Leave the tape in a consistent forward state.
    tape.forward(inputs)
    return GradCheckReport(worst, per_param, failures, tolerance)


# -- layer containers ---------------------------------------------------


@dataclass
class DenseParams:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (1, fan_out)


@dataclass
class FcStack:
    """A fully-connected stack; hidden activation applies to all but the last layer."""

    layers: list[DenseParams]
    activation: str = "tanh"  # tanh | relu | linear

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for lay in self.layers:
            out.extend([lay.weight, lay.bias])
        return out

    def to_json(self) -> dict:
        return {
            "activation": self.activation,
            "layers": [
                {"weight": lay.weight.tolist(), "bias": lay.bias.tolist()}
                for lay in self.layers
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FcStack":
        layers = [
            DenseParams(
                np.asarray(lay["weight"], dtype=np.float64),
                np.asarray(lay["bias"], dtype=np.float64),
            )
            for lay in obj["layers"]
        ]
        return cls(layers, obj["activation"])


def fc_init(rng: np.random.Generator, dims: list[int], activation: str = "tanh") -> FcStack:
    """Initialize dense layers with 1/sqrt(fan_in)-scaled normal weights."""
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        b = np.zeros((1, fan_out))
        layers.append(DenseParams(w, b))
    return FcStack(layers, activation)


def fc_register(tape: Tape, stack: FcStack, name: str = "fc") -> list[tuple[int, int]]:
    refs = []
    for li, lay in enumerate(stack.layers):
        w = tape.param(lay.weight, f"{name}.w{li}")
        b = tape.param(lay.bias, f"{name}.b{li}")
        refs.append((w, b))
    return refs


def fc_apply(tape: Tape, refs: list[tuple[int, int]], x: int, activation: str) -> int:
    h = x
    last = len(refs) - 1
    for li, (w, b) in enumerate(refs):
        h = tape.add(tape.matmul(h, w), b)
        if li < last:
            if activation == "tanh":
                h = tape.tanh(h)
            elif activation == "relu":
                h = tape.relu(h)
            elif activation != "linear":
                raise TapeError(f"unknown activation '{activation}'")
    return h


def fc_forward_np(stack: FcStack, x: np.ndarray) -> np.ndarray:
    h = x
    last = len(stack.layers) - 1
    for li, lay in enumerate(stack.layers):
        h = h @ lay.weight + lay.bias
        if li < last:
            if stack.activation == "tanh":
                h = np.tanh(h)
            elif stack.activation == "relu":
                h = np.maximum(h, 0.0)
    return h


@dataclass
class LstmParams:
    """One recurrent cell; gate columns are laid out as [input|forget|cell|output]."""

    wx: np.ndarray  # (in_dim, 4h)
    wh: np.ndarray  # (h, 4h)
    bias: np.ndarray  # (1, 4h)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.wx, self.wh, self.bias]

    def to_json(self) -> dict:
        return {
            "wx": self.wx.tolist(),
            "wh": self.wh.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LstmParams":
        return cls(
            np.asarray(obj["wx"], dtype=np.float64),
            np.asarray(obj["wh"], dtype=np.float64),
            np.asarray(obj["bias"], dtype=np.float64),
        )


def lstm_init(rng: np.random.Generator, in_dim: int, hidden: int) -> LstmParams:
    wx = rng.standard_normal((in_dim, 4 * hidden)) / np.sqrt(in_dim)
    wh = rng.standard_normal((hidden, 4 * hidden)) / np.sqrt(hidden)
    bias = np.zeros((1, 4 * hidden))
    bias[0, hidden:2 * hidden] = 1.0  # forget-gate bias keeps early gradients alive
    return LstmParams(wx, wh, bias)


def lstm_register(tape: Tape, params: LstmParams, name: str = "lstm") -> tuple[int, int, int]:
    return (
        tape.param(params.wx, f"{name}.wx"),
        tape.param(params.wh, f"{name}.wh"),
        tape.param(params.bias, f"{name}.bias"),
    )


def lstm_step(tape: Tape, refs: tuple[int, int, int], x: int, h: int, c: int,
              hidden: int) -> tuple[int, int]:
    wx, wh, bias = refs
    z = tape.add(tape.add(tape.matmul(x, wx), tape.matmul(h, wh)), bias, "lstm.z")
    i = tape.sigmoid(tape.slice_cols(z, 0, hidden), "lstm.i")
    f = tape.sigmoid(tape.slice_cols(z, hidden, 2 * hidden), "lstm.f")
    g = tape.tanh(tape.slice_cols(z, 2 * hidden, 3 * hidden), "lstm.g")
    o = tape.sigmoid(tape.slice_cols(z, 3 * hidden, 4 * hidden), "lstm.o")
    c_new = tape.add(tape.mul(f, c), tape.mul(i, g), "lstm.c")
    h_new = tape.mul(o, tape.tanh(c_new), "lstm.h")
    return h_new, c_new


def lstm_forward_np(params: LstmParams, xs: np.ndarray) -> np.ndarray:
    """Run the cell over xs of shape (n, steps, in_dim); returns (n, steps, h)."""
    n, steps, _ = xs.shape
    hdim = params.hidden
    h = np.zeros((n, hdim))
    c = np.zeros((n, hdim))
    out = np.empty((n, steps, hdim))
    for t in range(steps):
        z = xs[:, t, :] @ params.wx + h @ params.wh + params.bias
        i = sigmoid(z[:, :hdim])
        f = sigmoid(z[:, hdim:2 * hdim])
        g = np.tanh(z[:, 2 * hdim:3 * hdim])
        o = sigmoid(z[:, 3 * hdim:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[:, t, :] = h
    return out


class Adam:
    """Adaptive-moment gradient steps over a fixed list of parameter arrays.

    Arrays are updated in place so tapes that registered them see fresh
    values on the next forward pass.
    """

    def __init__(self, params: list[np.ndarray], lr: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
