"""
Dense-matrix reverse-mode differentiation core.

Every value is a 2-D float64 numpy array wrapped in a `Matrix`. Operations on
matrices that belong to a `Tape` are recorded in execution order together with
a backward rule; `backward` replays the tape in reverse and returns one
gradient per watched parameter. Matrices without a tape are plain constants
and nothing is recorded for them, which keeps evaluation passes cheap.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
NORM_EPS = 1e-12
# cosines this close to +-1 are rounding noise and snap to +-1
UNIT_TOL = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Matrix:
    __slots__ = ("value", "grad", "tape", "name", "_parents", "_backward")

    def __init__(self, value, tape: Optional["Tape"] = None, name: Optional[str] = None):
        value = np.asarray(value, dtype=DTYPE)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim != 2:
            raise ShapeError(f"Matrix values must be 2-D, got shape {value.shape}")
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.name = name
        self._parents: Tuple["Matrix", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        where = "tape" if self.tape is not None else "const"
        return f"Matrix({self.rows}x{self.cols}, {where}{', ' + self.name if self.name else ''})"


class Tape:
    """
    Ordered record of executed differentiable operations.
    """

    def __init__(self):
        self.nodes: List[Matrix] = []
        self.params: Dict[str, Matrix] = {}

    def watch(self, value: np.ndarray, name: str) -> Matrix:
        if name in self.params:
            raise ContractError(f"parameter {name!r} already watched on this tape")
        leaf = Matrix(value, tape=self, name=name)
        self.params[name] = leaf
        return leaf

    def record(self, value: np.ndarray, parents: Sequence[Matrix], backward: BackwardFn) -> Matrix:
        node = Matrix(value, tape=self)
        node._parents = tuple(parents)
        node._backward = backward
        self.nodes.append(node)
        return node


def constant(value) -> Matrix:
    return Matrix(value)


def record(value: np.ndarray, parents: Sequence[Matrix], backward: BackwardFn) -> Matrix:
    """
    Wrap an op result; recorded on the first tape found among `parents`.
    """
    tape = next((p.tape for p in parents if p.tape is not None), None)
    if tape is None:
        return Matrix(value)
    for parent in parents:
        if parent.tape is not None and parent.tape is not tape:
            raise ContractError("operands belong to different tapes")
    return tape.record(value, parents, backward)


def _same_shape(op: str, a: Matrix, b: Matrix) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


# =====================================================================
# FORWARD OPERATIONS
# =====================================================================


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return record(av @ bv, (a, b), backward)


def elementwise(a: Matrix, kind: str) -> Matrix:
    x = a.value
    if kind == "relu":
        out = np.maximum(x, 0.0)
        active = x > 0.0

        def backward(g):
            return (g * active,)

    elif kind == "tanh":
        out = np.tanh(x)

        def backward(g):
            return (g * (1.0 - out * out),)

    elif kind == "abs":
        out = np.abs(x)
        sign = np.sign(x)

        def backward(g):
            return (g * sign,)

    elif kind == "log":
        if np.any(x <= 0.0):
            raise ParameterError("log of a non-positive entry")
        out = np.log(x)

        def backward(g):
            return (g / x,)

    else:
        raise ParameterError(f"unknown elementwise kind {kind!r}")
    return record(out, (a,), backward)


def softmax_rows(a: Matrix) -> Matrix:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record(out, (a,), backward)


def log_softmax_rows(a: Matrix) -> Matrix:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return record(out, (a,), backward)


def _normalize(x: np.ndarray, eps: float):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    return x / denom, norms, denom


def _normalize_backward(g, y, norms, denom, eps):
    radial = (g * y).sum(axis=1, keepdims=True)
    projected = np.where(norms > eps, g - y * radial, g)
    return projected / denom


def l2_normalize_rows(a: Matrix, eps: float = NORM_EPS) -> Matrix:
    if eps <= 0:
        raise ParameterError("eps must be positive")
    y, norms, denom = _normalize(a.value, eps)

    def backward(g):
        return (_normalize_backward(g, y, norms, denom, eps),)

    return record(y, (a,), backward)


def cosine_similarity_matrix(a: Matrix, eps: float = NORM_EPS) -> Matrix:
    if a.rows < 1:
        raise ShapeError("cosine similarity needs at least one row")
    u, norms, denom = _normalize(a.value, eps)
    sim = u @ u.T
    sim = 0.5 * (sim + sim.T)
    np.clip(sim, -1.0, 1.0, out=sim)
    unit = np.abs(sim) >= 1.0 - UNIT_TOL
    sim[unit] = np.sign(sim[unit])
    nonzero = norms[:, 0] > eps
    diag = np.arange(a.rows)
    sim[diag, diag] = np.where(nonzero, 1.0, 0.0)

    def backward(g):
        gu = (g + g.T) @ u
        return (_normalize_backward(gu, u, norms, denom, eps),)

    return record(sim, (a,), backward)


def topk_mean_columns(a: Matrix, k: int) -> Matrix:
    if not 1 <= k <= a.rows:
        raise ParameterError(f"k={k} outside [1, {a.rows}]")
    # stable sort on the negated values keeps the lowest row index first on ties
    order = np.argsort(-a.value, axis=0, kind="stable")[:k]
    out = np.take_along_axis(a.value, order, axis=0).mean(axis=0, keepdims=True)
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(grad, order, np.broadcast_to(g / k, order.shape), axis=0)
        return (grad,)

    return record(out, (a,), backward)


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(shape) >= p).astype(DTYPE) / (1.0 - p)


def dropout(
    a: Matrix,
    p: float,
    rng: Optional[np.random.Generator],
    training: bool,
    mask: Optional[np.ndarray] = None,
) -> Matrix:
    """
    Inverted dropout; identity at inference or when p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability {p} outside [0, 1)")
    if not training or (p == 0.0 and mask is None):
        return a
    if mask is None:
        mask = dropout_mask(a.shape, p, rng)
    return mul_const(a, mask)


def add(a: Matrix, b: Matrix) -> Matrix:
    _same_shape("add", a, b)
    return record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Matrix, b: Matrix) -> Matrix:
    _same_shape("sub", a, b)
    return record(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a: Matrix, factor: float) -> Matrix:
    return record(a.value * factor, (a,), lambda g: (g * factor,))


def affine(a: Matrix, factor: float, shift: float) -> Matrix:
    return record(a.value * factor + shift, (a,), lambda g: (g * factor,))


def add_bias(a: Matrix, bias: Matrix) -> Matrix:
    if bias.rows != 1 or bias.cols != a.cols:
        raise ShapeError(f"bias shape {bias.shape} does not fit {a.shape}")
    return record(a.value + bias.value, (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul_const(a: Matrix, c: np.ndarray) -> Matrix:
    c = np.asarray(c, dtype=DTYPE)
    if c.shape != a.shape:
        raise ShapeError(f"mask shape {c.shape} does not fit {a.shape}")
    return record(a.value * c, (a,), lambda g: (g * c,))


def transpose(a: Matrix) -> Matrix:
    return record(a.value.T.copy(), (a,), lambda g: (g.T,))


def select_row(a: Matrix, i: int) -> Matrix:
    if not 0 <= i < a.rows:
        raise ParameterError(f"row {i} outside [0, {a.rows})")
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape, dtype=DTYPE)
        grad[i] = g[0]
        return (grad,)

    return record(a.value[i : i + 1].copy(), (a,), backward)


def column_sum(a: Matrix) -> Matrix:
    shape = a.shape
    return record(
        a.value.sum(axis=0, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape
    return record(
        np.array([[a.value.sum()]]),
        (a,),
        lambda g: (np.full(shape, g[0, 0], dtype=DTYPE),),
    )


def cosine_rows(a: Matrix, b: Matrix, eps: float = NORM_EPS) -> Matrix:
    """
    Cosine similarity of two 1 x d rows; 0 when either row is (near) zero.
    """
    if a.rows != 1 or b.rows != 1 or a.cols != b.cols:
        raise ShapeError(f"cosine_rows needs two 1xd rows, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    na = float(np.sqrt((av * av).sum()))
    nb = float(np.sqrt((bv * bv).sum()))
    if na <= eps or nb <= eps:
        return record(np.zeros((1, 1)), (a, b), lambda g: (None, None))
    cos = float((av * bv).sum()) / (na * nb)

    def backward(g):
        s = g[0, 0]
        ga = s * (bv / (na * nb) - cos * av / (na * na))
        gb = s * (av / (na * nb) - cos * bv / (nb * nb))
        return ga, gb

    return record(np.array([[cos]]), (a, b), backward)


def total(terms: Iterable[Matrix]) -> Matrix:
    """
    Sum of 1x1 terms; a constant 0 when there are none.
    """
    acc = None
    for term in terms:
        acc = term if acc is None else add(acc, term)
    return acc if acc is not None else constant(0.0)


# =====================================================================
# REVERSE PASS
# =====================================================================


def backward(tape: Tape, loss: Matrix) -> Dict[str, np.ndarray]:
    """
    Accumulate d loss / d parameter for every parameter watched on `tape`.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    for param in tape.params.values():
        param.grad = None

    if loss.tape is tape:
        loss.grad = np.ones((1, 1), dtype=DTYPE)
        for node in reversed(tape.nodes):
            if node.grad is None or node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or parent.tape is not tape:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
    elif loss.tape is not None:
        raise ContractError("loss was recorded on a different tape")

    return {
        name: param.grad if param.grad is not None else np.zeros_like(param.value)
        for name, param in tape.params.items()
    }


# =====================================================================
# OPTIMIZER
# =====================================================================


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState
) -> Dict[str, np.ndarray]:
    """
    One bias-corrected Adam update; returns new parameter arrays.
    """
    for name, value in params.items():
        if name not in grads:
            raise ShapeError(f"no gradient for parameter {name!r}")
        if grads[name].shape != value.shape:
            raise ShapeError(
                f"gradient shape {grads[name].shape} does not match parameter {name!r} {value.shape}"
            )
        if name in state.m and state.m[name].shape != value.shape:
            raise ShapeError(f"moment buffer shape mismatch for {name!r}")

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step

    updated = {}
    for name, value in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        updated[name] = value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return updated


# =====================================================================
# FINITE-DIFFERENCE VERIFICATION
# =====================================================================


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    loss_fn: Callable[[Dict[str, Matrix]], Matrix],
    params: Dict[str, np.ndarray],
    step: float = 1e-5,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-5,
    corrupt: Optional[str] = None,
) -> Dict[str, float]:
    """
    Compare analytic gradients of `loss_fn` with central finite differences.

    `loss_fn` receives a dict of Matrix objects keyed like `params`. At most
    `samples` coordinates per block are probed: half with the largest analytic
    magnitude, the rest at random. Returns the max relative error per block.
    `corrupt` names a block whose analytic gradient is deliberately perturbed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {name: np.ascontiguousarray(value, dtype=DTYPE) for name, value in params.items()}
    tape = Tape()
    watched = {name: tape.watch(value, name) for name, value in params.items()}
    grads = backward(tape, loss_fn(watched))
    if corrupt is not None:
        if corrupt not in grads:
            raise ParameterError(f"unknown parameter block {corrupt!r}")
        grads[corrupt] = grads[corrupt] + 1.0

    def evaluate() -> float:
        return loss_fn({name: Matrix(value) for name, value in params.items()}).item()

    report = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        g = grads[name].reshape(-1)
        if samples is None or flat.size <= samples:
            coords = np.arange(flat.size)
        else:
            top = np.argsort(-np.abs(g), kind="stable")[: samples // 2]
            rest = rng.choice(flat.size, size=samples - top.size, replace=False)
            coords = np.unique(np.concatenate([top, rest]))
        worst = 0.0
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + step
            plus = evaluate()
            flat[idx] = original - step
            minus = evaluate()
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, relative_error(float(g[idx]), numeric, floor))
        report[name] = worst
        logger.debug("gradcheck %s: %d coords, max rel err %.3e", name, coords.size, worst)
    return report
