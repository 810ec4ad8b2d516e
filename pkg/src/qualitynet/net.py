"""Quality-Net: BLSTM -> two ELU dense layers -> linear frame score -> global average.

Gate blocks are stored stacked in (i, f, g, o) order: ``W`` is (F_in, 4H),
``U`` is (H, 4H) and ``b`` is (4H,). Per-gate views such as ``W_f`` or
``b_f`` are exposed as properties. All arithmetic is float64.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

GATES = ("i", "f", "g", "o")


@dataclass(frozen=True)
class ModelDims:
    n_in: int = 257
    hidden: int = 100
    dense: int = 50

    def __post_init__(self):
        if min(self.n_in, self.hidden, self.dense) < 1:
            raise ValueError(f"all model dimensions must be positive: {self}")


@dataclass
class LstmDirectionParams:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        h4 = self.U.shape[1]
        if h4 % 4 or self.U.shape[0] * 4 != h4 or self.W.shape[1] != h4 or self.b.shape != (h4,):
            raise ValueError(f"inconsistent LSTM shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    def gate(self, tensor: str, gate: str) -> np.ndarray:
        k = GATES.index(gate)
        h = self.hidden
        arr = getattr(self, tensor)
        return arr[..., k * h:(k + 1) * h]


def _gate_property(tensor, gate):
    return property(lambda self: self.gate(tensor, gate), doc=f"{tensor} block of the {gate} gate")


for _t in ("W", "U", "b"):
    for _g in GATES:
        setattr(LstmDirectionParams, f"{_t}_{_g}", _gate_property(_t, _g))


@dataclass
class DenseParams:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ValueError(f"inconsistent dense shapes W{self.W.shape} b{self.b.shape}")


@dataclass
class ModelParams:
    fwd: LstmDirectionParams
    bwd: LstmDirectionParams
    dense1: DenseParams
    dense2: DenseParams
    out: DenseParams
    fgb: float = -3.0  # forget gate bias used at initialization (metadata)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.fwd.W.shape[0], self.fwd.hidden, self.dense1.W.shape[1])

    def arrays(self) -> list[np.ndarray]:
        """All tensors in checkpoint declaration order."""
        return [
            self.fwd.W, self.fwd.U, self.fwd.b,
            self.bwd.W, self.bwd.U, self.bwd.b,
            self.dense1.W, self.dense1.b,
            self.dense2.W, self.dense2.b,
            self.out.W, self.out.b,
        ]

    def names(self) -> list[str]:
        return [
            "fwd.W", "fwd.U", "fwd.b", "bwd.W", "bwd.U", "bwd.b",
            "dense1.W", "dense1.b", "dense2.W", "dense2.b", "out.W", "out.b",
        ]

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def zeros_like(self) -> "ModelParams":
        z = self.copy()
        for a in z.arrays():
            a[...] = 0.0
        return z

    @classmethod
    def from_arrays(cls, arrays, fgb: float = -3.0) -> "ModelParams":
        a = [np.asarray(x, dtype=np.float64) for x in arrays]
        return cls(
            LstmDirectionParams(*a[0:3]), LstmDirectionParams(*a[3:6]),
            DenseParams(*a[6:8]), DenseParams(*a[8:10]), DenseParams(*a[10:12]), fgb,
        )

    def shapes(self) -> list[tuple]:
        return [a.shape for a in self.arrays()]


def param_shapes(dims: ModelDims) -> list[tuple]:
    f, h, d = dims.n_in, dims.hidden, dims.dense
    lstm = [(f, 4 * h), (h, 4 * h), (4 * h,)]
    return lstm + lstm + [(2 * h, d), (d,), (d, d), (d,), (d, 1), (1,)]


_LSTM_MATRICES = (0, 1, 3, 4)


def init_model(dims: ModelDims = ModelDims(), fgb: float = -3.0, seed=0) -> ModelParams:
    """Glorot-uniform weights, zero biases, and every forget-gate bias set to ``fgb``."""
    rng = np.random.default_rng(seed)
    arrays = []
    for k, shape in enumerate(param_shapes(dims)):
        if len(shape) == 2:
            fan_in, fan_out = shape
            if k in _LSTM_MATRICES:
                fan_out = dims.hidden  # each gate block is its own (fan_in, H) matrix
            s = np.sqrt(6.0 / (fan_in + fan_out))
            arrays.append(rng.uniform(-s, s, size=shape))
        else:
            arrays.append(np.zeros(shape))
    params = ModelParams.from_arrays(arrays, fgb)
    params.fwd.b_f[:] = fgb
    params.bwd.b_f[:] = fgb
    return params


def elu(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def lstm_cell(x_t, h_prev, c_prev, p: LstmDirectionParams):
    """One LSTM step without peepholes. Returns ``(h_t, c_t)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != p.W.shape[0] or np.shape(h_prev)[-1] != p.hidden or np.shape(c_prev)[-1] != p.hidden:
        raise ValueError("lstm_cell: dimension mismatch")
    h = p.hidden
    z = x_t @ p.W + h_prev @ p.U + p.b
    i, f, o = expit(z[..., :h]), expit(z[..., h:2 * h]), expit(z[..., 3 * h:])
    g = np.tanh(z[..., 2 * h:3 * h])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


@dataclass
class DirectionTrace:
    x: np.ndarray      # (T, F) inputs in processing order
    h: np.ndarray      # (T+1, H), row 0 is the zero initial state
    c: np.ndarray      # (T+1, H)
    gates: np.ndarray  # (T, 4H) post-activation i, f, g, o
    tanh_c: np.ndarray  # (T, H)


@dataclass
class ForwardTrace:
    fwd: DirectionTrace
    bwd: DirectionTrace
    hcat: np.ndarray
    a1: np.ndarray
    z1: np.ndarray
    a2: np.ndarray
    z2: np.ndarray
    q: np.ndarray
    Q: float


@dataclass
class AssessmentResult:
    Q: float
    q: np.ndarray = field(repr=False)


def _run_direction(x: np.ndarray, p: LstmDirectionParams) -> DirectionTrace:
    n, h = x.shape[0], p.hidden
    zx = x @ p.W + p.b
    hs = np.zeros((n + 1, h))
    cs = np.zeros((n + 1, h))
    acts = np.empty((n, 4 * h))
    tcs = np.empty((n, h))
    U = p.U
    for t in range(n):
        z = zx[t] + hs[t] @ U
        a = expit(z)
        a[2 * h:3 * h] = np.tanh(z[2 * h:3 * h])
        c = a[h:2 * h] * cs[t] + a[:h] * a[2 * h:3 * h]
        tc = np.tanh(c)
        cs[t + 1] = c
        tcs[t] = tc
        hs[t + 1] = a[3 * h:] * tc
        acts[t] = a
    return DirectionTrace(x, hs, cs, acts, tcs)


def _features(spec) -> np.ndarray:
    x = spec.frames if hasattr(spec, "frames") else spec
    return np.asarray(x, dtype=np.float64)


def forward(spec, p: ModelParams) -> tuple[AssessmentResult, ForwardTrace]:
    """Frame scores and their global average for one spectrogram (T, F)."""
    x = _features(spec)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a (T >= 1, F) spectrogram, got shape {x.shape}")
    if x.shape[1] != p.fwd.W.shape[0]:
        raise ValueError(f"feature dimension {x.shape[1]} does not match model input {p.fwd.W.shape[0]}")
    tf = _run_direction(x, p.fwd)
    tb = _run_direction(np.ascontiguousarray(x[::-1]), p.bwd)  # negative strides miss BLAS
    hcat = np.concatenate([tf.h[1:], tb.h[:0:-1]], axis=1)
    a1 = hcat @ p.dense1.W + p.dense1.b
    z1 = elu(a1)
    a2 = z1 @ p.dense2.W + p.dense2.b
    z2 = elu(a2)
    q = (z2 @ p.out.W + p.out.b)[:, 0]
    total = 0.0
    for v in q.tolist():  # left-to-right summation
        total += v
    Q = total / q.size
    trace = ForwardTrace(tf, tb, hcat, a1, z1, a2, z2, q, Q)
    return AssessmentResult(Q, q.copy()), trace


def predict(spec, p: ModelParams) -> AssessmentResult:
    return forward(spec, p)[0]


def _backprop_direction(tr: DirectionTrace, dh_out: np.ndarray, p: LstmDirectionParams, g: LstmDirectionParams):
    n, h = dh_out.shape
    dz = np.empty((n, 4 * h))
    dh_next = np.zeros(h)
    dc_next = np.zeros(h)
    UT = p.U.T
    for t in range(n - 1, -1, -1):
        a = tr.gates[t]
        i, f, gg, o = a[:h], a[h:2 * h], a[2 * h:3 * h], a[3 * h:]
        tc = tr.tanh_c[t]
        dh = dh_out[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        row = dz[t]
        row[:h] = dc * gg * i * (1.0 - i)
        row[h:2 * h] = dc * tr.c[t] * f * (1.0 - f)
        row[2 * h:3 * h] = dc * i * (1.0 - gg * gg)
        row[3 * h:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = row @ UT
    g.W += tr.x.T @ dz
    g.U += tr.h[:-1].T @ dz
    g.b += dz.sum(axis=0)


def backward(trace: ForwardTrace, dQ: float, dq, p: ModelParams) -> ModelParams:
    """Gradients of a scalar loss with partials ``dQ`` (utterance) and ``dq`` (frames).

    Returns a ModelParams-shaped container of gradients.
    """
    dq = np.asarray(dq, dtype=np.float64).reshape(-1)
    n = trace.q.size
    if dq.size != n:
        raise ValueError(f"dq has length {dq.size}, trace has {n} frames")
    if trace.hcat.shape[1] != 2 * p.fwd.hidden or trace.fwd.x.shape[1] != p.fwd.W.shape[0]:
        raise ValueError("trace does not match parameters")
    grads = p.zeros_like()
    dqt = dq + dQ / n
    grads.out.W[:, 0] = trace.z2.T @ dqt
    grads.out.b[0] = dqt.sum()
    da2 = np.outer(dqt, p.out.W[:, 0]) * _elu_grad(trace.a2)
    grads.dense2.W[...] = trace.z1.T @ da2
    grads.dense2.b[...] = da2.sum(axis=0)
    da1 = (da2 @ p.dense2.W.T) * _elu_grad(trace.a1)
    grads.dense1.W[...] = trace.hcat.T @ da1
    grads.dense1.b[...] = da1.sum(axis=0)
    dh = da1 @ p.dense1.W.T
    h = p.fwd.hidden
    _backprop_direction(trace.fwd, dh[:, :h], p.fwd, grads.fwd)
    _backprop_direction(trace.bwd, np.ascontiguousarray(dh[::-1, h:]), p.bwd, grads.bwd)
    return grads


def direction_swap(p: ModelParams) -> ModelParams:
    """Exchange forward/backward LSTM parameters.

    The two H-wide input blocks of the first dense layer are exchanged too,
    so that the head still sees [forward state; backward state].
    """
    s = p.copy()
    s.fwd, s.bwd = s.bwd, s.fwd
    h = p.fwd.hidden
    s.dense1.W = np.concatenate([p.dense1.W[h:], p.dense1.W[:h]], axis=0)
    return s
