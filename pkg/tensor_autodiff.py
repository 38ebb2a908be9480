#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
최소 텐서 라이브러리 (reverse-mode 자동 미분)

- 데이터는 numpy float64 배열 (row-major)
- define-by-run 방식: 활성화된 ComputationTape 안에서 실행된 연산만 기록
- tape이 없으면 순수 forward (추론 모드)
- tape과 MAC 카운터는 스레드별로 분리 (threading.local)

사용법:
    with ComputationTape() as tape:
        loss = reduce(mul(x, x), "sum")
    backward(loss)
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sod_errors import DimensionError, DomainError, TapeError

DTYPE = np.float64

ELEMENTWISE_KINDS = ("relu", "sigmoid", "mul", "add", "sub", "div", "log", "clamp")
REDUCE_KINDS = ("sum", "mean", "var")

_local = threading.local()

Number = Union[int, float]


class Tensor:
    """dense N차원 텐서 + gradient 버퍼"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional["TapeNode"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        """연산 결과용 (복사 없이 감싸기)"""
        out = cls.__new__(cls)
        arr = np.asarray(array, dtype=DTYPE)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # 연산자 (elementwise 위임)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return sub(_as_tensor(0.0, self), self)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """학습 파라미터 (requires_grad leaf)"""
    return Tensor(data, requires_grad=True, name=name)


def constant(value: Number, ndim: int) -> Tensor:
    """broadcast용 상수 (모든 축 크기 1)"""
    return Tensor(np.full((1,) * ndim, value, dtype=DTYPE))


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.isscalar(value):
        return constant(float(value), like.ndim)
    return Tensor(value)


# ---------------------------------------------------------------------------
# Computation tape
# ---------------------------------------------------------------------------

class TapeNode:
    """실행된 primitive 하나 (입력/출력 참조 + gradient 함수)"""

    def __init__(self, tape: "ComputationTape", index: int, op: str,
                 inputs: Tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.tape = tape
        self.index = index
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class ComputationTape:
    """실행 순서대로 기록된 연산 목록 (기록 순서 = 위상 순서)"""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> "ComputationTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor,
               backward_fn) -> TapeNode:
        node = TapeNode(self, len(self.nodes), op, inputs, output, backward_fn)
        self.nodes.append(node)
        return node

    def clear(self):
        """캐시된 중간값 해제"""
        for node in self.nodes:
            node.inputs = ()
            node.backward_fn = None
        self.nodes = []


def _tape_stack() -> List[ComputationTape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> Optional[ComputationTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(op: str, inputs: Tuple[Tensor, ...], out: Tensor, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out._node = tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor):
    """loss(스칼라)에서 모든 requires_grad leaf로 gradient 누적

    한 번의 호출 안에서 leaf 기여분을 모두 합친 뒤 leaf.grad에 더한다.
    (두 번 호출하면 gradient가 정확히 2배)
    """
    if loss.size != 1:
        raise DimensionError(f"backward는 스칼라 loss만 받습니다 (shape={loss.shape})", axis="loss")

    leaf_totals: Dict[int, Tuple[Tensor, np.ndarray]] = {}

    def add_leaf(t: Tensor, g: np.ndarray):
        prev = leaf_totals.get(id(t))
        leaf_totals[id(t)] = (t, g if prev is None else prev[1] + g)

    seed = np.ones_like(loss.data)
    node = loss._node
    if node is None:
        if not loss.requires_grad:
            raise TapeError("loss가 tape에 연결되어 있지 않습니다")
        add_leaf(loss, seed)
    else:
        if node.backward_fn is None:
            raise TapeError("이미 clear된 tape입니다")
        pending: Dict[int, np.ndarray] = {id(loss): seed}
        for current in reversed(node.tape.nodes[:node.index + 1]):
            g = pending.pop(id(current.output), None)
            if g is None:
                continue
            input_grads = current.backward_fn(g)
            for t, gi in zip(current.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    add_leaf(t, gi)
                else:
                    key = id(t)
                    pending[key] = gi if key not in pending else pending[key] + gi

    for t, total in leaf_totals.values():
        t.grad = total.copy() if t.grad is None else t.grad + total


# ---------------------------------------------------------------------------
# MAC 카운터 (count_ops용)
# ---------------------------------------------------------------------------

class MacCounter:
    def __init__(self):
        self.macs = 0
        self.by_op: Dict[str, int] = {}

    def add(self, op: str, macs: int):
        self.macs += int(macs)
        self.by_op[op] = self.by_op.get(op, 0) + int(macs)


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """블록 안에서 실행된 conv2d/linear의 MAC 수 집계"""
    counter = MacCounter()
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = []
        _local.counters = stack
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _count(op: str, macs: int):
    for counter in getattr(_local, "counters", None) or ():
        counter.add(op, macs)


def conv2d_macs(n: int, k: int, c: int, kh: int, kw: int, h_out: int, w_out: int) -> int:
    return n * k * c * kh * kw * h_out * w_out


def linear_macs(n: int, o: int, d: int) -> int:
    return n * o * d


# ---------------------------------------------------------------------------
# Primitive 연산
# ---------------------------------------------------------------------------

def _require_ndim(t: Tensor, ndim: int, op: str):
    if t.ndim != ndim:
        raise DimensionError(f"{op}: {ndim}차원 입력이 필요합니다 (shape={t.shape})", axis="rank")


def conv2d(input: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """cross-correlation (N,C,H,W) * (K,C,kh,kw) -> (N,K,H',W')"""
    _require_ndim(input, 4, "conv2d")
    _require_ndim(kernel, 4, "conv2d")
    if stride < 1 or padding < 0:
        raise DomainError(f"conv2d: stride={stride}, padding={padding}")
    n, c, h, w = input.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: 입력 채널 {c} != 커널 채널 {kc}", axis="C")
    if kh > h + 2 * padding:
        raise DimensionError(f"conv2d: 커널 높이 {kh} > {h + 2 * padding}", axis="H")
    if kw > w + 2 * padding:
        raise DimensionError(f"conv2d: 커널 너비 {kw} > {w + 2 * padding}", axis="W")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({k},)", axis="K")

    p, s = padding, stride
    xp = np.pad(input.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else input.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    h_out, w_out = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)
    kmat = kernel.data.reshape(k, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, h_out, w_out, k).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _count("conv2d", conv2d_macs(n, k, c, kh, kw, h_out, w_out))

    def grad_fn(g: np.ndarray):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        d_kernel = (gm.T @ cols).reshape(kernel.shape)
        d_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        d_cols = (gm @ kmat).reshape(n, h_out, w_out, c, kh, kw)
        d_xp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                d_xp[:, :, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s] += \
                    d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        d_input = d_xp[:, :, p:p + h, p:p + w] if p else d_xp
        return d_input, d_kernel, d_bias

    inputs = (input, kernel) if bias is None else (input, kernel, bias)
    return _record("conv2d", inputs, Tensor._wrap(out), grad_fn)


def linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """input @ weight.T + bias"""
    _require_ndim(input, 2, "linear")
    _require_ndim(weight, 2, "linear")
    n, d = input.shape
    o, wd = weight.shape
    if wd != d:
        raise DimensionError(f"linear: 입력 차원 {d} != weight 차원 {wd}", axis="D")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({o},)", axis="O")

    out = input.data @ weight.data.T
    if bias is not None:
        out = out + bias.data[None, :]
    _count("linear", linear_macs(n, o, d))

    def grad_fn(g: np.ndarray):
        return g @ weight.data, g.T @ input.data, (g.sum(axis=0) if bias is not None else None)

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return _record("linear", inputs, Tensor._wrap(out), grad_fn)


def global_average_pool(input: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) 채널별 공간 평균"""
    _require_ndim(input, 4, "global_average_pool")
    n, c, h, w = input.shape
    if h < 1 or w < 1:
        raise DimensionError("global_average_pool: 빈 공간 차원", axis="H")
    out = input.data.mean(axis=(2, 3))

    def grad_fn(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None], input.shape) / (h * w),)

    return _record("global_average_pool", (input,), Tensor._wrap(out), grad_fn)


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    if a.ndim != b.ndim:
        raise DimensionError(f"{op}: rank 불일치 {a.shape} vs {b.shape}", axis="rank")
    for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"{op}: broadcast 불가 {a.shape} vs {b.shape}", axis=str(axis))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def elementwise(input: Tensor, kind: str, other=None,
                lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """relu | sigmoid | mul | add | sub | div | log | clamp"""
    x = input.data
    if kind == "relu":
        out = np.maximum(x, 0.0)

        def grad_fn(g):
            return (g * (x > 0),)

        return _record("relu", (input,), Tensor._wrap(out), grad_fn)

    if kind == "sigmoid":
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def grad_fn(g):
            return (g * out * (1.0 - out),)

        return _record("sigmoid", (input,), Tensor._wrap(out), grad_fn)

    if kind == "log":
        if np.any(x <= 0):
            raise DomainError("log: 0 이하 값이 있습니다 (clamp 필요)")
        out = np.log(x)

        def grad_fn(g):
            return (g / x,)

        return _record("log", (input,), Tensor._wrap(out), grad_fn)

    if kind == "clamp":
        low = -np.inf if lo is None else lo
        high = np.inf if hi is None else hi
        out = np.clip(x, low, high)

        def grad_fn(g):
            return (g * ((x >= low) & (x <= high)),)

        return _record("clamp", (input,), Tensor._wrap(out), grad_fn)

    if kind not in ("mul", "add", "sub", "div"):
        raise DomainError(f"알 수 없는 elementwise 종류: {kind} (가능한 값: {', '.join(ELEMENTWISE_KINDS)})")

    b_t = _as_tensor(other, input)
    _broadcast_check(input, b_t, kind)
    y = b_t.data
    if kind == "add":
        out = x + y

        def grad_fn(g):
            return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)
    elif kind == "sub":
        out = x - y

        def grad_fn(g):
            return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)
    elif kind == "mul":
        out = x * y

        def grad_fn(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)
    else:
        if np.any(y == 0):
            raise DomainError("div: 0으로 나눌 수 없습니다")
        out = x / y

        def grad_fn(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

    return _record(kind, (input, b_t), Tensor._wrap(out), grad_fn)


def relu(x: Tensor) -> Tensor:
    return elementwise(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return elementwise(x, "sigmoid")


def log(x: Tensor) -> Tensor:
    return elementwise(x, "log")


def clamp(x: Tensor, lo: Optional[float], hi: Optional[float]) -> Tensor:
    return elementwise(x, "clamp", lo=lo, hi=hi)


def add(a: Tensor, b) -> Tensor:
    return elementwise(a, "add", b)


def sub(a: Tensor, b) -> Tensor:
    return elementwise(a, "sub", b)


def mul(a: Tensor, b) -> Tensor:
    return elementwise(a, "mul", b)


def div(a: Tensor, b) -> Tensor:
    return elementwise(a, "div", b)


def channel_scale(features: Tensor, weights: Tensor) -> Tensor:
    """out[n,c,h,w] = weights[n,c] * features[n,c,h,w]"""
    _require_ndim(features, 4, "channel_scale")
    _require_ndim(weights, 2, "channel_scale")
    if features.shape[0] != weights.shape[0]:
        raise DimensionError(f"channel_scale: 배치 {features.shape[0]} != {weights.shape[0]}", axis="N")
    if features.shape[1] != weights.shape[1]:
        raise DimensionError(f"channel_scale: 채널 {features.shape[1]} != {weights.shape[1]}", axis="C")
    f, wv = features.data, weights.data
    out = f * wv[:, :, None, None]

    def grad_fn(g):
        return g * wv[:, :, None, None], (g * f).sum(axis=(2, 3))

    return _record("channel_scale", (features, weights), Tensor._wrap(out), grad_fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """axis 방향 이어붙이기 (나머지 축은 모두 같아야 함)"""
    if not parts:
        raise DimensionError("concat: 입력이 비어 있습니다", axis=str(axis))
    ndim = parts[0].ndim
    ax = axis + ndim if axis < 0 else axis
    if not 0 <= ax < ndim:
        raise DimensionError(f"concat: 잘못된 축 {axis} (rank {ndim})", axis=str(axis))
    ref = parts[0].shape
    for t in parts[1:]:
        if t.ndim != ndim:
            raise DimensionError(f"concat: rank 불일치 {ref} vs {t.shape}", axis="rank")
        for i, (a, b) in enumerate(zip(ref, t.shape)):
            if i != ax and a != b:
                raise DimensionError(f"concat: shape 불일치 {ref} vs {t.shape}", axis=str(i))

    sizes = [t.shape[ax] for t in parts]
    out = np.concatenate([t.data for t in parts], axis=ax)
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record("concat", tuple(parts), Tensor._wrap(out), grad_fn)


def pool_max2(input: Tensor) -> Tensor:
    """2x2 max pooling (동점이면 row-major 첫 번째 위치로 gradient)"""
    _require_ndim(input, 4, "pool_max2")
    n, c, h, w = input.shape
    if h % 2:
        raise DimensionError(f"pool_max2: 높이 {h}가 홀수입니다", axis="H")
    if w % 2:
        raise DimensionError(f"pool_max2: 너비 {w}가 홀수입니다", axis="W")
    h2, w2 = h // 2, w // 2
    blocks = input.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def grad_fn(g):
        routed = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
        np.put_along_axis(routed, idx, g[..., None], axis=-1)
        return (routed.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record("pool_max2", (input,), Tensor._wrap(out), grad_fn)


def upsample_nearest2(input: Tensor) -> Tensor:
    """nearest-neighbor 2배 업샘플링"""
    _require_ndim(input, 4, "upsample_nearest2")
    n, c, h, w = input.shape
    out = input.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample_nearest2", (input,), Tensor._wrap(out), grad_fn)


def _normalize_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    result = []
    for a in axes:
        b = a + ndim if a < 0 else a
        if not 0 <= b < ndim:
            raise DimensionError(f"reduce: 잘못된 축 {a} (rank {ndim})", axis=str(a))
        result.append(b)
    return tuple(sorted(set(result)))


def reduce(input: Tensor, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    """sum | mean | var (모분산, count로 나눔)"""
    if kind not in REDUCE_KINDS:
        raise DomainError(f"알 수 없는 reduce 종류: {kind}")
    ax = _normalize_axes(axes, input.ndim)
    x = input.data
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1

    if kind == "sum":
        out = x.sum(axis=ax, keepdims=True)
    elif kind == "mean":
        out = x.mean(axis=ax, keepdims=True)
    else:
        mu = x.mean(axis=ax, keepdims=True)
        centered = x - mu
        out = (centered * centered).mean(axis=ax, keepdims=True)

    kept_shape = out.shape
    if not keepdims:
        out = out.reshape([s for i, s in enumerate(x.shape) if i not in ax])

    def grad_fn(g):
        gk = g.reshape(kept_shape)
        if kind == "sum":
            return (np.broadcast_to(gk, x.shape).copy(),)
        if kind == "mean":
            return (np.broadcast_to(gk / count, x.shape).copy(),)
        return (gk * 2.0 * centered / count,)

    return _record(kind, (input,), Tensor._wrap(out), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    return reduce(x, "sum")


def mean_all(x: Tensor) -> Tensor:
    return reduce(x, "mean")
