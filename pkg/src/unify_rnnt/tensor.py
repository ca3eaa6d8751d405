"""Dense tensors with reverse-mode automatic differentiation on a tape.

The scope is deliberately small: exactly the operations the toy transducer
model and its losses need, in 32- or 64-bit float.  A :class:`Tape` records
one op per call while active; ``Tape.backward`` replays the records in exact
reverse order and accumulates gradients additively into ``Tensor.grad``.

A tape is single-threaded by contract: one graph, one thread.  Ops themselves
are pure functions of their inputs and may run concurrently on disjoint
tensors.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyAttentionRowError, EvenKernelError, NonFiniteInputError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tape:
    """Ordered record of differentiable ops for one computation graph."""

    def __init__(self) -> None:
        self._records: list[tuple[str, Callable[[], None]]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, name: str, backward_fn: Callable[[], None]) -> None:
        self._records.append((name, backward_fn))

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape contexts exited out of order"

    def backward(self, loss: "Tensor", seed: float = 1.0) -> None:
        self.backward_weighted([(loss, seed)])

    def backward_weighted(self, seeded: Sequence[tuple["Tensor", float]]) -> None:
        """Seed several scalar outputs at once, then replay the tape once."""
        for out, weight in seeded:
            if out.data.shape != ():
                raise ValueError("backward seeds must be scalar tensors")
            out.accum_grad(np.asarray(weight, dtype=out.data.dtype))
        for _name, fn in reversed(self._records):
            fn()


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Contiguous float array plus an additively accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accum_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _result(inputs: tuple, data: np.ndarray) -> tuple[Tensor, Tape | None]:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape() if needs else None
    return out, tape


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a 1-D bias broadcast over leading axes."""
    bias = False
    if a.shape == b.shape:
        data = a.data + b.data
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        data = a.data + b.data
        bias = True
    else:
        raise ValueError(f"add shapes incompatible: {a.shape} vs {b.shape}")
    out, tape = _result((a, b), data)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accum_grad(g)
            if b.requires_grad:
                if bias and g.ndim > 1:
                    b.accum_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))
                else:
                    b.accum_grad(g)
        tape.record("add", bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shapes must match: {a.shape} vs {b.shape}")
    out, tape = _result((a, b), a.data * b.data)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accum_grad(g * b.data)
            if b.requires_grad:
                b.accum_grad(g * a.data)
        tape.record("mul", bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out, tape = _result((a,), a.data * c)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            a.accum_grad(g * c)
        tape.record("scale", bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` 1-D or 2-D and ``b`` 2-D."""
    if b.data.ndim != 2 or a.data.ndim not in (1, 2):
        raise ValueError(f"matmul expects (1|2)-D @ 2-D, got {a.shape} @ {b.shape}")
    out, tape = _result((a, b), a.data @ b.data)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accum_grad(g @ b.data.T)
            if b.requires_grad:
                if a.data.ndim == 2:
                    b.accum_grad(a.data.T @ g)
                else:
                    b.accum_grad(np.outer(a.data, g))
        tape.record("matmul", bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused ``x @ w (+ b)`` to keep tapes short."""
    data = x.data @ w.data
    if b is not None:
        data = data + b.data
    inputs = (x, w) if b is None else (x, w, b)
    out, tape = _result(inputs, data)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                x.accum_grad(g @ w.data.T)
            if w.requires_grad:
                if x.data.ndim == 2:
                    w.accum_grad(x.data.T @ g)
                else:
                    w.accum_grad(np.outer(x.data, g))
            if b is not None and b.requires_grad:
                b.accum_grad(g.sum(axis=0) if g.ndim == 2 else g)
        tape.record("linear", bwd)
    return out


def tanh(x: Tensor) -> Tensor:
    out, tape = _result((x,), np.tanh(x.data))
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            x.accum_grad(g * (1.0 - out.data * out.data))
        tape.record("tanh", bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    data = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    out, tape = _result((x,), data)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            x.accum_grad(g * out.data * (1.0 - out.data))
        tape.record("sigmoid", bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out, tape = _result((x,), np.maximum(x.data, 0.0))
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            x.accum_grad(g * (x.data > 0.0))
        tape.record("relu", bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization over the last axis of a 2-D input."""
    if x.data.ndim != 2:
        raise ValueError("layer_norm expects a 2-D input")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out, tape = _result((x, gain, bias), xhat * gain.data + bias.data)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            dxhat = g * gain.data
            if x.requires_grad:
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                x.accum_grad(inv * (dxhat - m1 - xhat * m2))
            if gain.requires_grad:
                gain.accum_grad((g * xhat).sum(axis=0))
            if bias.requires_grad:
                bias.accum_grad(g.sum(axis=0))
        tape.record("layer_norm", bwd)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ValueError(f"embedding ids out of range [0, {n})")
    out, tape = _result((table,), table.data[ids])
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)
        tape.record("embedding", bwd)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out, tape = _result((x,), x.data[start:stop])
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            full = np.zeros_like(x.data)
            full[start:stop] = g
            x.accum_grad(full)
        tape.record("slice_rows", bwd)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=0)
    out, tape = _result(tuple(parts), data)
    if tape is not None:
        sizes = [p.data.shape[0] for p in parts]
        def bwd():
            g = out.grad
            if g is None:
                return
            at = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p.accum_grad(g[at:at + n])
                at += n
        tape.record("concat_rows", bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out, tape = _result((x,), x.data.reshape(shape))
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            x.accum_grad(g.reshape(x.data.shape))
        tape.record("reshape", bwd)
    return out


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """``out[i, j, :] = a[i, :] + b[j, :]`` for two 2-D inputs."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"outer_add expects [T,d] and [U,d], got {a.shape}, {b.shape}")
    data = a.data[:, None, :] + b.data[None, :, :]
    out, tape = _result((a, b), data)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accum_grad(g.sum(axis=1))
            if b.requires_grad:
                b.accum_grad(g.sum(axis=0))
        tape.record("outer_add", bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out, tape = _result((x,), np.asarray(x.data.sum(), dtype=x.data.dtype))
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            x.accum_grad(np.full_like(x.data, float(g)))
        tape.record("sum_all", bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out, tape = _result((x,), np.asarray(x.data.mean(), dtype=x.data.dtype))
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            x.accum_grad(np.full_like(x.data, float(g) / n))
        tape.record("mean_all", bwd)
    return out


def weighted_sum(pairs: Sequence[tuple[Tensor, float]]) -> Tensor:
    """Scalar ``sum(w_i * t_i)`` over scalar tensors; zero weights are inert."""
    if not pairs:
        raise ValueError("weighted_sum needs at least one term")
    dtype = np.result_type(*[t.data.dtype for t, _ in pairs])
    total = sum(w * t.item() for t, w in pairs)
    out, tape = _result(tuple(t for t, _ in pairs), np.asarray(total, dtype=dtype))
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            for t, w in pairs:
                if t.requires_grad and w != 0.0:
                    t.accum_grad(np.asarray(float(g) * w, dtype=t.data.dtype))
        tape.record("weighted_sum", bwd)
    return out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a boolean [T, T] mask.

    ``mask[i, j] == True`` means query ``i`` may attend key ``j``.  Masked
    positions receive additive ``-inf`` before the row softmax.  Every row
    must keep at least one allowed key.
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 2:
        raise ValueError("q, k, v must share one [T, d] shape")
    T, d = q.shape
    if d % heads != 0:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (T, T):
        raise ValueError(f"mask shape {mask.shape} != ({T}, {T})")
    if not mask.any(axis=1).all():
        raise EmptyAttentionRowError("attention mask has an all-false row")

    dh = d // heads
    inv_scale = 1.0 / math.sqrt(dh)
    out_data = np.empty_like(q.data)
    attns = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = (q.data[:, sl] @ k.data[:, sl].T) * inv_scale
        scores = np.where(mask, scores, -np.inf)
        m = scores.max(axis=1, keepdims=True)
        e = np.exp(scores - m)
        attn = e / e.sum(axis=1, keepdims=True)
        attns.append(attn)
        out_data[:, sl] = attn @ v.data[:, sl]

    out, tape = _result((q, k, v), out_data)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            dq = np.zeros_like(q.data) if q.requires_grad else None
            dk = np.zeros_like(k.data) if k.requires_grad else None
            dv = np.zeros_like(v.data) if v.requires_grad else None
            for h in range(heads):
                sl = slice(h * dh, (h + 1) * dh)
                attn = attns[h]
                go = g[:, sl]
                if dv is not None:
                    dv[:, sl] = attn.T @ go
                da = go @ v.data[:, sl].T
                ds = attn * (da - (da * attn).sum(axis=1, keepdims=True))
                if dq is not None:
                    dq[:, sl] = (ds @ k.data[:, sl]) * inv_scale
                if dk is not None:
                    dk[:, sl] = (ds.T @ q.data[:, sl]) * inv_scale
            if dq is not None:
                q.accum_grad(dq)
            if dk is not None:
                k.accum_grad(dk)
            if dv is not None:
                v.accum_grad(dv)
        tape.record("masked_attention", bwd)
    return out


# ---------------------------------------------------------------------------
# depthwise convolution
# ---------------------------------------------------------------------------


def _check_kernel(kernel: Tensor) -> int:
    if kernel.data.ndim != 2:
        raise ValueError("kernel must be [k, d]")
    k = kernel.data.shape[0]
    if k % 2 == 0:
        raise EvenKernelError(f"kernel length {k} is even")
    return k


def depthwise_conv1d_windows(x: Tensor, kernel: Tensor, windows) -> Tensor:
    """Per-channel 1-D convolution computed over explicit windows.

    ``windows`` is a sequence of
    ``(win_lo, win_hi, keep_lo, keep_hi, real_lo, real_hi)`` tuples in the
    coordinates of ``x``.  Each window buffer holds real frames on
    ``[real_lo, real_hi)`` and zeros elsewhere; output rows
    ``[keep_lo, keep_hi)`` are the valid convolution of that buffer.  Keep
    ranges must tile ``[0, T)``.  The accumulation order over kernel taps is
    fixed so identical windows produce bit-identical outputs.
    """
    k = _check_kernel(kernel)
    halo = (k - 1) // 2
    T, d = x.shape
    if kernel.data.shape[1] != d:
        raise ValueError(f"kernel channels {kernel.data.shape[1]} != input {d}")
    out_data = np.zeros_like(x.data)
    for (w_lo, w_hi, k_lo, k_hi, r_lo, r_hi) in windows:
        keep = k_hi - k_lo
        if keep <= 0:
            continue
        if w_hi - w_lo != keep + 2 * halo:
            raise ValueError("window length inconsistent with keep range and halo")
        wbuf = np.zeros((w_hi - w_lo, d), dtype=x.data.dtype)
        if r_hi > r_lo:
            wbuf[r_lo - w_lo:r_hi - w_lo] = x.data[r_lo:r_hi]
        acc = out_data[k_lo:k_hi]
        for j in range(k):
            acc += wbuf[j:j + keep] * kernel.data[j]
    out, tape = _result((x, kernel), out_data)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            dx = np.zeros_like(x.data) if x.requires_grad else None
            dk = np.zeros_like(kernel.data) if kernel.requires_grad else None
            for (w_lo, w_hi, k_lo, k_hi, r_lo, r_hi) in windows:
                keep = k_hi - k_lo
                if keep <= 0:
                    continue
                gk = g[k_lo:k_hi]
                wbuf = np.zeros((w_hi - w_lo, d), dtype=x.data.dtype)
                if r_hi > r_lo:
                    wbuf[r_lo - w_lo:r_hi - w_lo] = x.data[r_lo:r_hi]
                dwbuf = np.zeros_like(wbuf)
                for j in range(k):
                    if dk is not None:
                        dk[j] += (wbuf[j:j + keep] * gk).sum(axis=0)
                    dwbuf[j:j + keep] += gk * kernel.data[j]
                if dx is not None and r_hi > r_lo:
                    dx[r_lo:r_hi] += dwbuf[r_lo - w_lo:r_hi - w_lo]
            if dx is not None:
                x.accum_grad(dx)
            if dk is not None:
                kernel.accum_grad(dk)
        tape.record("depthwise_conv1d", bwd)
    return out


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise convolution with zero same-padding over the whole sequence."""
    k = _check_kernel(kernel)
    T = x.shape[0]
    if k > 2 * T + 1:
        raise ValueError(f"kernel length {k} exceeds 2*T+1 = {2 * T + 1}")
    halo = (k - 1) // 2
    return depthwise_conv1d_windows(x, kernel, [(-halo, T + halo, 0, T, 0, T)])


# ---------------------------------------------------------------------------
# streaming log-softmax
# ---------------------------------------------------------------------------


def log_softmax_online(x: Tensor, tile: int) -> Tensor:
    """``x - logsumexp(x)`` via a two-pass streaming reduction over tiles.

    Pass one folds each tile into a running (max, rescaled sum) pair, so peak
    auxiliary storage stays O(tile); pass two writes the output.  The backward
    recomputes per-tile softmax values from the saved output instead of
    keeping a second V-sized buffer.
    """
    if x.data.ndim != 1:
        raise ValueError("log_softmax_online expects a 1-D input")
    if tile < 1:
        raise ValueError("tile must be >= 1")
    vdim = x.data.shape[0]
    if vdim < 1:
        raise ValueError("input must have at least one element")
    v = x.data
    if not np.isfinite(v).all():
        raise NonFiniteInputError("log_softmax_online input contains non-finite values")

    running_max = -np.inf
    running_sum = 0.0
    for t0 in range(0, vdim, tile):
        blk = v[t0:t0 + tile]
        blk_max = float(blk.max())
        new_max = running_max if running_max >= blk_max else blk_max
        if running_sum > 0.0:
            running_sum *= math.exp(running_max - new_max)
        running_sum += float(np.exp(blk - new_max).sum())
        running_max = new_max
    lse = running_max + math.log(running_sum)

    out, tape = _result((x,), v - lse)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            total = float(g.sum())
            dx = np.empty_like(v)
            for t0 in range(0, vdim, tile):
                t1 = min(t0 + tile, vdim)
                dx[t0:t1] = g[t0:t1] - np.exp(out.data[t0:t1]) * total
            x.accum_grad(dx)
        tape.record("log_softmax_online", bwd)
    return out


# ---------------------------------------------------------------------------
# fused gated recurrent sequence
# ---------------------------------------------------------------------------


def gru_sequence(emb: Tensor, h0: Tensor,
                 wz: Tensor, uz: Tensor, bz: Tensor,
                 wr: Tensor, ur: Tensor, br: Tensor,
                 wc: Tensor, uc: Tensor, bc: Tensor) -> Tensor:
    """Unrolled single-layer gated recurrent cell.

    Consumes ``emb`` of shape [U, E] starting from state ``h0`` of shape [P]
    and returns the [U+1, P] stack of states h_0..h_U.  Backward is fused
    backpropagation through time over the saved gate activations.
    """
    U = emb.data.shape[0]
    P = h0.data.shape[0]
    hs = np.empty((U + 1, P), dtype=h0.data.dtype)
    hs[0] = h0.data
    zs = np.empty((U, P), dtype=h0.data.dtype)
    rs = np.empty_like(zs)
    cs = np.empty_like(zs)
    rhs = np.empty_like(zs)
    for i in range(U):
        xe = emb.data[i]
        h = hs[i]
        z = 0.5 * (np.tanh(0.5 * (xe @ wz.data + h @ uz.data + bz.data)) + 1.0)
        r = 0.5 * (np.tanh(0.5 * (xe @ wr.data + h @ ur.data + br.data)) + 1.0)
        rh = r * h
        c = np.tanh(xe @ wc.data + rh @ uc.data + bc.data)
        hs[i + 1] = (1.0 - z) * h + z * c
        zs[i], rs[i], cs[i], rhs[i] = z, r, c, rh

    inputs = (emb, h0, wz, uz, bz, wr, ur, br, wc, uc, bc)
    out, tape = _result(inputs, hs)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            demb = np.zeros_like(emb.data)
            grads = {p: np.zeros_like(p.data) for p in (wz, uz, bz, wr, ur, br, wc, uc, bc) if p.requires_grad}
            dh = g[U].copy()
            for i in range(U - 1, -1, -1):
                xe = emb.data[i]
                h = hs[i]
                z, r, c, rh = zs[i], rs[i], cs[i], rhs[i]
                dz = dh * (c - h)
                dc = dh * z
                dhprev = dh * (1.0 - z)
                dac = dc * (1.0 - c * c)
                drh = dac @ uc.data.T
                dr = drh * h
                dhprev += drh * r
                dar = dr * r * (1.0 - r)
                daz = dz * z * (1.0 - z)
                dhprev += dar @ ur.data.T + daz @ uz.data.T
                demb[i] = dac @ wc.data.T + dar @ wr.data.T + daz @ wz.data.T
                for p, a, inp in ((wc, dac, xe), (wr, dar, xe), (wz, daz, xe)):
                    if p in grads:
                        grads[p] += np.outer(inp, a)
                for p, a, inp in ((uc, dac, rh), (ur, dar, h), (uz, daz, h)):
                    if p in grads:
                        grads[p] += np.outer(inp, a)
                for p, a in ((bc, dac), (br, dar), (bz, daz)):
                    if p in grads:
                        grads[p] += a
                dh = dhprev + g[i]
            if emb.requires_grad:
                emb.accum_grad(demb)
            if h0.requires_grad:
                h0.accum_grad(dh)
            for p, val in grads.items():
                p.accum_grad(val)
        tape.record("gru_sequence", bwd)
    return out
