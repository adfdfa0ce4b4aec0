"""
Differentiable operations.

Every op computes its forward value with numpy and, when a tape is active and
some input requires grad, records a closure that maps the upstream gradient
to one gradient per input (None for inputs that need none).
"""

from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, active_tape

Grads = Sequence[Optional[np.ndarray]]


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Grads]) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.wrap(data, requires_grad=track)
    if track:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(op, "operands do not broadcast", [a.shape, b.shape]) from None


# ============================================================
# Elementwise and structural
# ============================================================

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def backward(g: np.ndarray) -> Grads:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def backward(g: np.ndarray) -> Grads:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    return _result("scale", a.data * k, (a,), lambda g: (g * k,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors Tensor.sum
    def backward(g: np.ndarray) -> Grads:
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", np.array(a.data.sum()), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape to {tuple(shape)}", [a.shape]) from None
    return _result("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat", "needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"shapes disagree off axis {axis}", [t.shape for t in tensors]) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> Grads:
        return np.split(g, splits, axis=axis)

    return _result("concat", data, tuple(tensors), backward)


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """
    Contraction over explicit subscripts, e.g. "i,j->ij".

    Gradients reuse einsum: the gradient of operand k contracts the upstream
    gradient with the remaining operands onto k's subscripts. That requires
    every subscript of k to appear in the output or another operand.
    """
    spec = spec.replace(" ", "")
    if "->" not in spec:
        raise ShapeError("einsum", f"explicit output subscripts required in '{spec}'")
    lhs, out_sub = spec.split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError("einsum", f"'{spec}' names {len(in_subs)} operands, got {len(operands)}")
    for k, (sub, t) in enumerate(zip(in_subs, operands)):
        if len(sub) != t.ndim:
            raise ShapeError("einsum", f"operand {k} has {t.ndim} dims but subscripts '{sub}'", [t.shape])
        if len(set(sub)) != len(sub):
            raise ShapeError("einsum", f"repeated subscript in '{sub}'")
        elsewhere = set(out_sub).union(*(set(s) for j, s in enumerate(in_subs) if j != k))
        if not set(sub) <= elsewhere:
            raise ShapeError("einsum", f"subscripts of operand {k} must appear in the output or another operand")
    try:
        data = np.einsum(spec, *(t.data for t in operands))
    except ValueError as exc:
        raise ShapeError("einsum", str(exc), [t.shape for t in operands]) from None

    def backward(g: np.ndarray) -> Grads:
        grads: List[Optional[np.ndarray]] = []
        for k, t in enumerate(operands):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [j for j in range(len(operands)) if j != k]
            grad_spec = ",".join([out_sub] + [in_subs[j] for j in others]) + "->" + in_subs[k]
            grads.append(np.einsum(grad_spec, g, *(operands[j].data for j in others)))
        return grads

    return _result("einsum", data, operands, backward)


# ============================================================
# Convolutions
# ============================================================

def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view N x C x Ho x Wo x kh x kw of every receptive field."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _fold(dwin: np.ndarray, padded_shape: Tuple[int, ...], stride: int) -> np.ndarray:
    """Scatter-add window gradients back onto the padded input (fixed order)."""
    _, _, ho, wo, kh, kw = dwin.shape
    dxp = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dwin[:, :, :, :, i, j]
    return dxp


def _crop(dxp: np.ndarray, padding: int, hw: Tuple[int, int]) -> np.ndarray:
    if padding == 0:
        return dxp
    return dxp[:, :, padding:padding + hw[0], padding:padding + hw[1]]


def _check_window(op: str, x: Tensor, kh: int, kw: int, stride: int, padding: int) -> None:
    if stride < 1 or padding < 0:
        raise ShapeError(op, f"stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    h, w = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if h < kh or w < kw:
        raise ShapeError(op, f"kernel {kh}x{kw} larger than padded input {h}x{w}", [x.shape])


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an n x c x kh x kw weight (im2col + matmul)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", "input and weight must be 4-D", [x.shape, weight.shape])
    n, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError("conv2d", f"input has {x.shape[1]} channels, weight expects {c}",
                         [x.shape, weight.shape])
    if bias is not None and bias.shape != (n,):
        raise ShapeError("conv2d", f"bias must have shape ({n},)", [bias.shape])
    _check_window("conv2d", x, kh, kw, stride, padding)

    batch = x.shape[0]
    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(n, -1)
    out = (cols @ w2.T).reshape(batch, ho, wo, n).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> Grads:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, n)
        gx = gw = gb = None
        if x.requires_grad:
            dwin = (g2 @ w2).reshape(batch, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gx = _crop(_fold(dwin, xp.shape, stride), padding, x.shape[2:])
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution with an n x 1 x kh x kw weight (n == input channels)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("depthwise_conv2d", "input and weight must be 4-D", [x.shape, weight.shape])
    n, one, kh, kw = weight.shape
    if one != 1:
        raise ShapeError("depthwise_conv2d", "weight must have a single input channel", [weight.shape])
    if x.shape[1] != n:
        raise ShapeError("depthwise_conv2d", f"input has {x.shape[1]} channels, weight has {n}",
                         [x.shape, weight.shape])
    _check_window("depthwise_conv2d", x, kh, kw, stride, padding)

    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    kernels = weight.data[:, 0]
    out = np.einsum("nchwij,cij->nchw", win, kernels)

    def backward(g: np.ndarray) -> Grads:
        gx = gw = None
        if x.requires_grad:
            dwin = np.einsum("nchw,cij->nchwij", g, kernels)
            gx = _crop(_fold(dwin, xp.shape, stride), padding, x.shape[2:])
        if weight.requires_grad:
            gw = np.einsum("nchw,nchwij->cij", g, win)[:, None]
        return gx, gw

    return _result("depthwise_conv2d", out, (x, weight), backward)


# ============================================================
# Normalization, activations, pooling, linear
# ============================================================

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """
    Per-channel normalization of an NCHW tensor.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance); inference mode uses the buffers.
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm2d", "input must be 4-D", [x.shape])
    c = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data),
                       ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError("batchnorm2d", f"{label} must have shape ({c},)", [arr.shape, x.shape])

    axes = (0, 2, 3)
    g_ = gamma.data[None, :, None, None]
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * count / max(count - 1, 1)
    else:
        count = 0
        inv = 1.0 / np.sqrt(running_var + eps)[None, :, None, None]
        xhat = (x.data - running_mean[None, :, None, None]) * inv
    out = g_ * xhat + beta.data[None, :, None, None]

    def backward(g: np.ndarray) -> Grads:
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if training:
                gx = inv / count * (count * dxhat
                                    - dxhat.sum(axis=axes, keepdims=True)
                                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = dxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result("batchnorm2d", out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias for x of shape N x f and weight k x f."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear", "input and weight must be 2-D", [x.shape, weight.shape])
    k, f = weight.shape
    if x.shape[1] != f:
        raise ShapeError("linear", f"input has {x.shape[1]} features, weight expects {f}",
                         [x.shape, weight.shape])
    if bias is not None and bias.shape != (k,):
        raise ShapeError("linear", f"bias must have shape ({k},)", [bias.shape])
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g: np.ndarray) -> Grads:
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("linear", out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial positions, N x C x H x W -> N x C."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", "input must be 4-D", [x.shape])
    area = x.shape[2] * x.shape[3]

    def backward(g: np.ndarray) -> Grads:
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return _result("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling (stride == kernel)."""
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", "input must be 4-D", [x.shape])
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError("avg_pool2d", f"spatial size {h}x{w} not divisible by {kernel}", [x.shape])
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def backward(g: np.ndarray) -> Grads:
        return (np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel),)

    return _result("avg_pool2d", out, (x,), backward)


# ============================================================
# Losses
# ============================================================

def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _labels(op: str, logits: Tensor, labels: Union[np.ndarray, Sequence[int]]) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(op, "logits must be N x K with N labels", [logits.shape, y.shape])
    if logits.shape[0] == 0:
        raise ShapeError(op, "empty batch", [logits.shape])
    if y.min() < 0 or y.max() >= logits.shape[1]:
        raise ShapeError(op, f"labels must lie in [0, {logits.shape[1]})")
    return y


def _ce_value(logp: np.ndarray, y: np.ndarray) -> float:
    return -logp[np.arange(len(y)), y].mean()


def cross_entropy(logits: Tensor, labels: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """Mean softmax cross-entropy, stabilized by max subtraction."""
    y = _labels("cross_entropy", logits, labels)
    logp = _log_softmax(logits.data)
    value = _ce_value(logp, y)

    def backward(g: np.ndarray) -> Grads:
        p = np.exp(logp)
        p[np.arange(len(y)), y] -= 1.0
        return (g * p / len(y),)

    return _result("cross_entropy", np.array(value), (logits,), backward)


def kd_loss(student_logits: Tensor, teacher_logits: Union[Tensor, np.ndarray],
            labels: Union[np.ndarray, Sequence[int]], lam: float, temperature: float) -> Tensor:
    """
    (1 - lam) * CE(labels, student) + lam * T^2 * KL(softmax(teacher/T) || softmax(student/T)).

    Teacher logits are constants.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"kd_loss: lambda must lie in [0, 1], got {lam}")
    if temperature <= 0.0:
        raise ConfigError(f"kd_loss: temperature must be positive, got {temperature}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape:
        raise ShapeError("kd_loss", "student and teacher logits differ", [student_logits.shape, t.shape])
    y = _labels("kd_loss", student_logits, labels)
    s = student_logits.data

    logp = _log_softmax(s)
    logq_s = _log_softmax(s / temperature)
    logq_t = _log_softmax(t / temperature)
    p_t = np.exp(logq_t)
    ce = _ce_value(logp, y)
    kl = (p_t * (logq_t - logq_s)).sum(axis=1).mean()
    value = (1.0 - lam) * ce + lam * temperature * temperature * kl

    def backward(g: np.ndarray) -> Grads:
        n = len(y)
        hard = np.exp(logp)
        hard[np.arange(n), y] -= 1.0
        soft = np.exp(logq_s) - p_t
        return (g * ((1.0 - lam) * hard + lam * temperature * soft) / n,)

    return _result("kd_loss", np.array(value), (student_logits,), backward)
