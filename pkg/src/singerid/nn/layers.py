"""Differentiable operations used by the three networks.

Convolutions are lowered to a single matrix product over unfolded windows
(im2col); the recurrent layers are fused ops with hand-written
backpropagation through time so that one sequence is one tape node.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, accumulate, as_tensor, make


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make(a.data * b.data, (a, b), backward, "mul")


def relu(x):
    mask = x.data > 0

    def backward(g):
        accumulate(x, g * mask)

    return make(x.data * mask, (x,), backward, "relu")


def reshape(x, shape):
    def backward(g):
        accumulate(x, g.reshape(x.shape))

    return make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes):
    inverse = np.argsort(axes)

    def backward(g):
        accumulate(x, g.transpose(inverse))

    return make(x.data.transpose(axes), (x,), backward, "transpose")


def concat(xs, axis):
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(xs, np.split(g, bounds, axis=axis)):
            accumulate(t, part)

    return make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward, "concat")


def mean(x, axis):
    n = x.shape[axis]

    def backward(g):
        accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape) / n)

    return make(x.data.mean(axis=axis), (x,), backward, "mean")


def total(x):
    """Sum of all elements as a scalar tensor."""

    def backward(g):
        accumulate(x, np.broadcast_to(g, x.shape).copy())

    return make(np.array(x.data.sum()), (x,), backward, "sum")


# ---------------------------------------------------------------------------
# dense / convolution / pooling

def dense(x, W, b):
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"dense: incompatible shapes x{x.shape}, W{W.shape}, b{b.shape}")

    def backward(g):
        accumulate(W, x.data.T @ g)
        accumulate(b, g.sum(axis=0))
        if x.requires_grad:
            accumulate(x, g @ W.data.T)

    return make(x.data @ W.data + b.data, (x, W, b), backward, "dense")


def conv2d_same(x, k, b):
    """Zero-padded 'same' 2-D cross-correlation, NCHW layout.

    Even kernels put the extra row/column of padding on the trailing side.
    """
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1] or b.shape != (k.shape[0],):
        raise ValueError(f"conv2d_same: incompatible shapes x{x.shape}, k{k.shape}, b{b.shape}")
    B, C, H, W = x.shape
    Co, _, kh, kw = k.shape
    if kh > 2 * H or kw > 2 * W:
        raise ValueError(f"conv2d_same: kernel {kh}x{kw} larger than twice the input {H}x{W}")
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, kh - 1 - pt), (pl, kw - 1 - pl)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(B * H * W, C * kh * kw)
    kmat = k.data.reshape(Co, -1)
    out = (cols @ kmat.T + b.data).reshape(B, H, W, Co).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        accumulate(k, (gm.T @ cols).reshape(k.shape))
        accumulate(b, gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ kmat).reshape(B, H, W, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + H, j:j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            accumulate(x, dxp[:, :, pt:pt + H, pl:pl + W])

    return make(out, (x, k, b), backward, "conv2d_same")


def maxpool2d(x, kh, kw):
    """Non-overlapping max pooling; the trailing remainder is dropped."""
    B, C, H, W = x.shape
    if kh > H or kw > W:
        raise ValueError(f"maxpool2d: pool {kh}x{kw} larger than input {H}x{W}")
    Ho, Wo = H // kh, W // kw
    win = x.data[:, :, :Ho * kh, :Wo * kw].reshape(B, C, Ho, kh, Wo, kw)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, kh * kw)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((B, C, Ho, Wo, kh * kw))
        np.put_along_axis(dwin, idx, g[..., None], axis=-1)
        dwin = dwin.reshape(B, C, Ho, Wo, kh, kw).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x.shape)
        dx[:, :, :Ho * kh, :Wo * kw] = dwin.reshape(B, C, Ho * kh, Wo * kw)
        accumulate(x, dx)

    return make(out, (x,), backward, "maxpool2d")


def conv1d(x, k, b=None, stride=1):
    """Strided 1-D cross-correlation over [batch, channels, time].

    Zero padding is chosen so the output has ceil(T / stride) steps; the odd
    padding sample goes to the trailing side.
    """
    if x.ndim != 3 or k.ndim != 3 or x.shape[1] != k.shape[1]:
        raise ValueError(f"conv1d: incompatible shapes x{x.shape}, k{k.shape}")
    B, Ci, T = x.shape
    Co, _, kt = k.shape
    b = b if b is not None else Tensor(np.zeros(Co))
    if b.shape != (Co,):
        raise ValueError(f"conv1d: bias shape {b.shape} does not match {Co} output channels")
    To = -(-T // stride)
    pad = max((To - 1) * stride + kt - T, 0)
    left = pad // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, pad - left)))
    cols = sliding_window_view(xp, kt, axis=2)[:, :, ::stride][:, :, :To]
    cols = cols.transpose(0, 2, 1, 3).reshape(B * To, Ci * kt)
    kmat = k.data.reshape(Co, -1)
    out = (cols @ kmat.T + b.data).reshape(B, To, Co).transpose(0, 2, 1)

    def backward(g):
        gm = g.transpose(0, 2, 1).reshape(-1, Co)
        accumulate(k, (gm.T @ cols).reshape(k.shape))
        accumulate(b, gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ kmat).reshape(B, To, Ci, kt)
            dxp = np.zeros_like(xp)
            span = stride * (To - 1) + 1
            for j in range(kt):
                dxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
            accumulate(x, dxp[:, :, left:left + T])

    return make(out, (x, k, b), backward, "conv1d")


def conv1d_transpose(x, k, b=None, stride=1):
    """Transposed 1-D convolution producing exactly stride * T output steps.

    ``k`` has layout [in_channels, out_channels, kernel]; sharing a kernel
    with :func:`conv1d` makes the two operators adjoint.
    """
    if x.ndim != 3 or k.ndim != 3 or x.shape[1] != k.shape[0]:
        raise ValueError(f"conv1d_transpose: incompatible shapes x{x.shape}, k{k.shape}")
    B, Ci, T = x.shape
    _, Co, kt = k.shape
    b = b if b is not None else Tensor(np.zeros(Co))
    if b.shape != (Co,):
        raise ValueError(f"conv1d_transpose: bias shape {b.shape} does not match {Co} output channels")
    n_out = stride * T
    full_len = (T - 1) * stride + kt
    crop = full_len - n_out
    left = crop // 2 if crop > 0 else 0
    buf_len = max(full_len, left + n_out)
    span = stride * (T - 1) + 1

    xm = x.data.transpose(0, 2, 1).reshape(B * T, Ci)
    kmat = k.data.reshape(Ci, Co * kt)
    Y = (xm @ kmat).reshape(B, T, Co, kt)
    full = np.zeros((B, Co, buf_len))
    for j in range(kt):
        full[:, :, j:j + span:stride] += Y[:, :, :, j].transpose(0, 2, 1)
    out = full[:, :, left:left + n_out] + b.data[None, :, None]

    def backward(g):
        gfull = np.zeros((B, Co, buf_len))
        gfull[:, :, left:left + n_out] = g
        dY = np.empty((B, T, Co, kt))
        for j in range(kt):
            dY[:, :, :, j] = gfull[:, :, j:j + span:stride].transpose(0, 2, 1)
        dYm = dY.reshape(B * T, Co * kt)
        accumulate(k, (xm.T @ dYm).reshape(k.shape))
        accumulate(b, g.sum(axis=(0, 2)))
        if x.requires_grad:
            accumulate(x, (dYm @ kmat.T).reshape(B, T, Ci).transpose(0, 2, 1))

    return make(out, (x, k, b), backward, "conv1d_transpose")


# ---------------------------------------------------------------------------
# recurrent layers

def gru_seq(x, Wx, Wh, bx, bh):
    """GRU over x [T, batch, in] from a zero initial state.

    Gate layout in the 3H axis is (reset, update, candidate); the reset gate
    multiplies the recurrent part of the candidate pre-activation.
    """
    T, B, n_in = x.shape
    H = Wh.shape[0]
    if Wx.shape != (n_in, 3 * H) or Wh.shape != (H, 3 * H) or bx.shape != (3 * H,) or bh.shape != (3 * H,):
        raise ValueError(f"gru_seq: bad parameter shapes for input {x.shape}: "
                         f"Wx{Wx.shape} Wh{Wh.shape} bx{bx.shape} bh{bh.shape}")
    ax = (x.data.reshape(T * B, n_in) @ Wx.data + bx.data).reshape(T, B, 3 * H)
    hs = np.zeros((T + 1, B, H))
    r = np.empty((T, B, H))
    z = np.empty((T, B, H))
    n = np.empty((T, B, H))
    ahn = np.empty((T, B, H))
    for t in range(T):
        ah = hs[t] @ Wh.data + bh.data
        r[t] = _sigmoid(ax[t, :, :H] + ah[:, :H])
        z[t] = _sigmoid(ax[t, :, H:2 * H] + ah[:, H:2 * H])
        ahn[t] = ah[:, 2 * H:]
        n[t] = np.tanh(ax[t, :, 2 * H:] + r[t] * ahn[t])
        hs[t + 1] = (1.0 - z[t]) * n[t] + z[t] * hs[t]

    def backward(g):
        dax = np.empty((T, B, 3 * H))
        dWh = np.zeros_like(Wh.data)
        dbh = np.zeros(3 * H)
        dh = np.zeros((B, H))
        dah = np.empty((B, 3 * H))
        for t in range(T - 1, -1, -1):
            dh = dh + g[t]
            dn = dh * (1.0 - z[t])
            dz = dh * (hs[t] - n[t])
            dan = dn * (1.0 - n[t] ** 2)
            dr = dan * ahn[t]
            dar = dr * r[t] * (1.0 - r[t])
            daz = dz * z[t] * (1.0 - z[t])
            dax[t, :, :H] = dar
            dax[t, :, H:2 * H] = daz
            dax[t, :, 2 * H:] = dan
            dah[:, :H] = dar
            dah[:, H:2 * H] = daz
            dah[:, 2 * H:] = dan * r[t]
            dWh += hs[t].T @ dah
            dbh += dah.sum(axis=0)
            dh = dh * z[t] + dah @ Wh.data.T
        daxm = dax.reshape(T * B, 3 * H)
        accumulate(Wx, x.data.reshape(T * B, n_in).T @ daxm)
        accumulate(bx, daxm.sum(axis=0))
        accumulate(Wh, dWh)
        accumulate(bh, dbh)
        if x.requires_grad:
            accumulate(x, (daxm @ Wx.data.T).reshape(T, B, n_in))

    return make(hs[1:].copy(), (x, Wx, Wh, bx, bh), backward, "gru_seq")


def lstm_seq(x, Wx, Wh, b, reverse=False):
    """LSTM over x [T, batch, in] from zero state; gate layout (input, forget, cell, output).

    With ``reverse`` the recurrence runs from t = T-1 down to 0 and output t is
    the state after consuming x[t:].
    """
    T, B, n_in = x.shape
    H = Wh.shape[0]
    if Wx.shape != (n_in, 4 * H) or Wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ValueError(f"lstm_seq: bad parameter shapes for input {x.shape}: "
                         f"Wx{Wx.shape} Wh{Wh.shape} b{b.shape}")
    steps = range(T - 1, -1, -1) if reverse else range(T)
    ax = (x.data.reshape(T * B, n_in) @ Wx.data + b.data).reshape(T, B, 4 * H)
    gates = np.empty((T, B, 4 * H))
    cs = np.empty((T, B, H))
    tc = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    prev = {}
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in steps:
        a = ax[t] + h @ Wh.data
        gt = gates[t]
        gt[:, :H] = _sigmoid(a[:, :H])
        gt[:, H:2 * H] = _sigmoid(a[:, H:2 * H])
        gt[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        gt[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        prev[t] = (h, c)
        c = gt[:, H:2 * H] * c + gt[:, :H] * gt[:, 2 * H:3 * H]
        cs[t] = c
        tc[t] = np.tanh(c)
        h = gt[:, 3 * H:] * tc[t]
        hs[t] = h

    def backward(g):
        dax = np.empty((T, B, 4 * H))
        dWh = np.zeros_like(Wh.data)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in reversed(steps):
            h_prev, c_prev = prev[t]
            i, f, cc, o = (gates[t][:, k * H:(k + 1) * H] for k in range(4))
            dh = dh + g[t]
            do = dh * tc[t]
            dc = dc + dh * o * (1.0 - tc[t] ** 2)
            da = dax[t]
            da[:, :H] = dc * cc * i * (1.0 - i)
            da[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            da[:, 2 * H:3 * H] = dc * i * (1.0 - cc ** 2)
            da[:, 3 * H:] = do * o * (1.0 - o)
            dWh += h_prev.T @ da
            dc = dc * f
            dh = da @ Wh.data.T
        daxm = dax.reshape(T * B, 4 * H)
        accumulate(Wx, x.data.reshape(T * B, n_in).T @ daxm)
        accumulate(b, daxm.sum(axis=0))
        accumulate(Wh, dWh)
        if x.requires_grad:
            accumulate(x, (daxm @ Wx.data.T).reshape(T, B, n_in))

    return make(hs, (x, Wx, Wh, b), backward, "lstm_seq")


def bilstm_seq(x, layers):
    """Stacked bidirectional LSTM.

    ``layers`` is a list of ((Wx, Wh, b) forward, (Wx, Wh, b) backward) pairs;
    each layer's output is [T, batch, 2 * hidden] with the forward half first.
    """
    out = x
    for fwd, bwd in layers:
        out = concat([lstm_seq(out, *fwd), lstm_seq(out, *bwd, reverse=True)], axis=2)
    return out


# ---------------------------------------------------------------------------
# regularisation and losses

def dropout(x, drop_prob, train, rng):
    """Inverted dropout: survivors are scaled by 1/(1 - drop_prob) in training mode."""
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {drop_prob}")
    if not train or drop_prob == 0.0:
        return x
    mask = (rng.random(x.shape) >= drop_prob) / (1.0 - drop_prob)

    def backward(g):
        accumulate(x, g * mask)

    return make(x.data * mask, (x,), backward, "dropout")


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy of integer ``labels`` under softmax(logits).

    Returns the scalar loss tensor and the probability matrix.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if C < 2:
        raise ValueError("softmax_xent needs at least two classes")
    if labels.shape != (B,):
        raise ValueError(f"softmax_xent: {labels.shape[0] if labels.ndim else 0} labels for batch of {B}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"softmax_xent: label out of range [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        accumulate(logits, g * d / B)

    return make(np.array(loss), (logits,), backward, "softmax_xent"), probs


def l1_loss(pred, target):
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target

    def backward(g):
        accumulate(pred, g * np.sign(diff) / diff.size)

    return make(np.array(np.abs(diff).mean()), (pred,), backward, "l1_loss")
