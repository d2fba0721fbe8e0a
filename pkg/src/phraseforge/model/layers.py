"""Forward/backward kernels for the grounding network (float64 numpy).

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes the upstream gradient and the cache.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.01
BCE_EPS = 1e-7


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, 1.0, slope)


# ---------------------------------------------------------------- channel norm


def standardize(stack: np.ndarray, eps: float) -> np.ndarray:
    """Per-channel ``(x - mean) / sqrt(var + eps)`` over the spatial axes."""
    mu = stack.mean(axis=(1, 2), keepdims=True)
    var = stack.var(axis=(1, 2), keepdims=True)
    return (stack - mu) / np.sqrt(var + eps)


def channel_norm(stack: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    return gain[:, None, None] * standardize(stack, eps) + bias[:, None, None]


# ---------------------------------------------------------------- two-layer perceptron


def mlp_forward(x, W1, b1, W2, b2, dropout_mask=None):
    pre = W1 @ x + b1
    h = leaky_relu(pre)
    if dropout_mask is not None:
        h = h * dropout_mask
    z = W2 @ h + b2
    return z, (x, pre, h, dropout_mask)


def mlp_backward(dz, cache, W2):
    x, pre, h, mask = cache
    dW2 = np.outer(dz, h)
    db2 = dz.copy()
    dh = W2.T @ dz
    if mask is not None:
        dh = dh * mask
    dpre = dh * leaky_relu_grad(pre)
    return np.outer(dpre, x), dpre, dW2, db2


# ---------------------------------------------------------------- attention + affine head


def attend(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted channel sum ``S = sum_c A_c * C_c``."""
    if weights.shape[0] != stack.shape[0]:
        raise ValueError(f"attention has {weights.shape[0]} weights for {stack.shape[0]} channels")
    return np.tensordot(weights, stack, axes=(0, 0))


def module_out(score: np.ndarray, a: float, b: float) -> np.ndarray:
    return sigmoid(a * score + b)


# ---------------------------------------------------------------- dilated convolution


def conv2d_forward(x: np.ndarray, k: np.ndarray, bias: np.ndarray | None, dilation: int) -> np.ndarray:
    """Same-size 2-D convolution (cross-correlation) with zero padding.

    x: (Cin, H, W); k: (Cout, Cin, kh, kw) with odd kh, kw.
    """
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((cout, h, w))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i * dilation : i * dilation + h, j * dilation : j * dilation + w]
            out += np.tensordot(k[:, :, i, j], patch, axes=(1, 0))
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, k: np.ndarray, dilation: int, need_input: bool = True):
    """Returns ``(dx, dk, dbias)``; ``dx`` is ``None`` when not requested."""
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    dk = np.zeros_like(k)
    dxp = np.zeros_like(xp) if need_input else None
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i * dilation, i * dilation + h), slice(j * dilation, j * dilation + w))
            dk[:, :, i, j] = np.tensordot(dout, xp[sl], axes=([1, 2], [1, 2]))
            if need_input:
                dxp[sl] += np.tensordot(k[:, :, i, j], dout, axes=(0, 0))
    dbias = dout.sum(axis=(1, 2))
    dx = dxp[:, ph : ph + h, pw : pw + w] if need_input else None
    return dx, dk, dbias


# ---------------------------------------------------------------- resampling


def resize_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) linear resampling operator: block average when shrinking by an
    integer factor, nearest neighbour otherwise."""
    m = np.zeros((dst, src))
    if dst < src and src % dst == 0:
        f = src // dst
        for i in range(dst):
            m[i, i * f : (i + 1) * f] = 1.0 / f
    else:
        idx = np.minimum(((np.arange(dst) + 0.5) * src / dst).astype(int), src - 1)
        m[np.arange(dst), idx] = 1.0
    return m


def upsample_nearest_matrix(src: int, dst: int) -> np.ndarray:
    m = np.zeros((dst, src))
    idx = np.minimum(((np.arange(dst) + 0.5) * src / dst).astype(int), src - 1)
    m[np.arange(dst), idx] = 1.0
    return m


# ---------------------------------------------------------------- combination


N_COMBINED = 10
# channel order of the combined scoremap
COMBINED_CHANNELS = ("cat", "att", "rel", "cat*cat", "cat*att", "cat*rel", "att*att", "att*rel", "rel*rel", "bias")


def presence_mask(has_att: bool, has_rel: bool) -> np.ndarray:
    keep = np.ones(N_COMBINED)
    for t, name in enumerate(COMBINED_CHANNELS):
        parts = name.split("*")
        if (not has_att and "att" in parts) or (not has_rel and "rel" in parts):
            keep[t] = 0.0
    return keep


def combined_features(p_cat: np.ndarray, p_att: np.ndarray, p_rel: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            p_cat,
            p_att,
            p_rel,
            p_cat * p_cat,
            p_cat * p_att,
            p_cat * p_rel,
            p_att * p_att,
            p_att * p_rel,
            p_rel * p_rel,
            np.ones_like(p_cat),
        ]
    )


def combined_features_backward(dF: np.ndarray, p_cat, p_att, p_rel):
    d_cat = dF[0] + 2 * p_cat * dF[3] + p_att * dF[4] + p_rel * dF[5]
    d_att = dF[1] + p_cat * dF[4] + 2 * p_att * dF[6] + p_rel * dF[7]
    d_rel = dF[2] + p_cat * dF[5] + p_att * dF[7] + 2 * p_rel * dF[8]
    return d_cat, d_att, d_rel


def renormalize(weights: np.ndarray, keep: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64) * keep
    total = w.sum()
    if not total > 0:
        raise ValueError("cannot renormalize: every surviving ensemble weight is zero")
    return w / total


def weighted_sum(features: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``O = sum_t F_t w_t`` accumulated channel by channel (exact for one-hot ``w``)."""
    out = np.zeros(features.shape[1:])
    for t in range(features.shape[0]):
        if w[t] != 0.0:
            out += w[t] * features[t]
    return out


def masked_softmax(logits: np.ndarray, keep: np.ndarray) -> np.ndarray:
    live = keep > 0
    if not live.any():
        raise ValueError("cannot renormalize: no surviving ensemble channel")
    z = np.where(live, logits, -np.inf)
    z = z - z[live].max()
    e = np.where(live, np.exp(z), 0.0)
    return e / e.sum()


def masked_softmax_backward(dw: np.ndarray, w: np.ndarray) -> np.ndarray:
    return w * (dw - np.dot(w, dw))


# ---------------------------------------------------------------- loss


def positive_weight(gt: np.ndarray, cap: float = 20.0) -> float:
    """Area-balanced positive-pixel weight ``max(1, negatives / positives)`` capped at ``cap``."""
    pos = int(np.count_nonzero(gt))
    if pos == 0:
        return 1.0
    neg = gt.size - pos
    return float(min(cap, max(1.0, neg / pos)))


def bce_loss(pred: np.ndarray, gt: np.ndarray, pos_weight: float, eps: float = BCE_EPS) -> float:
    """Pixel-averaged binary cross-entropy with weight ``pos_weight`` on positives."""
    if pos_weight <= 0:
        raise ValueError("positive weight must be > 0")
    p = np.clip(pred, eps, 1.0 - eps)
    y = np.asarray(gt, dtype=np.float64)
    per_pixel = -(pos_weight * y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(per_pixel.mean())


def bce_loss_grad(pred: np.ndarray, gt: np.ndarray, pos_weight: float, eps: float = BCE_EPS) -> np.ndarray:
    y = np.asarray(gt, dtype=np.float64)
    inside = (pred > eps) & (pred < 1.0 - eps)
    p = np.clip(pred, eps, 1.0 - eps)
    g = (-(pos_weight * y) / p + (1.0 - y) / (1.0 - p)) / pred.size
    return np.where(inside, g, 0.0)
