"""A small convolutional network in plain numpy.

conv 3x3 (8 filters, same padding) -> ReLU -> max-pool 2/2 -> conv 3x3
(2 filters) -> ReLU -> max-pool 3/3 -> flatten -> dropout -> dense K, with a
linear (regression) or sigmoid (classification) head. Pooling uses ceil mode
so partial windows at the border still produce an output cell, which keeps
the 5x5 covariate grids from collapsing to zero size.

Arrays are channels-first: inputs are (N, C, H, W).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class CnnError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _ceil_div(a, b):
    return -(-a // b)


@dataclass(frozen=True)
class CnnSpec:
    height: int
    width: int
    channels: int
    n_out: int
    filters1: int = 8
    filters2: int = 2
    kernel: int = 3
    pool1: int = 2
    pool2: int = 3
    dropout: float = 0.5
    head: str = "linear"

    def __post_init__(self):
        if min(self.height, self.width, self.channels, self.n_out) < 1:
            raise CnnError("input dims and n_out must be >= 1")
        if self.kernel % 2 != 1:
            raise CnnError("same padding needs an odd kernel")
        if not 0 <= self.dropout < 1:
            raise CnnError("dropout must lie in [0, 1)")
        if self.head not in ("linear", "sigmoid"):
            raise CnnError(f"unknown head {self.head!r}")

    @property
    def stage1_shape(self):
        return _ceil_div(self.height, self.pool1), _ceil_div(self.width, self.pool1)

    @property
    def stage2_shape(self):
        h, w = self.stage1_shape
        return _ceil_div(h, self.pool2), _ceil_div(w, self.pool2)

    @property
    def n_flat(self) -> int:
        h, w = self.stage2_shape
        return self.filters2 * h * w

    def param_shapes(self) -> dict:
        k = self.kernel
        return {"W1": (self.filters1, self.channels, k, k), "b1": (self.filters1,),
                "W2": (self.filters2, self.filters1, k, k), "b2": (self.filters2,),
                "W3": (self.n_flat, self.n_out), "b3": (self.n_out,)}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-3
    halve_every: int = 50
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise CnnError("learning rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.halve_every < 1:
            raise CnnError("epochs, batch_size and halve_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(spec: CnnSpec, seed: int = 0) -> dict:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name != "W3" else shape[0]
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return params


# ---------------------------------------------------------------------- layers

def conv_forward(x, W, b):
    """Stride-1 same-padding convolution (cross-correlation)."""
    N, C, H, Wd = x.shape
    F, _, k, _ = W.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    # (N, C, H, W, k, k) -> (N, H, W, C*k*k)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(N, H, Wd, C * k * k)
    out = cols @ W.reshape(F, -1).T + b
    return out.transpose(0, 3, 1, 2), cols


def conv_backward(dout, cols, x_shape, W):
    N, C, H, Wd = x_shape
    F, _, k, _ = W.shape
    p = k // 2
    d = dout.transpose(0, 2, 3, 1).reshape(-1, F)
    dW = (d.T @ cols.reshape(-1, C * k * k)).reshape(W.shape)
    db = d.sum(axis=0)
    dcols = (d @ W.reshape(F, -1)).reshape(N, H, Wd, C, k, k)
    dxp = np.zeros((N, C, H + 2 * p, Wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + H, j:j + Wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + H, p:p + Wd], dW, db


def pool_forward(x, size):
    """Non-overlapping max-pool, ceil mode; returns output and argmax cache."""
    N, C, H, W = x.shape
    ho, wo = _ceil_div(H, size), _ceil_div(W, size)
    xp = np.full((N, C, ho * size, wo * size), -np.inf)
    xp[:, :, :H, :W] = x
    blocks = xp.reshape(N, C, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(N, C, ho, wo, size * size)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape, size)


def pool_backward(dout, cache):
    arg, (N, C, H, W), size = cache
    ho, wo = dout.shape[2:]
    blocks = np.zeros((N, C, ho, wo, size * size))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(N, C, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(N, C, ho * size, wo * size)[:, :, :H, :W]


def dropout_mask(rng, shape, p):
    """Inverted-dropout mask: kept units are scaled by 1/(1-p)."""
    if p == 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


# -------------------------------------------------------------- forward/backward

def _check_batch(spec: CnnSpec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (spec.channels, spec.height, spec.width):
        raise CnnError(f"batch shape {x.shape} does not match (N, {spec.channels}, "
                       f"{spec.height}, {spec.width})")
    return x


def forward(spec: CnnSpec, params: dict, x, training: bool = False, rng=None, mask=None):
    """Network output and the cache needed by :func:`backward`.

    The output is the head activation (identity or sigmoid); the cache also
    holds the pre-activation logits. Dropout runs only when ``training``;
    pass either ``rng`` or a fixed ``mask`` of shape (N, n_flat).
    """
    x = _check_batch(spec, x)
    z1, cols1 = conv_forward(x, params["W1"], params["b1"])
    a1 = np.maximum(z1, 0.0)
    p1, pc1 = pool_forward(a1, spec.pool1)
    z2, cols2 = conv_forward(p1, params["W2"], params["b2"])
    a2 = np.maximum(z2, 0.0)
    p2, pc2 = pool_forward(a2, spec.pool2)
    flat = p2.reshape(x.shape[0], -1)
    if training and spec.dropout > 0:
        if mask is None:
            if rng is None:
                raise CnnError("training with dropout needs an rng or a mask")
            mask = dropout_mask(rng, flat.shape, spec.dropout)
        h = flat * mask
    else:
        mask = None
        h = flat
    logits = h @ params["W3"] + params["b3"]
    out = expit(logits) if spec.head == "sigmoid" else logits
    cache = {"x": x, "z1": z1, "cols1": cols1, "pc1": pc1, "p1": p1, "z2": z2,
             "cols2": cols2, "pc2": pc2, "p2_shape": p2.shape, "flat": flat, "mask": mask,
             "h": h, "logits": logits, "params_id": id(params)}
    return out, cache


def backward(spec: CnnSpec, params: dict, cache: dict, dlogits) -> dict:
    """Gradients of a scalar loss given d loss / d logits (pre-head)."""
    if cache.get("params_id") != id(params):
        raise CnnError("stale cache: it was produced with a different parameter set")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != cache["logits"].shape:
        raise CnnError("output gradient shape mismatch")
    grads = {"W3": cache["h"].T @ dlogits, "b3": dlogits.sum(axis=0)}
    dh = dlogits @ params["W3"].T
    dflat = dh * cache["mask"] if cache["mask"] is not None else dh
    da2 = pool_backward(dflat.reshape(cache["p2_shape"]), cache["pc2"])
    dz2 = da2 * (cache["z2"] > 0)
    dp1, grads["W2"], grads["b2"] = conv_backward(dz2, cache["cols2"], cache["p1"].shape,
                                                  params["W2"])
    da1 = pool_backward(dp1, cache["pc1"])
    dz1 = da1 * (cache["z1"] > 0)
    _, grads["W1"], grads["b1"] = conv_backward(dz1, cache["cols1"], cache["x"].shape,
                                                params["W1"])
    return grads


# ----------------------------------------------------------------------- losses

def _weights(y, weight):
    w = np.ones_like(y) if weight is None else np.asarray(weight, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise CnnError("loss weights sum to zero")
    return w, total


def mse_loss(logits, y, weight=None):
    """0.5 * weighted mean squared error; returns (loss, d loss / d logits)."""
    w, total = _weights(y, weight)
    r = logits - y
    return 0.5 * float(np.sum(w * r * r)) / total, w * r / total


def logloss(logits, y, weight=None):
    """Weighted mean binary cross-entropy of sigmoid(logits)."""
    w, total = _weights(y, weight)
    # log(1 + e^z) - y z is the stable form of the BCE
    val = np.logaddexp(0.0, logits) - y * logits
    return float(np.sum(w * val)) / total, w * (expit(logits) - y) / total


LOSSES = {"mse": mse_loss, "logloss": logloss}


def loss_and_grads(spec, params, x, y, loss="mse", weight=None, training=False, mask=None,
                   rng=None):
    _, cache = forward(spec, params, x, training=training, rng=rng, mask=mask)
    value, dlogits = LOSSES[loss](cache["logits"], y, weight)
    return value, backward(spec, params, cache, dlogits)


def gradient_check(spec, params, x, y, loss="mse", h=1e-4, weight=None, mask=None) -> dict:
    """Largest elementwise relative error between analytic and central
    finite-difference gradients, per parameter array.

    Relative error is |a - n| / max(|a|, |n|, 1e-8). A dropout ``mask`` is
    held fixed so the loss is a deterministic function of the parameters.
    """
    training = mask is not None
    _, grads = loss_and_grads(spec, params, x, y, loss, weight, training, mask)
    worst = {}
    for name in PARAM_NAMES:
        p = params[name]
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            fp, _ = loss_and_grads(spec, params, x, y, loss, weight, training, mask)
            p[idx] = old - h
            fm, _ = loss_and_grads(spec, params, x, y, loss, weight, training, mask)
            p[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(grads[name]), np.abs(num)), 1e-8)
        worst[name] = float(np.max(np.abs(grads[name] - num) / denom))
    return worst


# ---------------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: dict
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)


def train(spec: CnnSpec, x, y, settings: TrainSettings | None = None, loss: str = "mse",
          weight=None, params: dict | None = None) -> TrainResult:
    """Mini-batch gradient descent with a step-halving learning rate.

    ``weight`` (same shape as ``y``) masks or weights loss entries, e.g. to
    train the amount head on wet days only. The recorded loss is the
    full-data loss in inference mode after each epoch.
    """
    st = settings or TrainSettings()
    if loss not in LOSSES:
        raise CnnError(f"unknown loss {loss!r}")
    x = _check_batch(spec, x)
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], spec.n_out)
    w = np.ones_like(y) if weight is None else np.asarray(weight, dtype=np.float64).reshape(y.shape)
    if params is None:
        params = init_params(spec, st.seed)
    else:
        params = {k: v.copy() for k, v in params.items()}
    rng = np.random.default_rng(st.seed + 1)
    n = x.shape[0]
    result = TrainResult(params)
    for epoch in range(st.epochs):
        lr = st.lr * 0.5 ** (epoch // st.halve_every)
        order = rng.permutation(n)
        for start in range(0, n, st.batch_size):
            idx = order[start:start + st.batch_size]
            if w[idx].sum() <= 0:
                continue
            _, grads = loss_and_grads(spec, params, x[idx], y[idx], loss, w[idx],
                                      training=True, rng=rng)
            for name in PARAM_NAMES:
                params[name] -= lr * grads[name]
        _, cache = forward(spec, params, x)
        value, _ = LOSSES[loss](cache["logits"], y, w)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at epoch {epoch + 1} (lr={lr:g})")
        result.losses.append(value)
        result.lrs.append(lr)
    return result


def predict(spec: CnnSpec, params: dict, x) -> np.ndarray:
    out, _ = forward(spec, params, x, training=False)
    return out


def params_to_dict(params: dict) -> dict:
    return {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.items()}


def params_from_dict(d: dict) -> dict:
    return {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}
