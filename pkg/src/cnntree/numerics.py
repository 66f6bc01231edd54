"""Dense tensor math with reverse-mode gradients and an Adam optimizer.

Everything is built on numpy arrays.  Each operation runs eagerly and
returns a `Node` that remembers its inputs and how to push gradients back,
so `backward(loss)` can fill in `Parameter.gradient` for every trainable
parameter that contributed to the loss.

Conventions:
  * parameters and activations are float32; ops follow the dtype of their
    inputs, so the same code can be driven in float64 for high-precision
    checks
  * spatial tensors are channels-last: [H, W, C] or batched [N, H, W, C]
  * losses reduce to a scalar (mean over the batch when given one)
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

LOSS_CLAMP = 1e-12  # probability clamp inside both losses; keeps log finite


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up, naming the bad dimension."""


class StaleGraphError(RuntimeError):
    """Raised by backward() when parameters changed after the forward pass."""


class Parameter:
    """A weight tensor with its gradient and a trainable flag.

    `version` is bumped whenever the value is updated in place; backward()
    uses it to detect graphs whose forward pass is stale.
    """

    def __init__(self, value, trainable: bool = True):
        self.value = np.array(value, dtype=np.float32)
        self.gradient = np.zeros_like(self.value)
        self.trainable = trainable
        self.version = 0

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter(shape={self.value.shape}, {kind})"


class AdamState:
    """Per-parameter Adam accumulators plus the optimizer hyperparameters."""

    def __init__(self, shape, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.first_moment = np.zeros(shape, dtype=np.float32)
        self.second_moment = np.zeros(shape, dtype=np.float32)
        self.step_count = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon


def adam_step(param: Parameter, state: AdamState) -> None:
    """One Adam update with bias correction; frozen parameters are skipped."""
    if not param.trainable:
        return
    if state.first_moment.shape != param.value.shape:
        raise ShapeError(
            f"Adam state shape {state.first_moment.shape} does not match "
            f"parameter shape {param.value.shape}")
    g = param.gradient
    t = state.step_count + 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (g * g)
    m_hat = state.first_moment / (1.0 - state.beta1 ** t)
    v_hat = state.second_moment / (1.0 - state.beta2 ** t)
    param.value -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    state.step_count = t
    param.version += 1


class Node:
    """One value in the computation graph.

    `backward_fn(grad)` returns one gradient array per parent (None where a
    parent needs no gradient).  Leaf nodes created from a Parameter record
    the parameter and its version at forward time.
    """

    __slots__ = ("value", "parents", "backward_fn", "param", "param_version",
                 "requires_grad")

    def __init__(self, value: np.ndarray, parents: tuple = (),
                 backward_fn: Optional[Callable] = None,
                 param: Optional[Parameter] = None,
                 requires_grad: bool = False):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param
        self.param_version = param.version if param is not None else 0
        self.requires_grad = requires_grad


ArrayLike = Union[Node, Parameter, np.ndarray, float, int, Sequence]


def as_node(x: ArrayLike) -> Node:
    """Wrap a Parameter (gradient leaf) or raw array (constant) as a Node."""
    if isinstance(x, Node):
        return x
    if isinstance(x, Parameter):
        return Node(x.value, param=x, requires_grad=x.trainable)
    value = np.asarray(x)
    if not np.issubdtype(value.dtype, np.floating):
        value = value.astype(np.float32)
    return Node(value)


def _op(value: np.ndarray, parents: tuple, backward_fn: Callable) -> Node:
    requires = any(p.requires_grad for p in parents)
    return Node(value, parents, backward_fn if requires else None,
                requires_grad=requires)


def _topo_order(root: Node) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order  # parents always precede their consumers


def backward(loss: Node) -> None:
    """Populate `gradient` on every trainable Parameter the loss depends on.

    The gradient is assigned (not accumulated across calls); a parameter
    appearing several times in one graph has its contributions summed.
    Raises StaleGraphError if any parameter was updated since the forward
    pass that produced `loss`.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        if node.param is not None and node.param_version != node.param.version:
            raise StaleGraphError(
                "parameter changed since the forward pass; rebuild the loss "
                "before calling backward")

    grads: dict = {id(loss): np.ones_like(loss.value)}
    param_grads: dict = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None and node.param.trainable:
            acc = param_grads.get(id(node.param))
            if acc is None:
                param_grads[id(node.param)] = (node.param, g.copy())
            else:
                acc[1] += g
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for param, g in param_grads.values():
        param.gradient = g.astype(param.value.dtype, copy=False)


# ---------------------------------------------------------------------------
# layers


def _to_batched(x: np.ndarray, ndim_single: int, name: str) -> tuple:
    if x.ndim == ndim_single:
        return x[None], True
    if x.ndim == ndim_single + 1:
        return x, False
    raise ShapeError(f"{name} expects {ndim_single}D or {ndim_single + 1}D input, "
                     f"got {x.ndim}D shape {x.shape}")


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str) -> tuple:
    """Output extent and padding amounts for the standard conv arithmetic."""
    if padding == "valid":
        if k > h or k > w:
            raise ShapeError(f"kernel extent {k} exceeds input extent "
                             f"{(h, w)} with valid padding")
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        return ho, wo, 0, 0, 0, 0
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        pad_h = max((ho - 1) * stride + k - h, 0)
        pad_w = max((wo - 1) * stride + k - w, 0)
        return ho, wo, pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x: ArrayLike, kernels: ArrayLike, bias: ArrayLike,
           stride: int = 1, padding: str = "valid") -> Node:
    """2D convolution: input [H,W,C] or [N,H,W,C], kernels [k,k,C,F], bias [F]."""
    xn, kn, bn = as_node(x), as_node(kernels), as_node(bias)
    xb, squeezed = _to_batched(xn.value, 3, "conv2d")
    if kn.value.ndim != 4 or kn.value.shape[0] != kn.value.shape[1]:
        raise ShapeError(f"kernels must be [k,k,C,F], got shape {kn.value.shape}")
    k, _, cin, filters = kn.value.shape
    if cin != xb.shape[3]:
        raise ShapeError(f"kernel channel dimension {cin} does not match "
                         f"input channels {xb.shape[3]}")
    if bn.value.shape != (filters,):
        raise ShapeError(f"bias shape {bn.value.shape} does not match "
                         f"filter count {filters}")
    n, h, w, _ = xb.shape
    ho, wo, pt, pb, pl, pr = _conv_geometry(h, w, k, stride, padding)
    xp = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt or pb or pl or pr else xb

    # im2col as a gather, so the backward pass is the matching scatter-add
    ki = np.repeat(np.arange(k), k)
    kj = np.tile(np.arange(k), k)
    oi = stride * np.repeat(np.arange(ho), wo)
    oj = stride * np.tile(np.arange(wo), ho)
    rows = oi[:, None] + ki[None, :]          # (ho*wo, k*k)
    cols_idx = oj[:, None] + kj[None, :]
    cols = xp[:, rows, cols_idx, :]           # (n, ho*wo, k*k, c)
    cols_mat = cols.reshape(n * ho * wo, k * k * cin)
    w_mat = kn.value.reshape(k * k * cin, filters)
    out = cols_mat @ w_mat + bn.value
    out = out.reshape(n, ho, wo, filters)
    if squeezed:
        out = out[0]

    def bwd(g):
        gb = g[None] if squeezed else g
        g_mat = gb.reshape(n * ho * wo, filters)
        gx = None
        if xn.requires_grad:
            dcols = (g_mat @ w_mat.T).reshape(n, ho * wo, k * k, cin)
            dxp = np.zeros_like(xp)
            np.add.at(dxp, (slice(None), rows, cols_idx), dcols)
            gx = dxp[:, pt:pt + h, pl:pl + w, :]
            if squeezed:
                gx = gx[0]
        gk = None
        if kn.requires_grad:
            gk = (cols_mat.T @ g_mat).reshape(kn.value.shape)
        gbias = g_mat.sum(axis=0) if bn.requires_grad else None
        return gx, gk, gbias

    return _op(out, (xn, kn, bn), bwd)


def maxpool2d(x: ArrayLike, window: int, stride: int) -> Node:
    """Max pooling over [window x window] patches; gradient flows to the
    first maximum in row-major scan order within each window."""
    xn = as_node(x)
    xb, squeezed = _to_batched(xn.value, 3, "maxpool2d")
    n, h, w, c = xb.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input extent {(h, w)}")
    view = np.lib.stride_tricks.sliding_window_view(xb, (window, window), axis=(1, 2))
    view = view[:, ::stride, ::stride]        # (n, ho, wo, c, window, window)
    ho, wo = view.shape[1], view.shape[2]
    flat = view.reshape(n, ho, wo, c, window * window)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    if squeezed:
        out = out[0]

    def bwd(g):
        if not xn.requires_grad:
            return (None,)
        gb = g[None] if squeezed else g
        gx = np.zeros_like(xb)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, None, None, :]
        hi = (stride * np.arange(ho))[None, :, None, None] + arg // window
        wi = (stride * np.arange(wo))[None, None, :, None] + arg % window
        np.add.at(gx, (ni, hi, wi, ci), gb)
        return (gx[0] if squeezed else gx,)

    return _op(out, (xn,), bwd)


def global_avg_pool(x: ArrayLike) -> Node:
    """Mean over the spatial axes: [N,H,W,C] -> [N,C] (or [H,W,C] -> [C])."""
    xn = as_node(x)
    xb, squeezed = _to_batched(xn.value, 3, "global_avg_pool")
    n, h, w, c = xb.shape
    out = xb.mean(axis=(1, 2))
    if squeezed:
        out = out[0]

    def bwd(g):
        gb = g[None] if squeezed else g
        gx = np.broadcast_to(gb[:, None, None, :] / (h * w), xb.shape).copy()
        return (gx[0] if squeezed else gx,)

    return _op(out, (xn,), bwd)


def dense(x: ArrayLike, weights: ArrayLike, bias: ArrayLike) -> Node:
    """Fully connected layer: out[j] = sum_i x[i] * W[i,j] + b[j]."""
    xn, wn, bn = as_node(x), as_node(weights), as_node(bias)
    xb, squeezed = _to_batched(xn.value, 1, "dense")
    if wn.value.ndim != 2:
        raise ShapeError(f"weights must be 2D, got shape {wn.value.shape}")
    n_in, n_out = wn.value.shape
    if xb.shape[1] != n_in:
        raise ShapeError(f"input features {xb.shape[1]} do not match "
                         f"weight rows {n_in}")
    if bn.value.shape != (n_out,):
        raise ShapeError(f"bias shape {bn.value.shape} does not match "
                         f"weight columns {n_out}")
    out = xb @ wn.value + bn.value
    if squeezed:
        out = out[0]

    def bwd(g):
        gb = g[None] if squeezed else g
        gx = gb @ wn.value.T if xn.requires_grad else None
        if gx is not None and squeezed:
            gx = gx[0]
        gw = xb.T @ gb if wn.requires_grad else None
        gbias = gb.sum(axis=0) if bn.requires_grad else None
        return gx, gw, gbias

    return _op(out, (xn, wn, bn), bwd)


def relu(x: ArrayLike) -> Node:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    xn = as_node(x)
    out = np.maximum(xn.value, 0)

    def bwd(g):
        return (g * (xn.value > 0),)

    return _op(out, (xn,), bwd)


def softmax(x: ArrayLike) -> Node:
    """Softmax over the last axis, computed with max-subtraction."""
    xn = as_node(x)
    v = xn.value
    if v.shape[-1] < 2:
        raise ShapeError(f"softmax needs at least 2 logits, got shape {v.shape}")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _op(p, (xn,), bwd)


def sigmoid(x: ArrayLike) -> Node:
    """Elementwise logistic function, overflow-safe for large |x|."""
    xn = as_node(x)
    v = xn.value
    e = np.exp(-np.abs(v))
    p = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    p = p.astype(v.dtype, copy=False)

    def bwd(g):
        return (g * p * (1.0 - p),)

    return _op(p, (xn,), bwd)


# ---------------------------------------------------------------------------
# losses


def _check_one_hot(target: np.ndarray) -> None:
    ok = np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=-1) == 1)
    if not ok:
        raise ValueError("target must be one-hot (entries 0/1 summing to 1)")


def categorical_cross_entropy(predicted: ArrayLike, target: ArrayLike) -> Node:
    """-sum(t * log p) against a one-hot target; mean over a batch.

    Predictions must already sum to 1 (within 1e-6) along the last axis.
    Probabilities are clamped to [1e-12, 1] inside the log.
    """
    pn = as_node(predicted)
    t = np.asarray(target.value if isinstance(target, Node) else target)
    p = pn.value
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match "
                         f"target shape {t.shape}")
    _check_one_hot(t)
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("predicted values must sum to 1 along the last axis")
    rows = p.size // p.shape[-1]
    pc = np.clip(p, LOSS_CLAMP, 1.0)
    out = np.asarray(-(t * np.log(pc)).sum() / rows, dtype=p.dtype)

    def bwd(g):
        gp = np.where((p > LOSS_CLAMP) & (p < 1.0), -t / pc, 0.0) / rows
        return (g * gp.astype(p.dtype, copy=False),)

    return _op(out, (pn,), bwd)


def binary_cross_entropy(predicted: ArrayLike, target: ArrayLike) -> Node:
    """Mean over all neurons of -[t log p + (1-t) log(1-p)].

    Used with 2-neuron sigmoid heads, where each neuron carries its own
    probability.  Predictions are clamped to [1e-12, 1 - 1e-12].
    """
    pn = as_node(predicted)
    t = np.asarray(target.value if isinstance(target, Node) else target)
    p = pn.value
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match "
                         f"target shape {t.shape}")
    pc = np.clip(p, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    out = np.asarray(-(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean(),
                     dtype=p.dtype)

    def bwd(g):
        inside = (p > LOSS_CLAMP) & (p < 1.0 - LOSS_CLAMP)
        gp = np.where(inside, (pc - t) / (pc * (1.0 - pc)), 0.0) / p.size
        return (g * gp.astype(p.dtype, copy=False),)

    return _op(out, (pn,), bwd)
