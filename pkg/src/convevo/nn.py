"""Minimal dense-tensor CNN training core.

Layers operate on numpy arrays in (batch, channels, rows, cols) layout with
no padding (valid mode only), so every output spatial dimension is
``floor((in - k) / stride) + 1``. Precision is chosen per network at
construction: float32 for throughput during search runs, float64 for
gradient checking. All operations are deterministic for fixed inputs.

Each layer caches what its backward pass needs during forward; a network is
owned by exactly one evaluation at a time, so no locking is required.
"""

import numpy as np

from .errors import ShapeError


def _out_dim(size, k, stride):
    return (size - k) // stride + 1


class Layer:
    """Base class: parameter-free by default."""

    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._vel = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def output_shape(self, in_shape):
        """Shape of a single sample's output given its input shape."""
        raise NotImplementedError


def _kaiming_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d(Layer):
    """Valid-mode cross-correlation with per-output-channel bias."""

    def __init__(self, in_channels, out_channels, kernel, stride=1,
                 rng=None, dtype=np.float32):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ValueError(f"kernel and stride must be >= 1, got k={kernel} s={stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.dtype = np.dtype(dtype)
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.params["w"] = _kaiming_uniform(
            rng, (out_channels, in_channels, kernel, kernel), fan_in, self.dtype)
        self.params["b"] = np.zeros(out_channels, dtype=self.dtype)
        self._x = None

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv expects {self.in_channels} input channels, got {c}",
                dimension="channels")
        k, s = self.kernel, self.stride
        if h < k or w < k:
            raise ShapeError(
                f"conv kernel {k} exceeds input {h}x{w}",
                dimension="rows" if h < k else "cols")
        return (self.out_channels, _out_dim(h, k, s), _out_dim(w, k, s))

    def forward(self, x):
        n, c, h, w = x.shape
        _, oh, ow = self.output_shape((c, h, w))
        k, s = self.kernel, self.stride
        wgt = self.params["w"]
        acc = np.zeros((n, oh, ow, self.out_channels), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                sl = x[:, :, i:i + s * oh:s, j:j + s * ow:s]
                acc += np.tensordot(sl, wgt[:, :, i, j], axes=([1], [1]))
        self._x = x
        out = acc.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad_out):
        x = self._x
        n, c, h, w = x.shape
        k, s = self.kernel, self.stride
        oh, ow = grad_out.shape[2], grad_out.shape[3]
        expect = (n, self.out_channels, _out_dim(h, k, s), _out_dim(w, k, s))
        if grad_out.shape != expect:
            raise ShapeError(f"conv grad shape {grad_out.shape}, expected {expect}")
        wgt = self.params["w"]
        gt = grad_out.transpose(0, 2, 3, 1)  # (n, oh, ow, out)
        gw = np.zeros_like(wgt)
        gx = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                sl = x[:, :, i:i + s * oh:s, j:j + s * ow:s]
                gw[:, :, i, j] = np.tensordot(gt, sl, axes=([0, 1, 2], [0, 2, 3]))
                spread = np.tensordot(gt, wgt[:, :, i, j], axes=([3], [0]))
                gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += spread.transpose(0, 3, 1, 2)
        self.grads["w"] = gw
        self.grads["b"] = grad_out.sum(axis=(0, 2, 3))
        return gx


class MaxPool(Layer):
    """Max pooling; ties go to the first window element in row-major order."""

    def __init__(self, size, stride=None):
        super().__init__()
        if size < 1:
            raise ValueError(f"pool size must be >= 1, got {size}")
        self.size = size
        self.stride = stride if stride is not None else size
        self._arg = None
        self._in_shape = None

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ShapeError(
                f"pool window {self.size} exceeds input {h}x{w}",
                dimension="rows" if h < self.size else "cols")
        return (c, _out_dim(h, self.size, self.stride),
                _out_dim(w, self.size, self.stride))

    def forward(self, x):
        n, c, h, w = x.shape
        _, oh, ow = self.output_shape((c, h, w))
        k, s = self.size, self.stride
        windows = np.stack(
            [x[:, :, i:i + s * oh:s, j:j + s * ow:s]
             for i in range(k) for j in range(k)], axis=0)
        # argmax over axis 0 returns the first maximum: row-major tie rule
        self._arg = windows.argmax(axis=0)
        self._in_shape = x.shape
        return windows.max(axis=0)

    @property
    def argmax_indices(self):
        return self._arg

    def backward(self, grad_out):
        if self._arg is None or grad_out.shape != self._arg.shape:
            raise ShapeError(
                f"pool grad shape {grad_out.shape} does not match forward output")
        n, c, h, w = self._in_shape
        k, s = self.size, self.stride
        oh, ow = grad_out.shape[2], grad_out.shape[3]
        gx = np.zeros(self._in_shape, dtype=grad_out.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += grad_out * (self._arg == idx)
        return gx


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad_out):
        return grad_out * self._mask


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._shape = None

    def output_shape(self, in_shape):
        units = 1
        for d in in_shape:
            units *= d
        return (units,)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)


class Dense(Layer):
    """Affine layer: out = x @ W.T + b, W stored as (out_units, in_units)."""

    def __init__(self, in_units, out_units, rng=None, dtype=np.float32):
        super().__init__()
        self.in_units = in_units
        self.out_units = out_units
        self.dtype = np.dtype(dtype)
        rng = rng or np.random.default_rng(0)
        self.params["w"] = _kaiming_uniform(rng, (out_units, in_units), in_units, self.dtype)
        self.params["b"] = np.zeros(out_units, dtype=self.dtype)
        self._x = None

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_units:
            raise ShapeError(
                f"dense expects {self.in_units} input units, got {in_shape}",
                dimension="units")
        return (self.out_units,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_units:
            raise ShapeError(
                f"dense expects (n, {self.in_units}) input, got {x.shape}",
                dimension="units")
        self._x = x
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, grad_out):
        if grad_out.shape != (self._x.shape[0], self.out_units):
            raise ShapeError(
                f"dense grad shape {grad_out.shape}, expected "
                f"({self._x.shape[0]}, {self.out_units})")
        self.grads["w"] = grad_out.T @ self._x
        self.grads["b"] = grad_out.sum(axis=0)
        return grad_out @ self.params["w"]


class Network:
    """An ordered layer stack ending in a Dense classifier head."""

    def __init__(self, layers, input_shape=None, class_count=2):
        if not layers or not isinstance(layers[-1], Dense):
            raise ValueError("network must end in a Dense layer")
        if layers[-1].out_units != class_count:
            raise ValueError(
                f"final Dense has {layers[-1].out_units} units, "
                f"expected class_count={class_count}")
        self.layers = list(layers)
        self.input_shape = input_shape
        self.class_count = class_count

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params:
                return layer.params["w"].dtype
        return np.dtype(np.float32)

    def forward(self, x):
        if self.input_shape is not None and x.ndim == 4:
            if tuple(x.shape[1:]) != tuple(self.input_shape):
                raise ShapeError(
                    f"network expects input {tuple(self.input_shape)}, "
                    f"got {tuple(x.shape[1:])}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_logits):
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def parameters(self):
        """Yield (layer_index, name, array) for every parameter tensor."""
        for li, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield li, name, layer.params[name]


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Stabilized by max subtraction; gradient is (softmax - onehot) / batch.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype)


def sgd_step(network, lr, momentum=0.0):
    """Classical momentum update: v <- momentum*v - lr*g; w <- w + v."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    for layer in network.layers:
        for name, w in layer.params.items():
            g = layer.grads.get(name)
            if g is None:
                continue
            v = layer._vel.get(name)
            if v is None:
                v = np.zeros_like(w)
            v = momentum * v - lr * g
            layer._vel[name] = v
            layer.params[name] = w + v


def train_batch(network, batch, labels, lr, momentum=0.0):
    """One forward/backward/update step. Returns the pre-step loss."""
    logits = network.forward(batch)
    loss, grad = softmax_cross_entropy(logits, labels)
    network.backward(grad)
    sgd_step(network, lr, momentum)
    return loss


def grad_check(network, batch, labels, epsilon=1e-5):
    """Max relative error between analytic and central-difference gradients.

    Requires a float64 network; float32 round-off would swamp the check.
    """
    if network.dtype != np.float64:
        raise ValueError("grad_check requires a float64 network")

    def loss_at():
        logits = network.forward(batch)
        return softmax_cross_entropy(logits, labels)[0]

    logits = network.forward(batch)
    _, grad = softmax_cross_entropy(logits, labels)
    network.backward(grad)
    analytic = {(li, name): layer.grads[name].copy()
                for li, layer in enumerate(network.layers)
                for name in layer.params}

    worst = 0.0
    for li, name, w in network.parameters():
        flat = w.reshape(-1)
        ana = analytic[(li, name)].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            lp = loss_at()
            flat[idx] = orig - epsilon
            lm = loss_at()
            flat[idx] = orig
            cd = (lp - lm) / (2 * epsilon)
            denom = max(abs(ana[idx]), abs(cd), 1e-12)
            worst = max(worst, abs(ana[idx] - cd) / denom)
    return worst


def infer_shapes(layers, input_shape):
    """Per-layer output shapes for a single sample; raises ShapeError."""
    shape = tuple(input_shape)
    trace = []
    for idx, layer in enumerate(layers):
        try:
            shape = layer.output_shape(shape)
        except ShapeError as e:
            raise ShapeError(str(e), layer_index=idx, dimension=e.dimension) from None
        trace.append(shape)
    return trace
