"""Minimal layer zoo and the network container.

Layers own their parameters as plain numpy arrays and fill ``self.grads``
during backward.  A gated convolution in ``frozen_sharp`` mode runs the
exact same code path as a plain convolution (shared helpers below), so a
frozen network reproduces a standard-conv training trajectory bitwise.
"""

from __future__ import annotations

import numpy as np

from .cac import (
    CacConvParams,
    cac_backward,
    cac_forward_hard,
    cac_forward_soft,
)
from .cost import LayerCostSpec
from .errors import InvalidArgument
from .tensor import (
    DEFAULT_DTYPE,
    col2im_batch,
    im2col_batch,
    kernel_matrix,
    require,
)


def _dense_forward(x, weight, bias):
    """Same-padding convolution via im2col; returns (y, cols) so backward
    can reuse the column matrix."""
    k = weight.shape[0]
    n_batch, _, n, _ = x.shape
    cols = im2col_batch(x, k)
    y = cols.T @ kernel_matrix(weight)
    if bias is not None:
        y = y + bias[None, :]
    out = np.ascontiguousarray(
        y.reshape(n_batch, n, n, weight.shape[3]).transpose(0, 3, 1, 2)
    )
    return out, cols


def _dense_backward(cols, weight, dy, has_bias):
    k, _, c_in, c_out = weight.shape
    n_batch, _, n, _ = dy.shape
    dyf = dy.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dw = np.ascontiguousarray(
        (cols @ dyf).reshape(c_in, k, k, c_out).transpose(1, 2, 0, 3)
    )
    db = dyf.sum(axis=0) if has_bias else None
    dx = col2im_batch(kernel_matrix(weight) @ dyf.T, n_batch, c_in, n, k)
    return dx, dw, db


def kaiming_normal(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Layer:
    """Base class: parameters live in ``params()``, gradients in ``grads``."""

    name = ""

    def __init__(self):
        self.grads = {}

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def no_decay(self) -> set:
        return set()

    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grads(self):
        self.grads = {}

    def astype(self, dtype):
        return self


class Conv2d(Layer):
    def __init__(self, c_in, c_out, k, *, bias=True, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        require(k % 2 == 1, f"kernel size must be odd, got {k}")
        self.k = k
        self.c_in = c_in
        self.c_out = c_out
        self.weight = kaiming_normal(rng, (k, k, c_in, c_out), c_in * k * k, dtype)
        self.bias = np.zeros(c_out, dtype=dtype) if bias else None
        self._cols = None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, train):
        y, cols = _dense_forward(x, self.weight, self.bias)
        self._cols = cols if train else None
        return y

    def backward(self, dy):
        dx, dw, db = _dense_backward(self._cols, self.weight, dy, self.bias is not None)
        self.grads = {"weight": dw}
        if db is not None:
            self.grads["bias"] = db
        return dx

    def astype(self, dtype):
        self.weight = self.weight.astype(dtype)
        if self.bias is not None:
            self.bias = self.bias.astype(dtype)
        return self


class CacConv2d(Layer):
    """Gated convolution: full kernel on sharp windows, aggregated 1 x 1
    kernel on smooth ones.

    Training uses the differentiable soft blend; eval uses hard routing.
    ``frozen_sharp`` bypasses the gate entirely and behaves as Conv2d
    (the equivalence mode used to reproduce plain-conv baselines).
    """

    def __init__(
        self, c_in, c_out, k, *, bias=True, pbar_mode="center",
        frozen_sharp=False, rng, dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        require(k % 2 == 1 and k >= 3, f"gated conv needs odd k >= 3, got {k}")
        self.k = k
        self.c_in = c_in
        self.c_out = c_out
        self.pbar_mode = pbar_mode
        self.frozen_sharp = frozen_sharp
        # Same draw order and shapes as Conv2d so seeds align across the
        # gated net and its plain baseline.
        self.weight = kaiming_normal(rng, (k, k, c_in, c_out), c_in * k * k, dtype)
        self.bias = np.zeros(c_out, dtype=dtype) if bias else None
        self.gate_gamma = np.ones(1, dtype=np.float64)
        self.gate_beta = np.zeros(1, dtype=np.float64)
        self._cache = None
        self._cols = None
        self.last_partitions = None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        if not self.frozen_sharp:
            p["gate_gamma"] = self.gate_gamma
            p["gate_beta"] = self.gate_beta
        return p

    def no_decay(self):
        return {"gate_gamma", "gate_beta"}

    def conv_params(self) -> CacConvParams:
        return CacConvParams(
            weight=self.weight,
            gamma=float(self.gate_gamma[0]),
            beta=float(self.gate_beta[0]),
            bias=self.bias,
            pbar_mode=self.pbar_mode,
        )

    def forward(self, x, train):
        if self.frozen_sharp:
            y, cols = _dense_forward(x, self.weight, self.bias)
            self._cols = cols if train else None
            self.last_partitions = None
            return y
        if train:
            y, parts, cache = cac_forward_soft(x, self.conv_params())
            self._cache = cache
        else:
            y, parts = cac_forward_hard(x, self.conv_params())
            self._cache = None
        self.last_partitions = parts
        return y

    def backward(self, dy, extra_score_grad=None):
        if self.frozen_sharp:
            dx, dw, db = _dense_backward(self._cols, self.weight, dy, self.bias is not None)
            self.grads = {"weight": dw}
            if db is not None:
                self.grads["bias"] = db
            return dx
        g = cac_backward(self._cache, dy, extra_score_grad)
        self.grads = {
            "weight": g.dweight,
            "gate_gamma": np.array([g.dgamma]),
            "gate_beta": np.array([g.dbeta]),
        }
        if g.dbias is not None:
            self.grads["bias"] = g.dbias
        return g.dx

    def rho_soft(self) -> float:
        require(self.last_partitions is not None, "no gated forward recorded")
        return float(np.mean([p.rho_soft for p in self.last_partitions]))

    def rho_hard(self) -> float:
        require(self.last_partitions is not None, "no gated forward recorded")
        return float(np.mean([p.rho_hard for p in self.last_partitions]))

    def astype(self, dtype):
        self.weight = self.weight.astype(dtype)
        if self.bias is not None:
            self.bias = self.bias.astype(dtype)
        return self


class BatchNorm2d(Layer):
    def __init__(self, c, *, eps=1e-5, momentum=0.1, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.c = c
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(c, dtype=dtype)
        self.beta = np.zeros(c, dtype=dtype)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train):
        require(x.ndim == 4 and x.shape[1] == self.c,
                f"expected (N, {self.c}, H, W), got {x.shape}")
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        if train:
            self._cache = (xhat, inv_std)
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def backward(self, dy):
        xhat, inv_std = self._cache
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        self.grads = {
            "gamma": (dy * xhat).sum(axis=(0, 2, 3)),
            "beta": dy.sum(axis=(0, 2, 3)),
        }
        dxhat = dy * self.gamma[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)

    def astype(self, dtype):
        self.gamma = self.gamma.astype(dtype)
        self.beta = self.beta.astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self


class ReLU(Layer):
    def forward(self, x, train):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        self.grads = {}
        return dy * self._mask


class AvgPool2d(Layer):
    def __init__(self, k=2):
        super().__init__()
        self.k = k

    def forward(self, x, train):
        k = self.k
        n, c, h, w = x.shape
        require(h % k == 0 and w % k == 0,
                f"spatial dims {h}x{w} not divisible by pool size {k}")
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, dy):
        k = self.k
        self.grads = {}
        return np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)


class GlobalAvgPool(Layer):
    def forward(self, x, train):
        self._hw = x.shape[2] * x.shape[3]
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        self.grads = {}
        n, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None] / self._hw, self._shape).astype(dy.dtype)


class Linear(Layer):
    def __init__(self, n_in, n_out, *, bias=True, rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.n_in = n_in
        self.n_out = n_out
        self.weight = kaiming_normal(rng, (n_in, n_out), n_in, dtype)
        self.bias = np.zeros(n_out, dtype=dtype) if bias else None
        self._x = None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, train):
        require(x.ndim == 2 and x.shape[1] == self.n_in,
                f"expected (N, {self.n_in}), got {x.shape}")
        if train:
            self._x = x
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias[None, :]
        return y

    def backward(self, dy):
        self.grads = {"weight": self._x.T @ dy}
        if self.bias is not None:
            self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.weight.T

    def astype(self, dtype):
        self.weight = self.weight.astype(dtype)
        if self.bias is not None:
            self.bias = self.bias.astype(dtype)
        return self


class SoftmaxCrossEntropy:
    """Classification head: mean cross-entropy over the batch."""

    def loss(self, logits, labels):
        require(logits.ndim == 2, f"expected (N, classes) logits, got {logits.shape}")
        require(labels.shape == (logits.shape[0],), "labels must be (N,)")
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        ell = float(-logp[np.arange(len(labels)), labels].mean())
        return ell, np.exp(logp)

    def grad(self, probs, labels):
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return d / len(labels)


_POOLED = object()


class Network:
    """Ordered layer stack with a softmax cross-entropy head.

    Built from a plain dict spec: {"input": {"channels", "size"},
    "num_classes", "layers": [{"type": ...}, ...]} where layer types are
    conv, cac_conv, batchnorm, relu, avgpool, global_avgpool, linear,
    and an optional trailing softmax_ce marker.
    """

    def __init__(self, layers, head, spec, input_shape, layer_meta):
        self.layers = layers
        self.head = head
        self.spec = spec
        self.input_shape = input_shape
        self._meta = layer_meta  # name -> dict(n=..., kind=...)
        self.dtype = DEFAULT_DTYPE

    @staticmethod
    def build(spec: dict, *, rng, dtype=DEFAULT_DTYPE, frozen_gates=False) -> "Network":
        require(isinstance(spec, dict), "model spec must be a mapping")
        for key in ("input", "num_classes", "layers"):
            require(key in spec, f"model spec missing '{key}'")
        c = int(spec["input"]["channels"])
        size = int(spec["input"]["size"])
        require(c >= 1 and size >= 1, "input shape must be positive")
        num_classes = int(spec["num_classes"])
        layers = []
        meta = {}
        shape = (c, size)  # (channels, spatial side); spatial None once pooled
        for idx, desc in enumerate(spec["layers"]):
            kind = desc.get("type")
            name = f"{idx:02d}_{kind}"
            try:
                layer, shape = Network._build_layer(
                    desc, kind, shape, rng, dtype, frozen_gates, meta, name
                )
            except InvalidArgument as exc:
                raise InvalidArgument(f"layer {idx} ({kind}): {exc}") from None
            if layer is None:
                continue
            layer.name = name
            layers.append(layer)
        require(shape[1] is _POOLED, "model must end in a classification vector")
        require(
            shape[0] == num_classes,
            f"final feature width {shape[0]} != num_classes {num_classes}",
        )
        net = Network(layers, SoftmaxCrossEntropy(), spec, (c, size, size), meta)
        net.dtype = dtype
        return net

    @staticmethod
    def _build_layer(desc, kind, shape, rng, dtype, frozen_gates, meta, name):
        ch, sp = shape
        if kind == "conv" or kind == "cac_conv":
            require(sp is not _POOLED, "convolution after pooling to a vector")
            out = int(desc["out"])
            k = int(desc.get("k", 3))
            bias = bool(desc.get("bias", True))
            require(sp >= k, f"spatial side {sp} smaller than kernel {k}")
            if kind == "cac_conv":
                layer = CacConv2d(
                    ch, out, k, bias=bias,
                    pbar_mode=desc.get("pbar_mode", "center"),
                    frozen_sharp=frozen_gates, rng=rng, dtype=dtype,
                )
                meta[name] = {"kind": "cac_conv", "n": sp, "k": k, "c_in": ch, "c_out": out}
            else:
                layer = Conv2d(ch, out, k, bias=bias, rng=rng, dtype=dtype)
                meta[name] = {"kind": "conv", "n": sp, "k": k, "c_in": ch, "c_out": out}
            return layer, (out, sp)
        if kind == "batchnorm":
            require(sp is not _POOLED, "batchnorm expects feature maps")
            return BatchNorm2d(ch, dtype=dtype), shape
        if kind == "relu":
            return ReLU(), shape
        if kind == "avgpool":
            require(sp is not _POOLED, "avgpool expects feature maps")
            k = int(desc.get("k", 2))
            require(sp % k == 0, f"spatial side {sp} not divisible by pool {k}")
            return AvgPool2d(k), (ch, sp // k)
        if kind == "global_avgpool":
            require(sp is not _POOLED, "global_avgpool expects feature maps")
            return GlobalAvgPool(), (ch, _POOLED)
        if kind == "linear":
            require(sp is _POOLED, "linear head expects pooled features")
            out = int(desc["out"])
            layer = Linear(ch, out, bias=bool(desc.get("bias", True)), rng=rng, dtype=dtype)
            meta[name] = {"kind": "linear", "n": 1, "k": 1, "c_in": ch, "c_out": out}
            return layer, (out, _POOLED)
        if kind == "softmax_ce":
            return None, shape
        raise InvalidArgument(f"unknown layer type {kind!r}")

    def forward(self, x, train: bool):
        require(
            x.ndim == 4 and x.shape[1:] == self.input_shape,
            f"input shape {x.shape[1:]} != model input {self.input_shape}",
        )
        self._outputs = []
        for layer in self.layers:
            x = layer.forward(x, train)
            self._outputs.append((layer.name, x))
        return x

    def first_nonfinite_layer(self):
        for name, out in getattr(self, "_outputs", []):
            if not np.isfinite(out).all():
                return name
        return None

    def backward(self, dlogits, score_extras=None):
        d = dlogits
        for layer in reversed(self.layers):
            if isinstance(layer, CacConv2d) and not layer.frozen_sharp:
                extra = None if score_extras is None else score_extras.get(layer.name)
                d = layer.backward(d, extra)
            else:
                d = layer.backward(d)
        return d

    def cac_layers(self):
        return [
            (l.name, l) for l in self.layers
            if isinstance(l, CacConv2d) and not l.frozen_sharp
        ]

    def cost_specs(self):
        """Costed layers (convolutions and the linear head) in order."""
        specs = []
        for layer in self.layers:
            m = self._meta.get(layer.name)
            if m is None:
                continue
            cac = m["kind"] == "cac_conv" and not getattr(layer, "frozen_sharp", False)
            specs.append(
                LayerCostSpec(
                    layer_id=layer.name, n=m["n"], k=m["k"],
                    c_in=m["c_in"], c_out=m["c_out"], cac=cac,
                )
            )
        return specs

    def named_params(self):
        """(full_name, layer, param_name, array) for every trainable tensor."""
        out = []
        for layer in self.layers:
            for pname, arr in layer.params().items():
                out.append((f"{layer.name}.{pname}", layer, pname, arr))
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def state_dict(self):
        state = {}
        for layer in self.layers:
            for pname, arr in layer.params().items():
                state[f"{layer.name}.{pname}"] = arr
            for bname, arr in layer.buffers().items():
                state[f"{layer.name}.{bname}"] = arr
        return state

    def load_state_dict(self, state: dict):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        require(not missing, f"checkpoint missing tensors: {missing}")
        require(not unexpected, f"checkpoint has unexpected tensors: {unexpected}")
        for key, arr in own.items():
            src = state[key]
            require(
                tuple(src.shape) == tuple(arr.shape),
                f"{key}: checkpoint shape {src.shape} != model shape {arr.shape}",
            )
            arr[...] = src.astype(arr.dtype)

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        self.dtype = dtype
        return self
