"""Invertible layers and the flow density built from them.

Every layer maps base-side ``z`` to data-side ``x`` in :meth:`forward` and
back in :meth:`inverse`; both return the transformed batch and the per-row
log-absolute-determinant of that direction's Jacobian. A :class:`FlowStack`
evaluates densities by inverting its layers from the data side and adding
their inverse log-determinants to the standard-normal base log-density.
"""

from __future__ import annotations

import math
from typing import Any, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param
from .errors import ContractError, NumericError, ShapeError
from .nn import MLP

LOG_2PI = math.log(2.0 * math.pi)


def base_log_prob(z) -> Node:
    """Standard-normal log-density per row of ``z``."""
    z = ad.as_node(z)
    if z.value.ndim != 2:
        raise ShapeError("base_log_prob", z.shape, detail="expected [batch, D]")
    d = z.shape[1]
    return -0.5 * ad.sum(z * z, axis=1) - 0.5 * d * LOG_2PI


def _check_finite(layer: "FlowLayer", *nodes: Node) -> None:
    for n in nodes:
        if not np.all(np.isfinite(n.value)):
            raise NumericError(f"non-finite value in {type(layer).__name__} '{layer.name}'")


class FlowLayer:
    """Base class: subclasses implement ``_forward`` and ``_inverse``."""

    dim: int
    name: str
    training: bool = True

    @property
    def params(self) -> list[Param]:
        return []

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that must survive a checkpoint round-trip."""
        return {}

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        pass

    def _validate(self, x: Node, op: str) -> Node:
        x = ad.as_node(x)
        if x.value.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"{self.name}.{op}", x.shape, detail=f"expected [batch, {self.dim}]")
        return x

    def forward(self, z) -> tuple[Node, Node]:
        z = self._validate(z, "forward")
        x, logdet = self._forward(z)
        _check_finite(self, x, logdet)
        return x, logdet

    def inverse(self, x) -> tuple[Node, Node]:
        x = self._validate(x, "inverse")
        z, logdet = self._inverse(x)
        _check_finite(self, z, logdet)
        return z, logdet

    def _forward(self, z: Node) -> tuple[Node, Node]:
        raise NotImplementedError

    def _inverse(self, x: Node) -> tuple[Node, Node]:
        raise NotImplementedError


def _per_row(value: Node, batch: int) -> Node:
    return ad.broadcast_to(value, (batch,))


class PLULayer(FlowLayer):
    """Affine map ``x = A z + b`` with ``A = P L (U + diag(s))``.

    P is a fixed permutation; L is unit lower-triangular, U strictly upper,
    and ``s = sign * exp(log_scale)`` with the signs fixed at construction.
    """

    def __init__(self, dim: int, rng: np.random.Generator | None = None, name: str = "plu",
                 perm: Sequence[int] | None = None):
        self.dim = dim
        self.name = name
        if perm is None:
            perm = rng.permutation(dim) if rng is not None else np.arange(dim)
        self.perm = np.asarray(perm, dtype=np.intp)
        if sorted(self.perm.tolist()) != list(range(dim)):
            raise ContractError(f"{name}: perm is not a permutation of 0..{dim - 1}")
        self.lower = Param(np.zeros((dim, dim)), f"{name}.lower")
        self.upper = Param(np.zeros((dim, dim)), f"{name}.upper")
        self.log_scale = Param(np.zeros(dim), f"{name}.log_scale")
        self.bias = Param(np.zeros(dim), f"{name}.bias")
        self.sign = np.ones(dim)
        self._strict_lower = np.tril(np.ones((dim, dim)), -1)
        self._strict_upper = np.triu(np.ones((dim, dim)), 1)

    @classmethod
    def from_factors(cls, perm, lower, upper, s, bias, name: str = "plu") -> "PLULayer":
        s = np.asarray(s, dtype=np.float64)
        if np.any(s == 0):
            raise ContractError(f"{name}: every entry of s must be nonzero")
        layer = cls(len(s), name=name, perm=perm)
        layer.lower.value[...] = np.tril(lower, -1)
        layer.upper.value[...] = np.triu(upper, 1)
        layer.log_scale.value[...] = np.log(np.abs(s))
        layer.sign = np.sign(s)
        layer.bias.value[...] = bias
        return layer

    @property
    def params(self) -> list[Param]:
        return [self.lower, self.upper, self.log_scale, self.bias]

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.perm": self.perm.astype(np.float64), f"{self.name}.sign": self.sign}

    def load_buffers(self, arrays):
        self.perm = np.asarray(arrays[f"{self.name}.perm"]).astype(np.intp)
        self.sign = np.array(arrays[f"{self.name}.sign"])

    def _perm_matrix(self) -> np.ndarray:
        return np.eye(self.dim)[self.perm]

    def _factors(self) -> tuple[Node, Node]:
        eye = np.eye(self.dim)
        lower = self.lower * self._strict_lower + eye
        s = ad.exp(self.log_scale) * self.sign
        upper = self.upper * self._strict_upper + eye * ad.reshape(s, (1, self.dim))
        return lower, upper

    def matrix(self) -> np.ndarray:
        lower, upper = self._factors()
        return self._perm_matrix() @ lower.value @ upper.value

    def _logdet(self, batch: int) -> Node:
        return _per_row(ad.sum(self.log_scale), batch)

    def _forward(self, z):
        lower, upper = self._factors()
        a = ad.matmul(self._perm_matrix(), ad.matmul(lower, upper))
        return z @ a.T + self.bias, self._logdet(z.shape[0])

    def _inverse(self, x):
        lower, upper = self._factors()
        y = ad.matmul(self._perm_matrix().T, (x - self.bias).T)
        y = ad.solve_triangular(lower, y, lower=True, unit_diagonal=True)
        y = ad.solve_triangular(upper, y, lower=False)
        return y.T, -self._logdet(x.shape[0])


class PReLULayer(FlowLayer):
    """Elementwise ``z if z >= 0 else alpha * z`` with ``alpha = exp(a)`` > 0."""

    def __init__(self, dim: int, name: str = "prelu", alpha: float = 1.0):
        if not alpha > 0:
            raise ContractError(f"{name}: alpha must be positive")
        self.dim = dim
        self.name = name
        self.log_alpha = Param(np.array([math.log(alpha)]), f"{name}.log_alpha")

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value[0]))

    @property
    def params(self):
        return [self.log_alpha]

    def _apply(self, v: Node, sign: float) -> tuple[Node, Node]:
        neg = (v.value < 0).astype(np.float64)
        factor = ad.exp(self.log_alpha * sign) * neg + (1.0 - neg)
        logdet = ad.sum(neg * self.log_alpha, axis=1) * sign
        return v * factor, logdet

    def _forward(self, z):
        return self._apply(z, 1.0)

    def _inverse(self, x):
        # alpha > 0 keeps signs, so x < 0 exactly where z < 0
        return self._apply(x, -1.0)


class BatchNormLayer(FlowLayer):
    """Batch normalization as an invertible layer.

    The normalizing direction faces the data: :meth:`inverse` maps
    ``x -> (x - mean) / sqrt(var + eps)`` with batch statistics in training
    mode (updating running averages) and running statistics in eval mode.
    :meth:`forward` undoes it with the running statistics.
    """

    def __init__(self, dim: int, name: str = "batchnorm", eps: float = 1e-5,
                 momentum: float = 0.1):
        self.dim = dim
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.training = True

    @property
    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def load_buffers(self, arrays):
        self.running_mean = np.array(arrays[f"{self.name}.running_mean"])
        self.running_var = np.array(arrays[f"{self.name}.running_var"])

    def _forward(self, z):
        log_var = np.log(self.running_var + self.eps)
        x = z * np.exp(0.5 * log_var) + self.running_mean
        return x, _per_row(ad.as_node(0.5 * log_var.sum()), z.shape[0])

    def _inverse(self, x):
        if self.training:
            if x.shape[0] < 2:
                raise ContractError(f"{self.name}: training-mode batch needs >= 2 rows")
            mu = ad.mean(x, axis=0, keepdims=True)
            centered = x - mu
            var = ad.mean(centered * centered, axis=0, keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.value[0]
            self.running_var = (1 - m) * self.running_var + m * var.value[0]
            log_var = ad.log(var + self.eps)
            z = centered * ad.exp(-0.5 * log_var)
            return z, _per_row(-0.5 * ad.sum(log_var), x.shape[0])
        log_var = np.log(self.running_var + self.eps)
        z = (x - self.running_mean) * np.exp(-0.5 * log_var)
        return z, _per_row(ad.as_node(-0.5 * log_var.sum()), x.shape[0])


class CouplingLayer(FlowLayer):
    """Affine coupling: dims with mask 1 condition, dims with mask 0 are transformed.

    ``x_t = z_t * exp(s(z_c)) + t(z_c)`` where the log-scale is bounded as
    ``s = exp(log_gain) * tanh(s_net(z_c))``. Both networks start at zero,
    so a fresh layer is the identity.
    """

    def __init__(self, dim: int, mask: Sequence[int], hidden: Sequence[int],
                 rng: np.random.Generator, name: str = "coupling"):
        mask = np.asarray(mask, dtype=np.intp)
        if dim < 2:
            raise ContractError(f"{name}: coupling needs D >= 2")
        if mask.shape != (dim,) or mask.min() == mask.max():
            raise ContractError(f"{name}: mask must be length {dim} with both 0s and 1s")
        self.dim = dim
        self.name = name
        self.mask = mask
        self.cond = np.flatnonzero(mask == 1)
        self.trans = np.flatnonzero(mask == 0)
        self._unsort = np.argsort(np.concatenate([self.cond, self.trans]))
        widths = [len(self.cond), *hidden, len(self.trans)]
        self.s_net = MLP(widths, rng, name=f"{name}.s_net", zero_last=True)
        self.t_net = MLP(widths, rng, name=f"{name}.t_net", zero_last=True)
        self.log_gain = Param(np.zeros(len(self.trans)), f"{name}.log_gain")

    @property
    def params(self):
        return self.s_net.params + self.t_net.params + [self.log_gain]

    def _scale_shift(self, cond: Node) -> tuple[Node, Node]:
        s = ad.exp(self.log_gain) * ad.tanh(self.s_net(cond))
        return s, self.t_net(cond)

    def _merge(self, cond: Node, trans: Node) -> Node:
        return ad.take(ad.concat([cond, trans], axis=1), self._unsort, axis=1)

    def _forward(self, z):
        zc, zt = ad.take(z, self.cond, axis=1), ad.take(z, self.trans, axis=1)
        s, t = self._scale_shift(zc)
        return self._merge(zc, zt * ad.exp(s) + t), ad.sum(s, axis=1)

    def _inverse(self, x):
        xc, xt = ad.take(x, self.cond, axis=1), ad.take(x, self.trans, axis=1)
        s, t = self._scale_shift(xc)
        return self._merge(xc, (xt - t) * ad.exp(-s)), -ad.sum(s, axis=1)


def build_made_masks(widths: Sequence[int], dim: int, order: Sequence[int] | None = None
                     ) -> list[np.ndarray]:
    """Connectivity masks for a MADE network with ``widths[-1]`` a multiple of ``dim``.

    ``order`` lists the dimensions in autoregressive order. Output column ``c``
    belongs to dimension ``c % dim`` and sees only inputs strictly earlier in
    the order.
    """
    widths = [int(w) for w in widths]
    if dim < 1:
        raise ContractError("MADE needs at least one dimension")
    if widths[0] != dim or widths[-1] % dim != 0:
        raise ShapeError("build_made_masks", tuple(widths), detail=f"D={dim}")
    order = np.arange(dim) if order is None else np.asarray(order, dtype=np.intp)
    if sorted(order.tolist()) != list(range(dim)):
        raise ContractError("order must be a permutation of 0..D-1")
    deg_in = np.empty(dim, dtype=np.intp)
    deg_in[order] = np.arange(1, dim + 1)
    cycle = max(dim - 1, 1)
    masks = []
    prev = deg_in
    for w in widths[1:-1]:
        deg = np.arange(w) % cycle + 1
        masks.append((deg[None, :] >= prev[:, None]).astype(np.float64))
        prev = deg
    deg_out = np.tile(deg_in, widths[-1] // dim)
    masks.append((deg_out[None, :] > prev[:, None]).astype(np.float64))
    return masks


def build_alternating_masks(dim: int, n_layers: int) -> list[np.ndarray]:
    """Layer ``l`` marks even indices when ``l`` is even and odd indices otherwise."""
    if dim < 2:
        raise ContractError("alternating masks need D >= 2")
    idx = np.arange(dim)
    return [(idx % 2 == layer % 2).astype(np.intp) for layer in range(n_layers)]


class MAFLayer(FlowLayer):
    """Masked autoregressive affine layer: ``x_i = z_i * exp(alpha_i) + mu_i``.

    ``(mu_i, alpha_i)`` come from a MADE network over the earlier
    data-side coordinates, so the density direction is a single pass and
    sampling needs one pass per dimension.
    """

    def __init__(self, dim: int, hidden: Sequence[int], rng: np.random.Generator,
                 order: Sequence[int] | None = None, name: str = "maf"):
        self.dim = dim
        self.name = name
        self.order = np.arange(dim) if order is None else np.asarray(order, dtype=np.intp)
        widths = [dim, *hidden, 2 * dim]
        self.made = MLP(widths, rng, name=f"{name}.made", zero_last=True,
                        masks=build_made_masks(widths, dim, self.order))

    @property
    def params(self):
        return self.made.params

    def shift_log_scale(self, x) -> tuple[Node, Node]:
        out = self.made(x)
        d = self.dim
        return ad.take(out, np.arange(d), axis=1), ad.take(out, np.arange(d, 2 * d), axis=1)

    def _forward(self, z):
        x = ad.as_node(np.zeros(z.shape))
        for _ in range(self.dim):
            mu, alpha = self.shift_log_scale(x)
            x = z * ad.exp(alpha) + mu
        return x, ad.sum(alpha, axis=1)

    def _inverse(self, x):
        mu, alpha = self.shift_log_scale(x)
        return (x - mu) * ad.exp(-alpha), -ad.sum(alpha, axis=1)


def layer_forward(layer: FlowLayer, z) -> tuple[Node, Node]:
    return layer.forward(z)


def layer_inverse(layer: FlowLayer, x) -> tuple[Node, Node]:
    return layer.inverse(x)


class FlowStack:
    """Layers ``h_0 .. h_{L-1}`` over a standard-normal base in R^D."""

    def __init__(self, layers: Iterable[FlowLayer], dim: int):
        self.layers = list(layers)
        self.dim = dim
        for layer in self.layers:
            if layer.dim != dim:
                raise ContractError(f"layer {layer.name} has D={layer.dim}, stack has D={dim}")

    @property
    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers)
        return out

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            layer.load_buffers(arrays)

    def train(self, mode: bool = True) -> "FlowStack":
        for layer in self.layers:
            layer.training = mode
        return self

    def eval(self) -> "FlowStack":
        return self.train(False)

    def forward(self, z) -> tuple[Node, Node]:
        x = ad.as_node(z)
        total = ad.as_node(np.zeros(x.shape[0]))
        for i, layer in enumerate(self.layers):
            try:
                x, logdet = layer.forward(x)
            except NumericError as err:
                raise err.locate(layer=i)
            total = total + logdet
        return x, total

    def inverse(self, x) -> tuple[Node, Node]:
        z = ad.as_node(x)
        total = ad.as_node(np.zeros(z.shape[0]))
        for i in reversed(range(len(self.layers))):
            try:
                z, logdet = self.layers[i].inverse(z)
            except NumericError as err:
                raise err.locate(layer=i)
            total = total + logdet
        return z, total

    def log_prob(self, x) -> Node:
        x = ad.as_node(x)
        if x.value.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError("flow_log_prob", x.shape, detail=f"expected [batch, {self.dim}]")
        z, logdet = self.inverse(x)
        return base_log_prob(z) + logdet

    def sample(self, n: int, seed: int | np.random.Generator | None = None) -> np.ndarray:
        if n < 0:
            raise ContractError("sample count must be non-negative")
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.dim))
        with ad.no_grad():
            x, _ = self.forward(z)
        return x.value


def flow_log_prob(stack: FlowStack, x) -> Node:
    return stack.log_prob(x)


def flow_sample(stack: FlowStack, n: int, seed=None) -> np.ndarray:
    return stack.sample(n, seed)


def build_stack(layer_specs: Sequence[dict[str, Any]], dim: int, rng: np.random.Generator,
                name: str = "flow") -> FlowStack:
    """Expand config blocks such as ``{"type": "coupling", "hidden": [8], "repeat": 8}``.

    Coupling masks alternate with the running count of coupling layers and MAF
    orderings alternate between natural and reversed.
    """
    layers: list[FlowLayer] = []
    n_coupling = n_maf = 0
    for spec in layer_specs:
        spec = dict(spec)
        kind = spec.pop("type")
        repeat = int(spec.pop("repeat", 1))
        for _ in range(repeat):
            lname = f"{name}.layer{len(layers)}"
            if kind == "coupling":
                mask = build_alternating_masks(dim, n_coupling + 1)[-1]
                layers.append(CouplingLayer(dim, mask, spec.get("hidden", [8]), rng, lname))
                n_coupling += 1
            elif kind == "maf":
                order = np.arange(dim) if n_maf % 2 == 0 else np.arange(dim)[::-1]
                layers.append(MAFLayer(dim, spec.get("hidden", [dim]), rng, order, lname))
                n_maf += 1
            elif kind == "plu":
                layers.append(PLULayer(dim, rng, lname))
            elif kind == "prelu":
                layers.append(PReLULayer(dim, lname, alpha=spec.get("alpha", 1.0)))
            elif kind == "batchnorm":
                layers.append(BatchNormLayer(dim, lname, eps=spec.get("eps", 1e-5),
                                             momentum=spec.get("momentum", 0.1)))
            else:
                raise ContractError(f"unknown flow layer type {kind!r}")
    return FlowStack(layers, dim)
