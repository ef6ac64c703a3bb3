"""Backbone assembly, cross-domain branch sharing, and fine-tune transfer.

The backbone is fully convolutional: a multi-scale bank of 1x1/3x3/5x5
convolutions over the input patch, a 1x1 reduction (c2), a chain of residual
modules (two 1x1 convolutions each, additive skip), two dropout-guarded 1x1
layers (c7, c8) and a 1x1 classifier head (c9). Batch norm + ReLU follow
every convolution except c9. Per-pixel logits are read at the patch center.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError

# std of the Gaussian init, per layer group
INIT_STD_FRONT_HEAD = 0.01   # bank, c2, c9
INIT_STD_MIDDLE = 0.005      # residual modules, c7, c8


@dataclass
class NetworkSpec:
    """Declarative backbone description."""

    bands: int
    classes: int
    patch: int = 5
    filters: int = 128
    residual_modules: int = 2
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.bands < 1:
            raise ConfigError(f"bands must be positive, got {self.bands}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.patch < 1 or self.patch % 2 == 0:
            raise ConfigError(f"patch must be odd and >= 1, got {self.patch}")
        if self.filters < 1:
            raise ConfigError(f"filters must be positive, got {self.filters}")
        if self.residual_modules < 2:
            raise ConfigError(
                f"residual_modules must be >= 2, got {self.residual_modules}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self):
        return {
            "bands": self.bands,
            "classes": self.classes,
            "patch": self.patch,
            "filters": self.filters,
            "residual_modules": self.residual_modules,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CrossDomainSpec:
    """One NetworkSpec per branch; trunk shapes must agree across branches."""

    branches: list

    def __post_init__(self):
        if not self.branches:
            raise ConfigError("cross-domain spec needs at least one branch")
        first = self.branches[0]
        for i, sp in enumerate(self.branches[1:], start=1):
            for attr in ("filters", "patch", "residual_modules"):
                if getattr(sp, attr) != getattr(first, attr):
                    raise ConfigError(
                        f"branch {i} disagrees on {attr}: "
                        f"{getattr(sp, attr)} vs {getattr(first, attr)}"
                    )

    def to_dict(self):
        return {"branches": [sp.to_dict() for sp in self.branches]}

    @classmethod
    def from_dict(cls, d):
        return cls(branches=[NetworkSpec.from_dict(b) for b in d["branches"]])


class ConvBlock:
    """Convolution optionally followed by batch norm and ReLU."""

    def __init__(self, name, in_c, out_c, k, dtype=np.float32, with_bn=True, with_relu=True):
        self.name = name
        self.with_bn = with_bn
        self.with_relu = with_relu
        self.conv = ops.make_conv_params(name, in_c, out_c, k, dtype)
        self.bn = ops.make_batchnorm_params(f"{name}.bn", out_c, dtype) if with_bn else None
        self._x = None
        self._conv_out = None
        self._pre_relu = None

    def forward(self, x, training):
        self._x = x
        y = ops.conv2d_forward(x, self.conv)
        if self.with_bn:
            self._conv_out = y
            y = ops.batchnorm_forward(y, self.bn, training)
        if self.with_relu:
            self._pre_relu = y
            y = ops.relu(y)
        return y

    def backward(self, grad_out):
        g = grad_out
        if self.with_relu:
            g = ops.relu_backward(self._pre_relu, g)
        if self.with_bn:
            g, g_scale, g_shift = ops.batchnorm_backward(self._conv_out, self.bn, g)
            self.bn.scale.grad = g_scale
            self.bn.shift.grad = g_shift
        gx, gw, gb = ops.conv2d_backward(self._x, self.conv, g)
        self.conv.w.grad = gw
        self.conv.b.grad = gb
        return gx

    def params(self):
        out = [self.conv.w, self.conv.b]
        if self.with_bn:
            out += [self.bn.scale, self.bn.shift]
        return out

    def state(self):
        """(name, array) pairs for every persistent tensor, fixed order."""
        out = []
        for p in self.params():
            out.append((p.name, p.data))
            out.append((f"{p.name}.vel", p.vel))
        if self.with_bn:
            out.append((f"{self.name}.bn.running_mean", self.bn.running_mean))
            out.append((f"{self.name}.bn.running_var", self.bn.running_var))
        return out


class ResidualModule:
    """Two stacked 1x1 conv blocks wrapped by an additive skip, ReLU after the add."""

    def __init__(self, index, filters, dtype=np.float32):
        name = f"res{index}"
        self.name = name
        self.conv1 = ConvBlock(f"{name}.conv1", filters, filters, 1, dtype)
        self.conv2 = ConvBlock(f"{name}.conv2", filters, filters, 1, dtype, with_relu=False)
        self._pre_add = None

    def forward(self, x, training):
        y = self.conv2.forward(self.conv1.forward(x, training), training)
        self._pre_add = x + y
        return ops.relu(self._pre_add)

    def backward(self, grad_out):
        g = ops.relu_backward(self._pre_add, grad_out)
        gx = self.conv1.backward(self.conv2.backward(g))
        return gx + g

    def blocks(self):
        return [self.conv1, self.conv2]


class Dropout:
    def __init__(self, rate):
        self.rate = rate
        self._mask = None

    def forward(self, x, training, rng):
        y, self._mask = ops.dropout(x, self.rate, training, rng)
        return y

    def backward(self, grad_out):
        return ops.dropout_backward(grad_out, self._mask, self.rate)


class Network:
    """A single backbone. Use build_backbone() to construct and initialize."""

    def __init__(self, spec, dtype=np.float32, shared_modules=None):
        self.spec = spec
        self.dtype = dtype
        f = spec.filters
        self.bank = [
            ConvBlock("c1x1", spec.bands, f, 1, dtype),
            ConvBlock("c3x3", spec.bands, f, 3, dtype),
            ConvBlock("c5x5", spec.bands, f, 5, dtype),
        ]
        self.c2 = ConvBlock("c2", 3 * f, f, 1, dtype)
        if shared_modules is None:
            self.modules = [
                ResidualModule(k, f, dtype) for k in range(1, spec.residual_modules + 1)
            ]
            self.owns_modules = True
        else:
            if len(shared_modules) != spec.residual_modules:
                raise ConfigError(
                    f"shared module count {len(shared_modules)} != "
                    f"spec.residual_modules {spec.residual_modules}"
                )
            for m in shared_modules:
                if m.conv1.conv.w.data.shape[0] != f:
                    raise ConfigError(
                        f"shared module '{m.name}' has {m.conv1.conv.w.data.shape[0]} "
                        f"filters, spec wants {f}"
                    )
            self.modules = list(shared_modules)
            self.owns_modules = False
        self.c7 = ConvBlock("c7", f, f, 1, dtype)
        self.c8 = ConvBlock("c8", f, f, 1, dtype)
        self.drop7 = Dropout(spec.dropout_rate)
        self.drop8 = Dropout(spec.dropout_rate)
        self.c9 = ConvBlock("c9", f, spec.classes, 1, dtype, with_bn=False, with_relu=False)
        self._z_shape = None

    # --- structure ------------------------------------------------------

    def blocks(self):
        out = list(self.bank) + [self.c2]
        for m in self.modules:
            out += m.blocks()
        out += [self.c7, self.c8, self.c9]
        return out

    def private_blocks(self):
        return list(self.bank) + [self.c2, self.c7, self.c8, self.c9]

    def shared_blocks(self):
        return [blk for m in self.modules for blk in m.blocks()]

    def params(self):
        return [p for blk in self.blocks() for p in blk.params()]

    def shared_params(self):
        return [p for blk in self.shared_blocks() for p in blk.params()]

    def private_params(self):
        return [p for blk in self.private_blocks() for p in blk.params()]

    def weighted_layer_count(self):
        """Bank counts as one layer: 5 + 2 * residual_modules."""
        return 2 + 2 * len(self.modules) + 3

    def parameter_count(self):
        return sum(p.data.size for p in self.params())

    def state(self):
        return [pair for blk in self.blocks() for pair in blk.state()]

    def private_state(self):
        return [pair for blk in self.private_blocks() for pair in blk.state()]

    def shared_state(self):
        return [pair for blk in self.shared_blocks() for pair in blk.state()]

    # --- execution ------------------------------------------------------

    def forward(self, x, training=False, rng=None):
        """Run the graph; returns center-pixel logits shaped (n, classes)."""
        ops._check_4d(x, "network input")
        if x.shape[1] != self.spec.bands:
            raise ShapeError(
                f"input has {x.shape[1]} bands but the network front expects "
                f"{self.spec.bands} (shape {x.shape})"
            )
        p = self.spec.patch
        if x.shape[2] != p or x.shape[3] != p:
            raise ShapeError(f"input spatial size {x.shape[2:]} != patch {p}x{p}")
        t = np.concatenate([blk.forward(x, training) for blk in self.bank], axis=1)
        t = self.c2.forward(t, training)
        for m in self.modules:
            t = m.forward(t, training)
        t = self.drop7.forward(self.c7.forward(t, training), training, rng)
        t = self.drop8.forward(self.c8.forward(t, training), training, rng)
        z = self.c9.forward(t, training)
        self._z_shape = z.shape
        c = p // 2
        return np.ascontiguousarray(z[:, :, c, c])

    def backward(self, grad_logits):
        """Backprop from center-pixel logits; returns the input gradient."""
        if self._z_shape is None:
            raise ConfigError("backward called before forward")
        c = self.spec.patch // 2
        gz = np.zeros(self._z_shape, dtype=grad_logits.dtype)
        gz[:, :, c, c] = grad_logits
        g = self.c9.backward(gz)
        g = self.c8.backward(self.drop8.backward(g))
        g = self.c7.backward(self.drop7.backward(g))
        for m in reversed(self.modules):
            g = m.backward(g)
        g = self.c2.backward(g)
        f = self.spec.filters
        parts = np.split(g, [f, 2 * f], axis=1)
        gx = self.bank[0].backward(np.ascontiguousarray(parts[0]))
        for blk, part in zip(self.bank[1:], parts[1:]):
            gx = gx + blk.backward(np.ascontiguousarray(part))
        return gx


def init_weights(network, rng, only_private=False):
    """Gaussian init: std 0.01 for bank/c2/c9, 0.005 elsewhere; biases 0;
    batch-norm scale 1, shift 0, running mean 0, running var 1."""
    front_head = {"c1x1", "c3x3", "c5x5", "c2", "c9"}
    blocks = network.private_blocks() if only_private else network.blocks()
    for blk in blocks:
        std = INIT_STD_FRONT_HEAD if blk.name in front_head else INIT_STD_MIDDLE
        w = blk.conv.w
        w.data[...] = rng.normal(0.0, std, w.data.shape).astype(w.data.dtype)
        w.vel[...] = 0
        blk.conv.b.data[...] = 0
        blk.conv.b.vel[...] = 0
        if blk.with_bn:
            blk.bn.scale.data[...] = 1
            blk.bn.scale.vel[...] = 0
            blk.bn.shift.data[...] = 0
            blk.bn.shift.vel[...] = 0
            blk.bn.running_mean[...] = 0
            blk.bn.running_var[...] = 1
    return network


def build_backbone(spec, rng, dtype=np.float32):
    """Construct and initialize a single backbone network."""
    return init_weights(Network(spec, dtype=dtype), rng)


class CrossDomainNetwork:
    """N backbone branches aliasing one physical store of residual modules."""

    def __init__(self, spec, branches):
        self.spec = spec
        self.branches = branches

    @property
    def modules(self):
        return self.branches[0].modules

    def shared_params(self):
        return self.branches[0].shared_params()

    def private_params(self, branch):
        return self.branches[branch].private_params()

    def parameter_count(self):
        """Physical parameter count: shared store once + per-branch private."""
        shared = sum(p.data.size for p in self.shared_params())
        private = sum(
            p.data.size for b in self.branches for p in b.private_params()
        )
        return shared + private

    def shared_bytes(self, branch):
        """Raw bytes of the shared store as read through one branch."""
        return b"".join(arr.tobytes() for _, arr in self.branches[branch].shared_state())


def build_cross_domain(spec, rng, dtype=np.float32):
    """Build N branches; residual modules of branch 0 are aliased by all others."""
    if not isinstance(spec, CrossDomainSpec):
        spec = CrossDomainSpec(branches=list(spec))
    first = build_backbone(spec.branches[0], rng, dtype)
    branches = [first]
    for sp in spec.branches[1:]:
        net = Network(sp, dtype=dtype, shared_modules=first.modules)
        init_weights(net, rng, only_private=True)
        branches.append(net)
    return CrossDomainNetwork(spec, branches)


def transfer_shared(pretrained, target_spec, rng, dtype=np.float32):
    """New target network: residual modules copied from the pre-trained shared
    store (batch-norm running stats reset), everything else freshly initialized."""
    src_modules = pretrained.modules
    if len(src_modules) != target_spec.residual_modules:
        raise ConfigError(
            f"cannot transfer {len(src_modules)} residual modules into a target "
            f"spec wanting {target_spec.residual_modules}"
        )
    src_filters = src_modules[0].conv1.conv.w.data.shape[0]
    if src_filters != target_spec.filters:
        raise ConfigError(
            f"filter mismatch: pre-trained shared store has {src_filters}, "
            f"target spec wants {target_spec.filters}"
        )
    target = build_backbone(target_spec, rng, dtype)
    for src, dst in zip(src_modules, target.modules):
        for sblk, dblk in zip(src.blocks(), dst.blocks()):
            dblk.conv.w.data[...] = sblk.conv.w.data.astype(dtype)
            dblk.conv.b.data[...] = sblk.conv.b.data.astype(dtype)
            dblk.bn.scale.data[...] = sblk.bn.scale.data.astype(dtype)
            dblk.bn.shift.data[...] = sblk.bn.shift.data.astype(dtype)
            # running stats stay at the fresh 0/1 init; momentum buffers stay 0
    return target


def network_gradients(net, x, labels, rng_seed=0):
    """Training-mode loss and analytic gradients for every parameter plus the
    input; dropout masks are frozen by reseeding, so repeated calls are
    bit-identical (which is what the finite-difference oracle needs)."""
    rng = np.random.default_rng(rng_seed)
    logits = net.forward(x, training=True, rng=rng)
    loss, gl = ops.softmax_cross_entropy(logits, labels)
    gx = net.backward(gl)
    grads = {p.name: p.grad for p in net.params()}
    grads["input"] = gx
    return loss, grads


def network_loss(net, x, labels, rng_seed=0):
    """Loss-only twin of network_gradients for cheap perturbed evaluations."""
    rng = np.random.default_rng(rng_seed)
    logits = net.forward(x, training=True, rng=rng)
    loss, _ = ops.softmax_cross_entropy(logits, labels)
    return loss


def check_network_gradients(net, x, labels, rel_tol=1e-3, abs_floor=1e-6,
                            step=1e-3, rng_seed=0):
    """Finite-difference check of the whole network (params and input)."""
    tensors = {p.name: p.data for p in net.params()}
    tensors["input"] = x
    return ops.grad_check(
        lambda: network_gradients(net, x, labels, rng_seed),
        tensors,
        rel_tol=rel_tol,
        abs_floor=abs_floor,
        step=step,
        loss_fn=lambda: network_loss(net, x, labels, rng_seed),
    )
