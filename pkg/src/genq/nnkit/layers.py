"""Layers, forward contexts and the two desk-scale architectures."""
from __future__ import annotations

import copy

import numpy as np

from genq import rng as rngmod
from genq.errors import ContractError
from genq.nnkit import ops
from genq.nnkit.autograd import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Context:
    """Per-forward-pass switches and hooks.

    Subclasses override :meth:`weight` and :meth:`act` to simulate
    quantization; the base class is the float model.
    """

    def __init__(self, train: bool = False, update_stats: bool = False,
                 capture: tuple[str, ...] = ()):
        self.train = train
        self.update_stats = update_stats
        self.capture = set(capture)
        self.bn_observed: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.captured: dict[str, np.ndarray] = {}

    def weight(self, layer: str, w: Tensor) -> Tensor:
        return w

    def act(self, site: str, x: Tensor) -> Tensor:
        return x


def _he_uniform(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    kind = "conv"

    def __init__(self, name: str, cin: int, cout: int, gen: np.random.Generator,
                 kernel: int = 3, stride: int = 1, padding: int = 1):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(_he_uniform(gen, (cout, cin, kernel, kernel), cin * kernel * kernel),
                             requires_grad=True, name=f"{name}.weight")

    def params(self):
        return [self.weight]

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return ops.conv2d(x, ctx.weight(self.name, self.weight), None, self.stride, self.padding)


class Linear:
    kind = "linear"

    def __init__(self, name: str, fin: int, fout: int, gen: np.random.Generator):
        self.name = name
        self.weight = Tensor(_he_uniform(gen, (fout, fin), fin), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(fout, np.float32), requires_grad=True, name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return ops.linear(x, ctx.weight(self.name, self.weight), self.bias)


class BatchNorm2d:
    """BatchNorm over NCHW input.

    Running variance is stored unbiased. In train mode the biased batch
    mean/std are published to ``ctx.bn_observed``; running statistics only
    move when ``ctx.update_stats`` is set.
    """

    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum = BN_MOMENTUM
        self.eps = BN_EPS

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    @property
    def running_std(self) -> np.ndarray:
        return np.sqrt(self.running_var)

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ContractError(f"{self.name}: expected (B, {self.channels}, H, W), got {x.shape}")
        if not ctx.train:
            return ops.batchnorm_eval(x, self.gamma, self.beta, self.running_mean,
                                      self.running_var, self.eps)
        m = x.size // self.channels
        if m < 2:
            raise ContractError(f"{self.name}: train mode needs B*H*W >= 2")
        out, mu, var = ops.batchnorm_train(x, self.gamma, self.beta, self.eps)
        ctx.bn_observed[self.name] = (mu, np.sqrt(var))
        if ctx.update_stats:
            mom = self.momentum
            unbiased = var * (m / (m - 1))
            self.running_mean = ((1 - mom) * self.running_mean + mom * mu).astype(np.float32)
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(np.float32)
        return out


class LayerNorm:
    def __init__(self, name: str, dim: int):
        self.name = name
        self.gamma = Tensor(np.ones(dim, np.float32), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(dim, np.float32), requires_grad=True, name=f"{name}.beta")

    def params(self):
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta)


# -- units: the granularity at which models are run piecewise ---------------

class Unit:
    name: str
    layers: list
    act_sites: list
    # activation site applied to the unit's own output, if any
    terminal_site: str | None = None

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def weight_layers(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, (Conv2d, Linear))]


class ConvBlock(Unit):
    def __init__(self, name: str, cin: int, cout: int, stride: int, gen):
        self.name = name
        self.conv = Conv2d(f"{name}.conv", cin, cout, gen, stride=stride)
        self.bn = BatchNorm2d(f"{name}.bn", cout)
        self.layers = [self.conv, self.bn]
        self.act_sites = [f"{name}.relu"]
        self.terminal_site = f"{name}.relu"

    def __call__(self, x, ctx):
        x = ops.relu(self.bn(self.conv(x, ctx), ctx))
        return ctx.act(f"{self.name}.relu", x)


class GlobalPool(Unit):
    def __init__(self, name: str = "pool"):
        self.name = name
        self.layers = []
        self.act_sites = []

    def __call__(self, x, ctx):
        return ops.mean(x, axis=(2, 3))


class Head(Unit):
    def __init__(self, name: str, fin: int, classes: int, gen, norm: bool = False):
        self.name = name
        self.norm = LayerNorm(f"{name}.norm", fin) if norm else None
        self.fc = Linear(f"{name}.fc", fin, classes, gen)
        self.layers = ([self.norm] if norm else []) + [self.fc]
        self.act_sites = ["head.in"]

    def __call__(self, x, ctx):
        if self.norm is not None:
            x = self.norm(x, ctx)[:, 0]
        return self.fc(ctx.act("head.in", x), ctx)


class PatchEmbed(Unit):
    def __init__(self, name: str, patch: int, image: int, dim: int, gen):
        self.name = name
        self.patch = patch
        self.grid = image // patch
        self.proj = Linear(f"{name}.proj", 3 * patch * patch, dim, gen)
        self.cls = Tensor(gen.normal(0, 0.02, (1, 1, dim)).astype(np.float32),
                          requires_grad=True, name=f"{name}.cls")
        self.pos = Tensor(gen.normal(0, 0.02, (1, self.grid * self.grid + 1, dim)).astype(np.float32),
                          requires_grad=True, name=f"{name}.pos")
        self.layers = [self.proj]
        self.act_sites = []

    def params(self):
        return self.proj.params() + [self.cls, self.pos]

    def __call__(self, x, ctx):
        b, c, _, _ = x.shape
        g, p = self.grid, self.patch
        patches = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
        tokens = self.proj(patches, ctx)
        cls = ops.mul(self.cls, np.ones((b, 1, 1), np.float32))
        return ops.concat([cls, tokens], axis=1) + self.pos


class TransformerBlock(Unit):
    def __init__(self, name: str, dim: int, heads: int, hidden: int, gen):
        self.name = name
        self.heads = heads
        self.ln1 = LayerNorm(f"{name}.ln1", dim)
        self.qkv = Linear(f"{name}.qkv", dim, 3 * dim, gen)
        self.proj = Linear(f"{name}.proj", dim, dim, gen)
        self.ln2 = LayerNorm(f"{name}.ln2", dim)
        self.fc1 = Linear(f"{name}.fc1", dim, hidden, gen)
        self.fc2 = Linear(f"{name}.fc2", hidden, dim, gen)
        self.layers = [self.ln1, self.qkv, self.proj, self.ln2, self.fc1, self.fc2]
        self.act_sites = [f"{name}.attn", f"{name}.gelu"]

    def __call__(self, x, ctx):
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(self.ln1(x, ctx), ctx).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att, _ = ops.attention(q, k, v)
        att = ctx.act(f"{self.name}.attn", att.transpose(0, 2, 1, 3).reshape(b, n, d))
        x = x + self.proj(att, ctx)
        hid = ctx.act(f"{self.name}.gelu", ops.gelu(self.fc1(self.ln2(x, ctx), ctx)))
        x = x + self.fc2(hid, ctx)
        if self.name in ctx.capture:
            ctx.captured[self.name] = x.data
        return x


class Model:
    """Ordered list of units plus bookkeeping for parameters and statistics."""

    def __init__(self, arch: str, units: list[Unit], num_classes: int):
        self.arch = arch
        self.units = units
        self.num_classes = num_classes

    def forward(self, x, ctx: Context | None = None, start: int = 0, stop: int | None = None) -> Tensor:
        ctx = ctx or Context()
        if not isinstance(x, Tensor):
            x = Tensor(x)
        for unit in self.units[start:stop]:
            x = unit(x, ctx)
        return x

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for unit in self.units for p in unit.params()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for bn in self.bn_layers():
            out.update(bn.buffers())
        return out

    def state(self) -> dict[str, np.ndarray]:
        st = {name: p.data for name, p in self.parameters().items()}
        st.update(self.buffers())
        return st

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float32).reshape(p.shape)
        for bn in self.bn_layers():
            bn.running_mean = np.array(state[f"{bn.name}.running_mean"], dtype=np.float32)
            bn.running_var = np.array(state[f"{bn.name}.running_var"], dtype=np.float32)

    def bn_layers(self) -> list[BatchNorm2d]:
        return [layer for unit in self.units for layer in unit.layers
                if isinstance(layer, BatchNorm2d)]

    def weight_layers(self) -> list:
        return [layer for unit in self.units for layer in unit.weight_layers()]

    def act_sites(self) -> list[str]:
        return [site for unit in self.units for site in unit.act_sites]

    @property
    def feature_site(self) -> str | None:
        blocks = [u.name for u in self.units if isinstance(u, TransformerBlock)]
        return blocks[-1] if blocks else None

    def copy(self) -> "Model":
        return copy.deepcopy(self)


ARCHS = ("tiny-cnn", "tiny-vit")


def tiny_cnn(seed: int, num_classes: int = 10) -> Model:
    gen = rngmod.stream(seed, "init", "tiny-cnn")
    widths = [(3, 16, 2), (16, 32, 2), (32, 64, 2), (64, 64, 1)]
    units: list[Unit] = [ConvBlock(f"block{i}", cin, cout, s, gen)
                         for i, (cin, cout, s) in enumerate(widths)]
    units += [GlobalPool(), Head("head", 64, num_classes, gen)]
    return Model("tiny-cnn", units, num_classes)


def tiny_vit(seed: int, num_classes: int = 10, dim: int = 64, depth: int = 4,
             heads: int = 4, mlp_ratio: int = 2) -> Model:
    gen = rngmod.stream(seed, "init", "tiny-vit")
    units: list[Unit] = [PatchEmbed("embed", 4, 32, dim, gen)]
    units += [TransformerBlock(f"block{i}", dim, heads, dim * mlp_ratio, gen) for i in range(depth)]
    units.append(Head("head", dim, num_classes, gen, norm=True))
    return Model("tiny-vit", units, num_classes)


def build_model(arch: str, seed: int, num_classes: int = 10) -> Model:
    if arch == "tiny-cnn":
        return tiny_cnn(seed, num_classes)
    if arch == "tiny-vit":
        return tiny_vit(seed, num_classes)
    raise ContractError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
