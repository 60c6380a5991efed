"""Model zoo for the fragment-fusion experiment.

Six kinds share one building block, the BConv stack (1x1 -> 3x3 -> 1x1
convolutions, optionally each followed by batch-norm and relu):

    bconv        stack -> classifier
    flearn       DFT -> stack(real), stack(imag) -> IDFT -> |.| -> classifier
    conv_cas_v1  stack -> stack -> classifier
    conv_par_v1  stack(x) + stack(x) -> classifier
    conv_cas_v2  3x3 -> stack -> stack -> 3x3 -> classifier
    conv_par_v2  3x3 -> (stack + stack) -> 3x3 -> classifier

The classifier is a 1x1 conv to one channel followed by a sigmoid.
``FLearnLayer`` / ``Fusion`` are the reusable feature-level pieces with
batch-norm enabled by default.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .spectral import ComplexPair, dft2, idft2, magnitude
from .tensor import Parameter, RunningStats, ShapeError, Tensor

KINDS = ("bconv", "flearn", "conv_cas_v1", "conv_cas_v2", "conv_par_v1", "conv_par_v2")

DISPLAY_NAMES = {
    "bconv": "BConv",
    "flearn": "F-Learn",
    "conv_cas_v1": "Conv-Casv1",
    "conv_cas_v2": "Conv-Casv2",
    "conv_par_v1": "Conv-Parv1",
    "conv_par_v2": "Conv-Parv2",
}

_ALIASES = {k.replace("_", ""): k for k in KINDS}
_ALIASES.update({v.lower().replace("-", ""): k for k, v in DISPLAY_NAMES.items()})
_ALIASES.update({k[len("conv_"):].replace("_", ""): k for k in KINDS if k.startswith("conv_")})


def canonical_kind(name: str) -> str:
    key = name.strip().lower().replace("-", "").replace("_", "")
    if key not in _ALIASES:
        raise ValueError(f"unknown model kind {name!r}; valid kinds: {', '.join(KINDS)}")
    return _ALIASES[key]


@dataclass
class ModelConfig:
    kind: str = "bconv"
    in_channels: int = 4
    hidden_channels: int = 64
    image_size: int = 128
    use_activation: bool = False
    use_norm: bool = False
    par_merge: str = "sum"  # "sum" | "concat"

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        if self.in_channels < 1 or self.hidden_channels < 1:
            raise ValueError("in_channels and hidden_channels must be >= 1")
        n = self.image_size
        if n < 1 or n & (n - 1):
            raise ValueError(f"image_size must be a power of two, got {n}")
        if self.par_merge not in ("sum", "concat"):
            raise ValueError(f"par_merge must be 'sum' or 'concat', got {self.par_merge!r}")


# --------------------------------------------------------------------------
# modules


class Module:
    training = True

    def children(self) -> Iterator["Module"]:
        for v in vars(self).values():
            if isinstance(v, Module):
                yield v

    def parameters(self) -> list[Parameter]:
        out = []
        for v in vars(self).values():
            if isinstance(v, Parameter):
                out.append(v)
            elif isinstance(v, Module):
                out.extend(v.parameters())
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for c in self.children():
            yield from c.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, name: str, cin: int, cout: int, k: int):
        self.name = name
        self.weight = Parameter(np.zeros((cout, cin, k, k)), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[1:]))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)

    def describe(self) -> str:
        cout, cin, k, _ = self.weight.shape
        return f"Conv2d({cin}->{cout}, {k}x{k})"


class BatchNorm2d(Module):
    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.stats = RunningStats(channels)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.stats, training=self.training)

    def describe(self) -> str:
        return f"BatchNorm2d({self.gamma.shape[0]})"


class CBR(Module):
    """conv -> [batch-norm] -> [relu]."""

    def __init__(self, name: str, cin: int, cout: int, k: int, act: bool, norm: bool):
        self.name = name
        self.conv = Conv2d(f"{name}.conv", cin, cout, k)
        self.bn = BatchNorm2d(f"{name}.bn", cout) if norm else None
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return T.relu(y) if self.act else y

    def describe(self) -> str:
        parts = [self.conv.describe()]
        if self.bn is not None:
            parts.append("BN")
        if self.act:
            parts.append("ReLU")
        return " + ".join(parts)


class ConvStack(Module):
    """The BConv module: 1x1 -> 3x3 -> 1x1, all at ``hidden`` width."""

    def __init__(self, name: str, cin: int, hidden: int, act: bool = True, norm: bool = False):
        self.name = name
        self.c1 = CBR(f"{name}.c1", cin, hidden, 1, act, norm)
        self.c2 = CBR(f"{name}.c2", hidden, hidden, 3, act, norm)
        self.c3 = CBR(f"{name}.c3", hidden, hidden, 1, act, norm)

    def forward(self, x: Tensor) -> Tensor:
        return self.c3(self.c2(self.c1(x)))


class FLearnLayer(Module):
    """Frequency-domain feature learning: |IDFT(G_re(Re F), G_im(Im F))|, F = DFT(f)."""

    def __init__(self, name: str, cin: int, cout: int | None = None,
                 act: bool = True, norm: bool = True):
        self.name = name
        cout = cin if cout is None else cout
        self.real_group = ConvStack(f"{name}.real", cin, cout, act, norm)
        self.imag_group = ConvStack(f"{name}.imag", cin, cout, act, norm)

    def forward(self, f: Tensor) -> Tensor:
        h, w = f.shape[-2:]
        if h & (h - 1) or w & (w - 1):
            raise ShapeError(f"FLearnLayer needs power-of-two spatial size, got {h}x{w}")
        spec = dft2(f)
        out = ComplexPair(self.real_group(spec.real), self.imag_group(spec.imag))
        return magnitude(idft2(out))


class Fusion(Module):
    """relu(BN(conv1x1(concat(f, f_hat))))."""

    def __init__(self, name: str, channels: int, norm: bool = True):
        self.name = name
        self.cbr = CBR(f"{name}.c1", 2 * channels, channels, 1, act=True, norm=norm)

    def forward(self, pair: tuple[Tensor, Tensor]) -> Tensor:
        f, f_hat = pair
        if f.shape != f_hat.shape:
            raise ShapeError(f"fuse: f {f.shape} and f_hat {f_hat.shape} differ")
        return self.cbr(T.concat_channels(f, f_hat))


class FLearnBlock(Module):
    """F-Learn layer followed by concat-fusion with its own input."""

    def __init__(self, name: str, channels: int, norm: bool = True):
        self.name = name
        self.spectral = FLearnLayer(f"{name}.flearn", channels, channels, norm=norm)
        self.fusion = Fusion(f"{name}.fuse", channels, norm=norm)

    def forward(self, f: Tensor) -> Tensor:
        return self.fusion((f, self.spectral(f)))


def flearn_layer(f: Tensor, layer: FLearnLayer) -> Tensor:
    return layer(f)


def fuse(f: Tensor, f_hat: Tensor, fusion: Fusion) -> Tensor:
    return fusion((f, f_hat))


# --------------------------------------------------------------------------
# toy-experiment bodies


class Cascade(Module):
    def __init__(self, cfg: ModelConfig, extra: bool):
        k, h, a, n = cfg.in_channels, cfg.hidden_channels, cfg.use_activation, cfg.use_norm
        self.pre = CBR("pre", k, h, 3, a, n) if extra else None
        self.stack_a = ConvStack("stack_a", h if extra else k, h, a, n)
        self.stack_b = ConvStack("stack_b", h, h, a, n)
        self.post = CBR("post", h, h, 3, a, n) if extra else None

    def forward(self, x):
        if self.pre is not None:
            x = self.pre(x)
        x = self.stack_b(self.stack_a(x))
        return self.post(x) if self.post is not None else x


class Parallel(Module):
    def __init__(self, cfg: ModelConfig, extra: bool):
        k, h, a, n = cfg.in_channels, cfg.hidden_channels, cfg.use_activation, cfg.use_norm
        cin = h if extra else k
        self.pre = CBR("pre", k, h, 3, a, n) if extra else None
        self.stack_a = ConvStack("stack_a", cin, h, a, n)
        self.stack_b = ConvStack("stack_b", cin, h, a, n)
        self.merge = CBR("merge", 2 * h, h, 1, a, n) if cfg.par_merge == "concat" else None
        self.post = CBR("post", h, h, 3, a, n) if extra else None

    def forward(self, x):
        if self.pre is not None:
            x = self.pre(x)
        ya, yb = self.stack_a(x), self.stack_b(x)
        y = T.add(ya, yb) if self.merge is None else self.merge(T.concat_channels(ya, yb))
        return self.post(y) if self.post is not None else y


class Model(Module):
    """Body followed by the 1x1 classifier and sigmoid; maps [K,M,N] -> [1,M,N]."""

    def __init__(self, cfg: ModelConfig, body: Module):
        self.cfg = cfg
        self.kind = cfg.kind
        self.body = body
        self.classifier = Conv2d("classifier", cfg.hidden_channels, 1, 1)

    def logits(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3 or x.shape[0] != self.cfg.in_channels:
            raise ShapeError(f"{self.kind}: expected [{self.cfg.in_channels},M,N] input, got {x.shape}")
        return self.classifier(self.body(x))

    def forward(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.logits(x))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def layers(self) -> list[Module]:
        return [m for m in self.modules() if isinstance(m, (Conv2d, BatchNorm2d))]

    def summary(self) -> str:
        lines = [f"kind: {self.kind} ({DISPLAY_NAMES[self.kind]})"]
        for m in self.layers():
            n = sum(p.data.size for p in m.parameters())
            lines.append(f"  {m.name}: {m.describe()}  params={n}")
        lines.append(f"total params: {self.param_count()}")
        return "\n".join(lines)

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Ordered (identifier, array) entries, parameters then BN buffers."""
        out = [(p.name, p.data) for p in self.parameters()]
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                out.append((f"{m.name}.running_mean", m.stats.mean))
                out.append((f"{m.name}.running_var", m.stats.var))
        return out

    def load_state(self, entries) -> None:
        table = dict(entries)
        for p in self.parameters():
            if p.name not in table or table[p.name].shape != p.shape:
                raise ValueError(f"checkpoint missing or misshapen entry {p.name!r}")
            p.data[...] = table[p.name]
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.stats.mean = np.array(table.get(f"{m.name}.running_mean", m.stats.mean))
                m.stats.var = np.array(table.get(f"{m.name}.running_var", m.stats.var))

    def save(self, path) -> None:
        T.save_checkpoint(path, self.state())

    def load(self, path) -> None:
        self.load_state(T.load_checkpoint(path))


def build_bconv(cfg: ModelConfig) -> Model:
    return Model(cfg, ConvStack("stack", cfg.in_channels, cfg.hidden_channels,
                                cfg.use_activation, cfg.use_norm))


def build_flearn_toy(cfg: ModelConfig) -> Model:
    return Model(cfg, FLearnLayer("spectral", cfg.in_channels, cfg.hidden_channels,
                                  cfg.use_activation, cfg.use_norm))


def build_conv_cas(cfg: ModelConfig, v2: bool = False) -> Model:
    return Model(cfg, Cascade(cfg, extra=v2))


def build_conv_par(cfg: ModelConfig, v2: bool = False) -> Model:
    return Model(cfg, Parallel(cfg, extra=v2))


def build_model(cfg: ModelConfig) -> Model:
    kind = cfg.kind
    if kind == "bconv":
        return build_bconv(cfg)
    if kind == "flearn":
        return build_flearn_toy(cfg)
    if kind.startswith("conv_cas"):
        return build_conv_cas(cfg, v2=kind.endswith("v2"))
    return build_conv_par(cfg, v2=kind.endswith("v2"))
