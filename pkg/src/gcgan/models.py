"""Generator and patch discriminator networks, plus translator binding."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .transforms import ShapeError

INIT_STD = 0.02


@dataclass
class GeneratorSpec:
    """Architecture descriptor for a translator.

    ``arch`` selects the layer table: ``"resnet"`` is the encoder /
    residual / decoder network used at 128 and 256 pixels, ``"digits"`` the
    four-conv network used for 32x32 digit translation, and ``"identity"``
    a parameter-free pass-through used for debugging the inference path.
    """

    input_channels: int = 3
    output_channels: Optional[int] = None
    base_width: int = 64
    n_resblocks: int = 9
    arch: str = "resnet"
    norm: str = "instance"
    affine: bool = False
    output_activation: str = "tanh"
    stem_padding: str = "reflect"
    padding: str = "zeros"

    def __post_init__(self):
        if self.output_channels is None:
            self.output_channels = self.input_channels
        self.validate()

    def validate(self) -> None:
        if self.arch not in ("resnet", "digits", "identity"):
            raise ValueError(f"unknown generator arch {self.arch!r}")
        if self.input_channels <= 0 or self.output_channels <= 0 or self.base_width <= 0:
            raise ValueError("generator channel counts and widths must be positive")
        if self.arch == "resnet" and self.n_resblocks < 0:
            raise ValueError("n_resblocks must be non-negative")
        if self.arch == "identity" and self.input_channels != self.output_channels:
            raise ValueError("identity generator needs matching channel counts")
        if self.norm != "instance":
            raise ValueError(f"unsupported norm {self.norm!r}")
        if self.output_activation != "tanh":
            raise ValueError(f"unsupported output activation {self.output_activation!r}")
        for p in (self.stem_padding, self.padding):
            if p not in ("reflect", "zeros"):
                raise ValueError(f"unsupported padding mode {p!r}")

    @classmethod
    def for_resolution(cls, resolution: int, channels: int = 3, **kw) -> "GeneratorSpec":
        """Default layout for a square input size: 9 blocks at 256, 6 at 128,
        the digit network at 32."""
        if resolution <= 32 and "arch" not in kw:
            return cls(input_channels=channels, arch="digits", **kw)
        kw.setdefault("n_resblocks", 9 if resolution >= 256 else 6)
        return cls(input_channels=channels, **kw)

    @property
    def size_multiple(self) -> int:
        return 1 if self.arch == "identity" else 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DiscriminatorSpec:
    input_channels: int = 3
    widths: Tuple[int, ...] = (64, 128, 256, 512)
    strides: Tuple[int, ...] = (2, 2, 2, 1, 1)
    kernel: int = 4
    padding: int = 1
    slope: float = 0.2
    affine: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        if self.input_channels <= 0 or any(w <= 0 for w in self.widths):
            raise ValueError("discriminator widths must be positive")
        if len(self.strides) != len(self.widths) + 1:
            raise ValueError("need one stride per conv layer (widths plus the score layer)")

    def output_size(self, size: int) -> int:
        for s in self.strides:
            size = (size + 2 * self.padding - self.kernel) // s + 1
        return size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d


def _pad_conv(cin, cout, k, stride, pad, mode, bias):
    if mode == "reflect":
        return [nn.ReflectionPad2d(pad), nn.Conv2d(cin, cout, k, stride, 0, bias=bias)]
    return [nn.Conv2d(cin, cout, k, stride, pad, bias=bias)]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, padding: str = "zeros", affine: bool = False):
        super().__init__()
        # convs followed by instance norm carry no bias: normalization cancels it
        self.body = nn.Sequential(
            *_pad_conv(channels, channels, 3, 1, 1, padding, False),
            nn.InstanceNorm2d(channels, affine=affine),
            nn.ReLU(True),
            *_pad_conv(channels, channels, 3, 1, 1, padding, False),
            nn.InstanceNorm2d(channels, affine=affine),
        )

    def forward(self, x):
        return x + self.body(x)


class Identity(nn.Module):
    def forward(self, x):
        return x


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        if spec.arch == "identity":
            self.net = Identity()
        elif spec.arch == "digits":
            self.net = self._digits(spec)
        else:
            self.net = self._resnet(spec)

    @staticmethod
    def _resnet(spec: GeneratorSpec) -> nn.Sequential:
        w, a = spec.base_width, spec.affine
        layers = [
            *_pad_conv(spec.input_channels, w, 7, 1, 3, spec.stem_padding, False),
            nn.InstanceNorm2d(w, affine=a),
            nn.ReLU(True),
        ]
        for mult in (1, 2):
            layers += [
                nn.Conv2d(w * mult, w * mult * 2, 3, 2, 1, bias=False),
                nn.InstanceNorm2d(w * mult * 2, affine=a),
                nn.ReLU(True),
            ]
        layers += [ResidualBlock(w * 4, spec.padding, a) for _ in range(spec.n_resblocks)]
        for mult in (4, 2):
            layers += [
                nn.ConvTranspose2d(w * mult, w * mult // 2, 3, 2, 1, output_padding=1, bias=False),
                nn.InstanceNorm2d(w * mult // 2, affine=a),
                nn.ReLU(True),
            ]
        layers += _pad_conv(w, spec.output_channels, 7, 1, 3, spec.padding, True)
        layers.append(nn.Tanh())
        return nn.Sequential(*layers)

    @staticmethod
    def _digits(spec: GeneratorSpec) -> nn.Sequential:
        w, a = spec.base_width, spec.affine
        act = lambda: nn.LeakyReLU(0.2, True)  # noqa: E731
        return nn.Sequential(
            nn.Conv2d(spec.input_channels, w, 4, 2, 1, bias=True),
            act(),
            nn.Conv2d(w, 2 * w, 4, 2, 1, bias=False),
            nn.InstanceNorm2d(2 * w, affine=a),
            act(),
            nn.Conv2d(2 * w, 2 * w, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(2 * w, affine=a),
            act(),
            nn.Conv2d(2 * w, 2 * w, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(2 * w, affine=a),
            act(),
            nn.ConvTranspose2d(2 * w, w, 4, 2, 1, bias=False),
            nn.InstanceNorm2d(w, affine=a),
            act(),
            nn.ConvTranspose2d(w, spec.output_channels, 4, 2, 1, bias=True),
            nn.Tanh(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Discriminator(nn.Module):
    """PatchGAN-style critic: one real-valued score per receptive-field patch."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.input_channels
        for i, (cout, stride) in enumerate(zip(spec.widths, spec.strides)):
            # first layer is left unnormalized, so it keeps its bias
            layers.append(nn.Conv2d(cin, cout, spec.kernel, stride, spec.padding, bias=(i == 0)))
            if i > 0:
                layers.append(nn.InstanceNorm2d(cout, affine=spec.affine))
            layers.append(nn.LeakyReLU(spec.slope, True))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, spec.kernel, spec.strides[-1], spec.padding, bias=True))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """Gaussian(0, 0.02) weights and zero biases, drawn from a private RNG.

    Norm layers with learned affine get weight 1, bias 0.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(0.0, INIT_STD, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm2d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def build_generator(spec: GeneratorSpec, seed: int = 0) -> Generator:
    spec.validate()
    return init_weights(Generator(spec), seed)


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> Discriminator:
    return init_weights(Discriminator(spec), seed)


def _check_batch(x: torch.Tensor, channels: int, multiple: int) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected a (B, C, H, W) batch, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {x.shape[1]}")
    if x.shape[2] % multiple or x.shape[3] % multiple:
        raise ShapeError(f"spatial size {tuple(x.shape[2:])} must be a multiple of {multiple}")


def forward_generator(g: Generator, x: torch.Tensor) -> torch.Tensor:
    _check_batch(x, g.spec.input_channels, g.spec.size_multiple)
    return g(x)


def forward_discriminator(d: Discriminator, x: torch.Tensor) -> torch.Tensor:
    _check_batch(x, d.spec.input_channels, 1)
    if d.spec.output_size(min(x.shape[2:])) < 1:
        raise ShapeError(f"input {tuple(x.shape[2:])} too small for the discriminator")
    return d(x)


def expected_parameter_count(spec: GeneratorSpec) -> int:
    """Parameter count implied by the layer table, computed without building."""
    if spec.arch == "identity":
        return 0
    c_in, c_out, w = spec.input_channels, spec.output_channels, spec.base_width
    aff = 2 if spec.affine else 0
    if spec.arch == "digits":
        return (
            c_in * w * 16 + w
            + w * 2 * w * 16 + 2 * w * aff
            + 2 * (2 * w * 2 * w * 9 + 2 * w * aff)
            + 2 * w * w * 16 + w * aff
            + w * c_out * 16 + c_out
        )
    n = c_in * w * 49 + w * aff
    n += w * 2 * w * 9 + 2 * w * aff
    n += 2 * w * 4 * w * 9 + 4 * w * aff
    n += spec.n_resblocks * 2 * (4 * w * 4 * w * 9 + 4 * w * aff)
    n += 4 * w * 2 * w * 9 + 2 * w * aff
    n += 2 * w * w * 9 + w * aff
    n += w * c_out * 49 + c_out
    return n


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_resblocks(g: Generator) -> int:
    return sum(isinstance(m, ResidualBlock) for m in g.modules())


@dataclass
class TranslationModel:
    """The generator pair, their discriminators, and the optional inverse
    translator used by the cycle constraint.

    In ``"shared"`` mode ``g_xtyt`` is the very same module object as
    ``g_xy``.
    """

    g_xy: Generator
    d_y: Discriminator
    d_yt: Discriminator
    g_xtyt: Optional[Generator] = None
    sharing: str = "shared"
    g_yx: Optional[Generator] = None
    d_x: Optional[Discriminator] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.g_xtyt is None:
            bind_translators(self, self.sharing)

    def generators(self) -> dict:
        out = {"g_xy": self.g_xy}
        if self.sharing == "separate":
            out["g_xtyt"] = self.g_xtyt
        if self.g_yx is not None:
            out["g_yx"] = self.g_yx
        return out

    def discriminators(self) -> dict:
        out = {"d_y": self.d_y, "d_yt": self.d_yt}
        if self.d_x is not None:
            out["d_x"] = self.d_x
        return out

    def modules(self) -> dict:
        return {**self.generators(), **self.discriminators()}

    def double(self) -> "TranslationModel":
        for m in self.modules().values():
            m.double()
        return self


def bind_translators(model: TranslationModel, mode: str) -> TranslationModel:
    """Alias (``shared``) or copy (``separate``) the transformed-domain
    translator from ``g_xy``."""
    if mode == "shared":
        model.g_xtyt = model.g_xy
    elif mode == "separate":
        model.g_xtyt = copy.deepcopy(model.g_xy)
    else:
        raise ValueError(f"unknown sharing mode {mode!r}")
    model.sharing = mode
    return model


def build_model(
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    sharing: str = "shared",
    with_inverse: bool = False,
    seed: int = 0,
) -> TranslationModel:
    """Build every network of a run with seeds derived from ``seed``."""
    g_xy = build_generator(gen_spec, seed)
    d_y = build_discriminator(disc_spec, seed + 1)
    d_yt = build_discriminator(disc_spec, seed + 2)
    g_yx = d_x = None
    if with_inverse:
        inv_spec = copy.deepcopy(gen_spec)
        inv_spec.input_channels, inv_spec.output_channels = gen_spec.output_channels, gen_spec.input_channels
        g_yx = build_generator(inv_spec, seed + 3)
        x_spec = copy.deepcopy(disc_spec)
        x_spec.input_channels = gen_spec.input_channels
        d_x = build_discriminator(x_spec, seed + 4)
    model = TranslationModel(g_xy=g_xy, d_y=d_y, d_yt=d_yt, g_xtyt=g_xy, sharing="shared", g_yx=g_yx, d_x=d_x)
    return bind_translators(model, sharing)
