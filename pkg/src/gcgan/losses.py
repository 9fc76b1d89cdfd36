"""Objective terms for geometry-consistent unpaired translation.

All reconstruction-style terms reduce with a mean over every element
(batch, channel, spatial), so the weights do not depend on resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Optional

import torch

from .transforms import GeoTransform, apply_transform, invert_transform

SIGMA_FLOOR = 1e-6
CONSTRAINTS = ("geo", "cycle", "distance", "identity")

Translator = Callable[[torch.Tensor], torch.Tensor]


class ConfigurationError(ValueError):
    """A loss was requested that the current model/config cannot provide."""


@dataclass
class LossReport:
    gan_g: float = 0.0
    gan_d: float = 0.0
    geo: float = 0.0
    cycle: float = 0.0
    distance: float = 0.0
    identity: float = 0.0
    total_g: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistanceStats:
    """Precomputed mean/std of within-domain pairwise image distances."""

    mu_x: float
    sigma_x: float
    mu_y: float
    sigma_y: float

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for key in ("mu_x", "sigma_x", "mu_y", "sigma_y"):
                fh.write(f"{key} = {getattr(self, key)!r}\n")

    @classmethod
    def load(cls, path) -> "DistanceStats":
        values = {}
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, val = line.partition("=")
                values[key.strip()] = float(val)
        missing = {"mu_x", "sigma_x", "mu_y", "sigma_y"} - set(values)
        if missing:
            raise ValueError(f"{path}: missing keys {sorted(missing)}")
        return cls(values["mu_x"], values["sigma_x"], values["mu_y"], values["sigma_y"])


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def adversarial_loss_g(scores_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares generator loss: push every patch score to 1."""
    return ((scores_fake - 1.0) ** 2).mean()


def adversarial_loss_d(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares critic loss with targets real=1, fake=0, halved."""
    return 0.5 * (((scores_real - 1.0) ** 2).mean() + (scores_fake ** 2).mean())


def geometry_terms(fake_y: torch.Tensor, fake_yt: torch.Tensor, f: GeoTransform):
    """The two geometry-consistency residuals given both translations.

    ``fake_y`` is ``G_xy(x)`` and ``fake_yt`` is ``G_xtyt(f(x))``.
    """
    back = l1(fake_y, apply_transform(invert_transform(f), fake_yt))
    forward = l1(fake_yt, apply_transform(f, fake_y))
    return back, forward


def geometry_consistency_loss(g_xy: Translator, g_xtyt: Translator, x: torch.Tensor, f: GeoTransform) -> torch.Tensor:
    fake_y = g_xy(x)
    fake_yt = g_xtyt(apply_transform(f, x))
    back, forward = geometry_terms(fake_y, fake_yt, f)
    return back + forward


def cycle_consistency_loss(
    g_xy: Translator, g_yx: Optional[Translator], x: torch.Tensor, y: torch.Tensor
) -> torch.Tensor:
    if g_yx is None:
        raise ConfigurationError("cycle consistency needs an inverse translator G_yx")
    return l1(g_yx(g_xy(x)), x) + l1(g_xy(g_yx(y)), y)


def pair_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pair image distance: mean absolute difference over (C, H, W)."""
    return (a - b).abs().flatten(1).mean(dim=1)


def standardized(d: torch.Tensor, mu: float, sigma: float, floor: Optional[float] = SIGMA_FLOOR) -> torch.Tensor:
    if floor is not None:
        sigma = max(sigma, floor)
    elif sigma <= 0:
        raise ValueError("degenerate distance statistics: sigma must be positive")
    return (d - mu) / sigma


def distance_loss_from_outputs(
    x_i: torch.Tensor,
    x_j: torch.Tensor,
    out_i: torch.Tensor,
    out_j: torch.Tensor,
    stats: DistanceStats,
    floor: Optional[float] = SIGMA_FLOOR,
) -> torch.Tensor:
    phi = standardized(pair_distance(x_i, x_j), stats.mu_x, stats.sigma_x, floor)
    psi = standardized(pair_distance(out_i, out_j), stats.mu_y, stats.sigma_y, floor)
    return (phi - psi).abs().mean()


def distance_loss(
    g_xy: Translator,
    x_i: torch.Tensor,
    x_j: torch.Tensor,
    stats: DistanceStats,
    floor: Optional[float] = SIGMA_FLOOR,
) -> torch.Tensor:
    """Mean absolute gap between standardized source and output distances
    over the pairs ``(x_i[k], x_j[k])``."""
    return distance_loss_from_outputs(x_i, x_j, g_xy(x_i), g_xy(x_j), stats, floor)


def identity_loss(g_xy: Translator, y: torch.Tensor) -> torch.Tensor:
    return l1(g_xy(y), y)


def _sum(value):
    if isinstance(value, (list, tuple)):
        total = 0.0
        for v in value:
            total = total + v
        return total
    return value


def total_objective(terms: Mapping[str, object], cfg) -> tuple:
    """Weighted generator and critic totals.

    ``terms`` maps ``gan_g``/``gan_d`` (a scalar or a sequence, summed) and
    the constraint names to values; tensors and floats both work. ``cfg``
    provides ``constraints`` and the weights ``lambda_geo``, ``lambda_cyc``,
    ``lambda_dist`` and ``lambda_idt``. Disabled constraints are skipped,
    so they contribute exactly zero even if their entry is NaN.
    """
    weights = {
        "geo": cfg.lambda_geo,
        "cycle": cfg.lambda_cyc,
        "distance": cfg.lambda_dist,
        "identity": cfg.lambda_idt,
    }
    total_g = _sum(terms.get("gan_g", 0.0))
    for name in CONSTRAINTS:
        if name in cfg.constraints and name in terms:
            total_g = total_g + weights[name] * terms[name]
    total_d = _sum(terms.get("gan_d", 0.0))
    return total_g, total_d
