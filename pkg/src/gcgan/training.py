"""Alternating generator/critic optimization with Adam."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, save_checkpoint
from .data import Augment, DatasetError, load_unpaired, precompute_distance_stats
from .losses import (
    CONSTRAINTS,
    DistanceStats,
    LossReport,
    adversarial_loss_d,
    adversarial_loss_g,
    distance_loss_from_outputs,
    geometry_terms,
    l1,
    total_objective,
)
from .models import DiscriminatorSpec, GeneratorSpec, TranslationModel, build_model
from .transforms import GeoTransform, apply_transform, parse_pool, sample_transform

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "gan_g", "gan_d", "geo", "cycle", "distance", "identity", "total_g")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, step=None, x_index=None, y_index=None):
        super().__init__(message)
        self.step = step
        self.x_index = x_index
        self.y_index = y_index


@dataclass
class TrainConfig:
    dir_x: str = ""
    dir_y: str = ""
    out_dir: str = "runs/gcgan"
    constraints: Tuple[str, ...] = ("geo", "identity")
    transforms: Tuple[str, ...] = ("rot90cw",)
    sharing: str = "shared"
    lambda_geo: float = 20.0
    lambda_cyc: float = 10.0
    lambda_dist: float = 1.0
    lambda_idt: float = 5.0
    identity_on_transformed: Optional[bool] = None
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs_const: int = 100
    epochs_decay: int = 100
    max_steps: Optional[int] = None
    buffer_capacity: int = 50
    batch_size: int = 1
    resolution: Tuple[int, int] = (256, 256)
    channels: int = 3
    arch: str = "auto"
    base_width: int = 64
    n_resblocks: Optional[int] = None
    disc_base_width: int = 64
    seed: int = 0
    augment: bool = False
    load_size: int = 286
    max_pairs: int = 10000
    checkpoint_every: int = 0
    workers: int = 0
    resume: Optional[str] = None

    def __post_init__(self):
        self.constraints = _as_tuple(self.constraints)
        self.transforms = tuple(t.value for t in parse_pool(_as_tuple(self.transforms)))
        if isinstance(self.resolution, (int, str)):
            self.resolution = parse_resolution(self.resolution)
        self.resolution = tuple(int(v) for v in self.resolution)

    @property
    def total_epochs(self) -> int:
        return self.epochs_const + self.epochs_decay

    @property
    def pool(self) -> Tuple[GeoTransform, ...]:
        return parse_pool(self.transforms)

    def validate(self, check_paths: bool = False) -> "TrainConfig":
        unknown = set(self.constraints) - set(CONSTRAINTS)
        if unknown:
            raise ConfigError(f"unknown constraints {sorted(unknown)}; choose from {list(CONSTRAINTS)}")
        if "geo" not in self.constraints and not set(self.constraints) <= {"identity"}:
            raise ConfigError("a run without 'geo' is only allowed as the GAN-alone baseline (identity at most)")
        for name in ("lambda_geo", "lambda_cyc", "lambda_dist", "lambda_idt", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.sharing not in ("shared", "separate"):
            raise ConfigError(f"sharing must be 'shared' or 'separate', got {self.sharing!r}")
        if not self.transforms:
            raise ConfigError("transform pool is empty")
        h, w = self.resolution
        if h != w and any(t.swaps_axes for t in self.pool):
            raise ConfigError(f"transforms {list(self.transforms)} swap height and width; resolution {h}x{w} must be square")
        if self.epochs_const < 0 or self.epochs_decay < 0 or self.total_epochs == 0:
            raise ConfigError("need at least one epoch")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.buffer_capacity < 0:
            raise ConfigError("buffer_capacity must be non-negative")
        self.generator_spec()
        if check_paths:
            for key in ("dir_x", "dir_y"):
                path = getattr(self, key)
                if not path or not Path(path).is_dir():
                    raise ConfigError(f"{key}: dataset directory {path!r} does not exist")
        return self

    def generator_spec(self) -> GeneratorSpec:
        kw = dict(base_width=self.base_width)
        if self.n_resblocks is not None:
            kw["n_resblocks"] = self.n_resblocks
        if self.arch != "auto":
            kw["arch"] = self.arch
        try:
            return GeneratorSpec.for_resolution(min(self.resolution), self.channels, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def discriminator_spec(self) -> DiscriminatorSpec:
        w = self.disc_base_width
        return DiscriminatorSpec(input_channels=self.channels, widths=(w, 2 * w, 4 * w, 8 * w))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["constraints"] = list(self.constraints)
        d["transforms"] = list(self.transforms)
        d["resolution"] = list(self.resolution)
        return d

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _as_tuple(value) -> tuple:
    if isinstance(value, str):
        return tuple(v for v in value.replace(" ", "").split(",") if v)
    return tuple(value)


def parse_resolution(value) -> Tuple[int, int]:
    if isinstance(value, int):
        return value, value
    text = str(value).lower().strip()
    if "x" in text:
        h, w = text.split("x")
        return int(h), int(w)
    return int(text), int(text)


def _coerce(name: str, raw: str):
    f = {f.name: f for f in fields(TrainConfig)}[name]
    text = raw.strip()
    if name in ("constraints", "transforms"):
        return _as_tuple(text)
    if name == "resolution":
        return parse_resolution(text)
    if text.lower() in ("none", "null", ""):
        return None
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if "bool" in kind:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None) -> TrainConfig:
    """Read a flat ``key = value`` file; ``overrides`` win over file values.

    Blank lines and ``#`` comments are ignored. Keys are TrainConfig field
    names.
    """
    values = {}
    known = {f.name for f in fields(TrainConfig)}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                key, _, raw = line.partition(":")
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if isinstance(value, str) and key not in ("dir_x", "dir_y", "out_dir", "resume", "sharing", "arch"):
            value = _coerce(key, value)
        values[key] = value
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant for ``epochs_const`` epochs, then linear decay to zero."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.epochs_const:
        return cfg.lr
    return cfg.lr * (1.0 - (epoch - cfg.epochs_const + 1) / cfg.epochs_decay)


class ImageBuffer:
    """Fixed-size history of generated images for critic updates."""

    def __init__(self, capacity: int = 50, seed: Union[int, np.random.Generator] = 0):
        self.capacity = capacity
        self.images: List[torch.Tensor] = []
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.images)

    def query_one(self, img: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return img
        if len(self.images) < self.capacity:
            self.images.append(img.clone())
            return img
        if self.rng.random() < 0.5:
            idx = int(self.rng.integers(self.capacity))
            old = self.images[idx]
            self.images[idx] = img.clone()
            return old
        return img

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        """Apply :meth:`query_one` to each image of a ``(B, ...)`` batch."""
        return torch.stack([self.query_one(img) for img in batch.detach()])

    def state(self) -> Tuple[dict, Optional[np.ndarray]]:
        imgs = np.stack([i.cpu().numpy() for i in self.images]) if self.images else None
        return self.rng.bit_generator.state, imgs

    def restore(self, rng_state: dict, images: Optional[np.ndarray]) -> None:
        self.rng.bit_generator.state = rng_state
        self.images = [torch.from_numpy(np.array(a)) for a in images] if images is not None else []


def buffer_query(buf: ImageBuffer, img: torch.Tensor) -> torch.Tensor:
    return buf.query_one(img)


def _rng_state_json(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


class Trainer:
    """Owns the networks, optimizers, buffers and RNG of one run."""

    def __init__(self, cfg: TrainConfig, stats: Optional[DistanceStats] = None):
        cfg.validate()
        if "distance" in cfg.constraints and stats is None:
            raise ConfigError("the distance constraint needs precomputed DistanceStats")
        self.cfg = cfg
        self.stats = stats
        self.pool = cfg.pool
        self.model: TranslationModel = build_model(
            cfg.generator_spec(),
            cfg.discriminator_spec(),
            sharing=cfg.sharing,
            with_inverse="cycle" in cfg.constraints,
            seed=cfg.seed,
        )
        betas = (cfg.beta1, cfg.beta2)
        g_params = [p for g in self.model.generators().values() for p in g.parameters()]
        self.optimizers: Dict[str, torch.optim.Optimizer] = {}
        if g_params:
            self.optimizers["g"] = torch.optim.Adam(g_params, lr=cfg.lr, betas=betas)
        for name, d in self.model.discriminators().items():
            self.optimizers[name] = torch.optim.Adam(d.parameters(), lr=cfg.lr, betas=betas)
        self.buffers = {
            name: ImageBuffer(cfg.buffer_capacity, np.random.default_rng([cfg.seed, 100 + i]))
            for i, name in enumerate(self.model.discriminators())
        }
        self.rng = np.random.default_rng([cfg.seed, 7])
        self.step = 0
        self.epoch = 0
        self.final_checkpoint: Optional[Path] = None
        if cfg.identity_on_transformed is None:
            self.idt_transformed = cfg.sharing == "separate"
        else:
            self.idt_transformed = cfg.identity_on_transformed

    # -- optimization -------------------------------------------------

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr

    def _set_requires_grad(self, nets, flag: bool) -> None:
        for net in nets:
            for p in net.parameters():
                p.requires_grad_(flag)

    def generator_terms(self, x, y, f, x_next=None) -> Tuple[dict, dict]:
        """Forward pass of every enabled generator-side term.

        Returns the loss terms and the fakes needed by the critics.
        """
        m, cons = self.model, self.cfg.constraints
        x_t, y_t = apply_transform(f, x), apply_transform(f, y)
        fake_y = m.g_xy(x)
        fake_yt = m.g_xtyt(x_t)
        gan_g = [adversarial_loss_g(m.d_y(fake_y)), adversarial_loss_g(m.d_yt(fake_yt))]
        terms = {}
        fakes = {"d_y": (y, fake_y), "d_yt": (y_t, fake_yt)}
        if "geo" in cons:
            back, fwd = geometry_terms(fake_y, fake_yt, f)
            terms["geo"] = back + fwd
        if "identity" in cons:
            idt = l1(m.g_xy(y), y)
            if self.idt_transformed and m.sharing == "separate":
                idt = idt + l1(m.g_xtyt(y_t), y_t)
            terms["identity"] = idt
        if "cycle" in cons:
            fake_x = m.g_yx(y)
            gan_g.append(adversarial_loss_g(m.d_x(fake_x)))
            terms["cycle"] = l1(m.g_yx(fake_y), x) + l1(m.g_xy(fake_x), y)
            if "identity" in cons:
                terms["identity"] = terms["identity"] + l1(m.g_yx(x), x)
            fakes["d_x"] = (x, fake_x)
        if "distance" in cons:
            if x_next is None:
                raise ConfigError("distance constraint needs paired X samples")
            terms["distance"] = distance_loss_from_outputs(x, x_next, fake_y, m.g_xy(x_next), self.stats)
        terms["gan_g"] = gan_g
        return terms, fakes

    def train_step(self, batch) -> LossReport:
        cfg = self.cfg
        x = torch.as_tensor(batch.x)
        y = torch.as_tensor(batch.y)
        x_next = torch.as_tensor(batch.x_next) if batch.x_next is not None else None
        f = sample_transform(self.pool, self.rng)
        discs = self.model.discriminators()

        # generator update, critics frozen
        self._set_requires_grad(discs.values(), False)
        terms, fakes = self.generator_terms(x, y, f, x_next)
        total_g, _ = total_objective(terms, cfg)
        self._check_finite(total_g, "generator", batch)
        if "g" in self.optimizers:
            self.optimizers["g"].zero_grad(set_to_none=True)
            total_g.backward()
            self.optimizers["g"].step()
        self._set_requires_grad(discs.values(), True)

        # critic updates on buffered fakes
        gan_d = []
        for name, d in discs.items():
            real, fake = fakes[name]
            fake = self.buffers[name].query(fake.detach())
            loss_d = adversarial_loss_d(d(real), d(fake))
            self._check_finite(loss_d, name, batch)
            self.optimizers[name].zero_grad(set_to_none=True)
            loss_d.backward()
            self.optimizers[name].step()
            gan_d.append(loss_d.detach())

        report = LossReport(
            gan_g=float(sum(t.detach() for t in terms["gan_g"])),
            gan_d=float(sum(gan_d)),
            total_g=float(total_g.detach()),
        )
        for name in CONSTRAINTS:
            if name in terms:
                setattr(report, name, float(terms[name].detach()))
        self.step += 1
        return report

    def _check_finite(self, value: torch.Tensor, what: str, batch) -> None:
        if torch.isfinite(value).all():
            return
        msg = (
            f"non-finite {what} loss at step {self.step}: "
            f"x_index={list(batch.x_index)} y_index={list(batch.y_index)}"
        )
        out = Path(self.cfg.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "nonfinite_batch.json").write_text(json.dumps(
                {"step": self.step, "what": what, "x_index": list(batch.x_index), "y_index": list(batch.y_index)}
            ))
        except OSError:
            pass
        raise NonFiniteLossError(msg, self.step, list(batch.x_index), list(batch.y_index))

    # -- evaluation ----------------------------------------------------

    @torch.no_grad()
    def equivariance_residual(self, x: torch.Tensor, f: Union[str, GeoTransform] = GeoTransform.ROT90CW) -> float:
        """mean |f(G_xy(x)) - G_xtyt(f(x))| over a batch of sources."""
        f = GeoTransform.parse(f)
        m = self.model
        return float(l1(apply_transform(f, m.g_xy(x)), m.g_xtyt(apply_transform(f, x))))

    # -- persistence ---------------------------------------------------

    def networks(self) -> dict:
        return self.model.modules()

    def save(self, path) -> Path:
        arrays = {}
        buffer_states = {}
        for name, buf in self.buffers.items():
            rng_state, imgs = buf.state()
            buffer_states[name] = rng_state
            if imgs is not None:
                arrays[f"buffer_{name}"] = imgs
        meta = {
            "library_version": __version__,
            "generator_spec": self.cfg.generator_spec().to_dict(),
            "discriminator_spec": self.cfg.discriminator_spec().to_dict(),
            "sharing_mode": self.model.sharing,
            "epoch": self.epoch,
            "step": self.step,
            # run-location keys stay out so identical runs give identical bytes
            "config": {k: v for k, v in self.cfg.to_dict().items() if k not in ("out_dir", "resume")},
            "rng": _rng_state_json(self.rng),
            "buffers": json.loads(json.dumps(buffer_states)),
            "distance_stats": dataclasses.asdict(self.stats) if self.stats else None,
        }
        return save_checkpoint(path, meta, self.networks(), self.optimizers, arrays)

    def load(self, path) -> "Trainer":
        ckpt = Checkpoint(path)
        meta = ckpt.meta
        if meta["sharing_mode"] != self.model.sharing:
            raise CheckpointError(f"{path}: sharing mode {meta['sharing_mode']!r} does not match config")
        for name, net in self.networks().items():
            ckpt.load_network(name, net)
        for name, opt in self.optimizers.items():
            ckpt.load_optimizer(name, opt)
        for name, buf in self.buffers.items():
            buf.restore(meta["buffers"][name], ckpt.array(f"buffer_{name}"))
        self.rng.bit_generator.state = meta["rng"]
        self.epoch = int(meta["epoch"])
        self.step = int(meta["step"])
        return self


def _write_rows(path: Path, rows: Sequence[dict], append: bool) -> None:
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_log(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def fit(cfg: TrainConfig, on_step=None) -> Trainer:
    """Run a full training job and return the trainer.

    The final checkpoint path is ``trainer.final_checkpoint``. Writes ``train_log.csv``, ``epoch_NNNN.ckpt`` every
    ``checkpoint_every`` epochs, and ``final.ckpt``. With ``cfg.resume``
    set, state is restored from that checkpoint and training continues at
    the next epoch; log rows past the checkpoint's step are dropped.
    """
    cfg.validate(check_paths=True)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    augment = Augment.standard(cfg.load_size) if cfg.augment else None
    try:
        dataset = load_unpaired(cfg.dir_x, cfg.dir_y, cfg.resolution, cfg.seed, augment, cfg.channels, cfg.workers)
    except DatasetError as exc:
        raise ConfigError(str(exc)) from exc
    log.info("dataset sizes: X=%d Y=%d", *dataset.sizes)

    stats = None
    if "distance" in cfg.constraints:
        if cfg.resume:
            saved = Checkpoint(cfg.resume).meta.get("distance_stats")
            stats = DistanceStats(**saved) if saved else None
        if stats is None:
            stats = precompute_distance_stats(dataset, cfg.max_pairs, cfg.seed)
        stats.save(out / "distance_stats.txt")

    trainer = Trainer(cfg, stats)
    log_path = out / "train_log.csv"
    append = False
    if cfg.resume:
        trainer.load(cfg.resume)
        prior = Path(cfg.resume).parent / "train_log.csv"
        if prior.exists():
            rows = [r for r in read_log(prior) if r["step"] < trainer.step]
            _write_rows(log_path, rows, append=False)
            append = True

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    with_next = "distance" in cfg.constraints
    done = False
    for epoch in range(trainer.epoch, cfg.total_epochs):
        lr = lr_at(epoch, cfg)
        trainer.set_lr(lr)
        rows = []
        for batch in dataset.batches(epoch, cfg.batch_size, with_next=with_next):
            step = trainer.step
            report = trainer.train_step(batch)
            row = {"step": step, "epoch": epoch, "lr": lr, **report.as_dict()}
            rows.append(row)
            if on_step is not None:
                on_step(trainer, row)
            if cfg.max_steps is not None and trainer.step >= cfg.max_steps:
                done = True
                break
        _write_rows(log_path, rows, append)
        append = True
        trainer.epoch = epoch + 1
        if cfg.checkpoint_every and trainer.epoch % cfg.checkpoint_every == 0 and not done:
            trainer.save(out / f"epoch_{trainer.epoch:04d}.ckpt")
        log.info("epoch %d done (step %d, lr %.3g)", epoch, trainer.step, lr)
        if done:
            break
    trainer.final_checkpoint = trainer.save(out / "final.ckpt")
    return trainer


def train(cfg: TrainConfig) -> Path:
    """Train per ``cfg`` and return the final checkpoint path."""
    return fit(cfg).final_checkpoint
