"""Adversarial training loop, learning-rate schedule and checkpoints.

Each step makes one discriminator update followed by one generator update.
Every source of randomness is derived from ``(seed, epoch)`` or
``(seed, step)``, so a resumed run replays exactly what an uninterrupted
run would have done.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .conditioning import VOCAB, concat_condition, sample_target_batch, with_rec
from .data import DatasetManifest, XdogParams, xdog_sketch
from .layers import FadeInState, validate_schedule
from .networks import NetworkBundle, build_bundle, select_taps

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
PROGRESS_COLUMNS = ["step", "epoch", "resolution", "alpha", "lr", "seconds"]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, terms: dict[str, float], dump_path: Path | None = None):
        bad = [k for k, v in terms.items() if not math.isfinite(v)]
        msg = f"non-finite loss at step {step}: {', '.join(bad)}"
        if dump_path is not None:
            msg += f" (diagnostics in {dump_path})"
        super().__init__(msg)
        self.step, self.terms, self.bad_terms = step, terms, bad


class ConfigMismatchError(ValueError):
    def __init__(self, field_name: str, saved, requested):
        super().__init__(f"checkpoint config mismatch on {field_name!r}: checkpoint has {saved!r}, run has {requested!r}")
        self.field = field_name


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs_flat: int = 10
    epochs_decay: int = 10
    base_lr: float = 1e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    fade_schedule: tuple = ((16, 500), (32, 700), (64, 800))
    fade_fraction: float = 0.5
    seed: int = 0
    num_critics: int = 1
    widths: tuple = (32, 64, 128)
    taps: tuple | None = None
    grad_clip: float = 10.0  # 0 disables
    checkpoint_every: int = 500
    augment: float = 0.0  # per-axis scale jitter for photo/sketch pairs; 0 disables
    xdog: XdogParams = field(default_factory=XdogParams)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if isinstance(self.xdog, dict):
            self.xdog = XdogParams(**self.xdog)
        self.fade_schedule = tuple(validate_schedule(self.fade_schedule))
        self.widths = tuple(int(w) for w in self.widths)
        if self.taps is not None:
            self.taps = tuple(int(t) for t in self.taps)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (minibatch stddev)")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if self.epochs_flat < 0 or self.epochs_decay < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.num_critics < 1:
            raise ValueError("num_critics must be >= 1")
        if not 0.0 <= self.augment < 0.5:
            raise ValueError("augment must be in [0, 0.5)")

    @property
    def total_steps(self) -> int:
        return sum(s for _, s in self.fade_schedule)

    @property
    def max_resolution(self) -> int:
        return self.fade_schedule[-1][0]

    @property
    def base_resolution(self) -> int:
        return self.fade_schedule[0][0]

    def snapshot(self) -> dict:
        d = asdict(self)
        d["fade_schedule"] = [list(s) for s in self.fade_schedule]
        d["widths"] = list(self.widths)
        d["taps"] = None if self.taps is None else list(self.taps)
        return d

    @classmethod
    def from_snapshot(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# fields a resumed run may change
RESUMABLE_FIELDS = {"checkpoint_every"}


def toy_config(**overrides) -> TrainConfig:
    """Settings for the 200-image, 2,000-step toy run.

    Same optimiser and schedule shape as the full-scale defaults, but with a
    learning rate and epoch counts sized for 20 steps per epoch, and geometric
    augmentation so 40 training identities do not get memorised.
    """
    cfg = TrainConfig(base_lr=2e-4, epochs_flat=60, epochs_decay=40, augment=0.1)
    return replace(cfg, **overrides)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Flat at ``base_lr`` for ``epochs_flat`` epochs, then linear to 0 over ``epochs_decay``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < config.epochs_flat:
        return config.base_lr
    if config.epochs_decay == 0:
        return 0.0
    frac = (epoch - config.epochs_flat) / config.epochs_decay
    return config.base_lr * max(0.0, 1.0 - frac)


@dataclass
class TrainStats:
    step: int
    losses: dict[str, float]
    lr: float
    alpha: float
    resolution: int
    epoch: int = 0
    seconds: float = 0.0

    def log_row(self) -> dict[str, str]:
        row = {"step": str(self.step)}
        for k in L.LOG_COLUMNS[1:]:
            row[k] = repr(float(self.losses[k]))
        return row


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


def _downsample(x: torch.Tensor, resolution: int) -> torch.Tensor:
    factor = x.shape[-1] // resolution
    return x if factor == 1 else F.avg_pool2d(x, factor)


class Trainer:
    """Owns the networks, optimisers and step counter of one run."""

    def __init__(self, config: TrainConfig, bundle: NetworkBundle | None = None, extractors=None):
        self.config = config
        if bundle is None:
            P, Phi = extractors if extractors is not None else (None, None)
            bundle = build_bundle(
                widths=config.widths,
                max_resolution=config.max_resolution,
                base_resolution=config.base_resolution,
                num_critics=config.num_critics,
                epsilon=config.weights.pixelnorm_eps,
                taps=config.taps,
                perceptual=P,
                identity=Phi,
                seed=config.seed,
            )
        self.bundle = bundle
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_G = torch.optim.Adam(bundle.generator_parameters(), lr=config.base_lr, betas=betas)
        self.opt_D = torch.optim.Adam(bundle.discriminator_parameters(), lr=config.base_lr, betas=betas)
        self.fade = FadeInState(config.base_resolution, 1.0, list(config.fade_schedule), config.fade_fraction)
        self.step = 0
        self.dump_dir: Path | None = None

    # ------------------------------------------------------------------
    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_G, self.opt_D):
            for group in opt.param_groups:
                group["lr"] = lr

    def train_step(self, photos, sketches, attrs, subject_ids=None, fade: FadeInState | None = None,
                   target_rng: np.random.Generator | None = None) -> TrainStats:
        """One discriminator update then one generator update on a batch.

        ``photos``/``sketches`` must already be at ``fade.current_resolution``.
        """
        t0 = time.perf_counter()
        cfg, b = self.config, self.bundle
        w = cfg.weights
        fade = fade if fade is not None else self.fade.at_step(self.step)
        x = torch.as_tensor(photos)
        y = torch.as_tensor(sketches)
        if x.shape[0] != y.shape[0] or x.shape[0] != len(attrs):
            raise ValueError("photos, sketches and attrs must have the same batch size")
        c = with_rec(attrs, 1)
        rng = target_rng if target_rng is not None else np.random.default_rng([cfg.seed, self.step, 1])
        c_t = sample_target_batch(c, rng)

        # generator passes (graph kept for the G update)
        x_same, taps_fake = b.G_x(concat_condition(y, c), fade, return_taps=True)
        x_trans = b.G_x(concat_condition(y, c_t), fade)
        y_fake = b.G_y(concat_condition(x, c), fade)
        x_cyc = b.G_x(concat_condition(y_fake, c), fade)
        y_cyc = b.G_y(concat_condition(x_trans, c_t), fade)

        # discriminator update
        d_params = b.discriminator_parameters()
        _set_requires_grad(d_params, True)
        adv_d = 0.0
        cls_r = 0.0
        for Dx, Dy in zip(b.D_x, b.D_y):
            real_score, real_logits = Dx(x, fade)
            fake_score, _ = Dx(x_trans.detach(), fade)
            adv_d = adv_d + L.adversarial_loss_D(real_score, fake_score)
            real_score_y, _ = Dy(y, fade)
            fake_score_y, _ = Dy(y_fake.detach(), fade)
            adv_d = adv_d + L.adversarial_loss_D(real_score_y, fake_score_y)
            cls_r = cls_r + L.cls_loss_real(real_logits, c) / len(b.D_x)
        total_d = L.total_loss_D({"adv_d": adv_d, "cls_r": cls_r}, w)
        self._check_finite({"adv_d": adv_d, "cls_r": cls_r, "total_d": total_d})
        self.opt_D.zero_grad(set_to_none=True)
        total_d.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(d_params, cfg.grad_clip)
        self.opt_D.step()

        # generator update against the updated critics
        _set_requires_grad(d_params, False)
        adv_g = 0.0
        cls_f = 0.0
        for Dx, Dy in zip(b.D_x, b.D_y):
            score, logits = Dx(x_trans, fade)
            adv_g = adv_g + L.adversarial_loss_G(score)
            adv_g = adv_g + L.adversarial_loss_G(Dy(y_fake, fade)[0])
            cls_f = cls_f + L.cls_loss_fake(logits, c_t) / len(b.D_x)

        with torch.no_grad():
            p_x, p_y = b.P.taps(x), b.P.taps(y)
            z_x = b.Phi(x)
        rec = L.content_loss(p_x, b.P.taps(x_cyc)) + L.content_loss(p_y, b.P.taps(y_cyc))
        p_same, p_yfake = b.P.taps(x_same), b.P.taps(y_fake)
        content = L.content_loss(p_x, p_same) + L.content_loss(p_y, p_yfake)
        style = L.style_loss(p_x, p_same) + L.style_loss(p_y, p_yfake)
        cont = L.contrastive_loss(L.identity_pairs(z_x, b.Phi(x_same), subject_ids), margin=w.margin_m)
        id_f = L.contrastive_loss(L.identity_pairs(z_x, b.Phi(x_trans), subject_ids), margin=w.margin_m)
        level = b.G_x.level_of(fade.current_resolution)
        taps_real = b.E_x(concat_condition(x, c), fade)
        quality = L.quality_feature_loss(taps_real, select_taps(taps_fake, level, b.E_x.taps))

        terms = {
            "adv_g": adv_g, "rec": rec, "cont": cont, "style": style, "content": content,
            "quality": quality, "cls_f": cls_f, "id_f": id_f,
        }
        total_g = L.total_loss_G(terms, w)
        self._check_finite({**terms, "total_g": total_g})
        self.opt_G.zero_grad(set_to_none=True)
        total_g.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(b.generator_parameters(), cfg.grad_clip)
        self.opt_G.step()
        _set_requires_grad(d_params, True)

        self.step += 1
        values = {k: _scalar(v) for k, v in terms.items()}
        values.update(adv_d=_scalar(adv_d), cls_r=_scalar(cls_r), total_g=_scalar(total_g), total_d=_scalar(total_d))
        return TrainStats(
            step=self.step,
            losses=values,
            lr=self.opt_G.param_groups[0]["lr"],
            alpha=fade.alpha,
            resolution=fade.current_resolution,
            seconds=time.perf_counter() - t0,
        )

    def _check_finite(self, terms: dict) -> None:
        values = {k: _scalar(v) for k, v in terms.items()}
        if all(math.isfinite(v) for v in values.values()):
            return
        dump = None
        if self.dump_dir is not None:
            dump = Path(self.dump_dir) / f"nonfinite_step{self.step + 1:06d}.json"
            dump.write_text(json.dumps({k: repr(v) for k, v in values.items()}, indent=2))
        raise NonFiniteLossError(self.step + 1, values, dump)

    # ------------------------------------------------------------------
    def save(self, directory: str | Path) -> Path:
        """Write one parameter file per network plus ``index.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, module in self.bundle.modules().items():
            fname = f"{name}.pt"
            torch.save(module.state_dict(), directory / fname)
            files[name] = {"file": fname, "shapes": {k: list(v.shape) for k, v in module.state_dict().items()}}
        torch.save({"G": self.opt_G.state_dict(), "D": self.opt_D.state_dict()}, directory / "optim.pt")
        fade = self.fade.at_step(max(self.step - 1, 0))
        index = {
            "format": CHECKPOINT_FORMAT,
            "step": self.step,
            "resolution": fade.current_resolution,
            "alpha": fade.alpha,
            "vocabulary": list(VOCAB),
            "loss_terms": L.TERM_MAP,
            "config": self.config.snapshot(),
            "networks": files,
            "frozen_hashes": self.bundle.frozen_hashes(),
        }
        (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory: str | Path, config: TrainConfig | None = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint, validating shapes and (optionally) config."""
        directory = Path(directory)
        index_path = directory / "index.json"
        if not index_path.exists():
            raise FileNotFoundError(f"not a checkpoint directory: {directory}")
        index = json.loads(index_path.read_text())
        saved = TrainConfig.from_snapshot(index["config"])
        if config is not None:
            check_compatible(saved, config)
        else:
            config = saved
        if list(index["vocabulary"]) != list(VOCAB):
            raise ConfigMismatchError("vocabulary", index["vocabulary"], list(VOCAB))
        trainer = cls(config)
        for name, module in trainer.bundle.modules().items():
            entry = index["networks"][name]
            state = torch.load(directory / entry["file"], map_location="cpu", weights_only=True)
            expected = module.state_dict()
            for key, tensor in state.items():
                if key not in expected or tuple(expected[key].shape) != tuple(tensor.shape):
                    raise ConfigMismatchError(f"{name}.{key}", list(tensor.shape), list(expected.get(key, torch.empty(0)).shape))
            module.load_state_dict(state)
        optim = torch.load(directory / "optim.pt", map_location="cpu", weights_only=True)
        trainer.opt_G.load_state_dict(optim["G"])
        trainer.opt_D.load_state_dict(optim["D"])
        trainer.step = int(index["step"])
        return trainer


def check_compatible(saved: TrainConfig, requested: TrainConfig) -> None:
    a, b = saved.snapshot(), requested.snapshot()
    for f in fields(TrainConfig):
        if f.name in RESUMABLE_FIELDS:
            continue
        if a[f.name] != b[f.name]:
            if isinstance(a[f.name], dict):
                for k in a[f.name]:
                    if a[f.name][k] != b[f.name].get(k):
                        raise ConfigMismatchError(f"{f.name}.{k}", a[f.name][k], b[f.name].get(k))
            raise ConfigMismatchError(f.name, a[f.name], b[f.name])


# --------------------------------------------------------------------------
# full runs


def load_training_data(manifest: DatasetManifest, config: TrainConfig, split: str = "train"):
    """Photos, sketches (XDoG on the fly if the manifest has none), attrs and ids."""
    res = config.max_resolution
    photos, sketches, attrs, ids = manifest.load_arrays(split, (res, res))
    if sketches is None:
        sketches = xdog_sketch(photos, config.xdog)
    return (torch.from_numpy(photos), torch.from_numpy(sketches), attrs, ids)


def _truncate_csv(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= last_step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


def _append_csv(path: Path, columns: list[str], row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow(row)


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    pointer = Path(out_dir) / "checkpoints" / "latest"
    if not pointer.exists():
        return None
    return Path(out_dir) / "checkpoints" / pointer.read_text().strip()


def augment_pairs(photos: torch.Tensor, sketches: torch.Tensor, strength: float, rng: np.random.Generator):
    """Warp each photo and its sketch by the same random axis-aligned affine map.

    Per-axis scale is drawn from ``1 +- strength`` and the shift from
    ``+- strength / 2`` (in half-widths); borders are replicated.
    """
    n = photos.shape[0]
    scale = rng.uniform(1 - strength, 1 + strength, size=(n, 2))
    shift = rng.uniform(-strength / 2, strength / 2, size=(n, 2))
    theta = torch.zeros(n, 2, 3, dtype=photos.dtype)
    theta[:, 0, 0] = torch.from_numpy(scale[:, 0])
    theta[:, 1, 1] = torch.from_numpy(scale[:, 1])
    theta[:, :, 2] = torch.from_numpy(shift)
    grid = F.affine_grid(theta, list(photos.shape), align_corners=False)
    warp = lambda t: F.grid_sample(t, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return warp(photos), warp(sketches)


def fit(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: str | Path,
    resume: bool = False,
    max_steps: int | None = None,
    extractors=None,
    data=None,
) -> Path:
    """Train to the end of the fade schedule (or ``max_steps``); returns the final checkpoint.

    Logs go to ``train_log.csv`` (loss terms) and ``progress.csv`` (schedule).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    photos, sketches, attrs, ids = data if data is not None else load_training_data(manifest, config)
    n = len(photos)
    if n < config.batch_size:
        raise ValueError(f"training split has {n} images, fewer than batch_size {config.batch_size}")
    steps_per_epoch = n // config.batch_size

    ckpt = latest_checkpoint(out_dir) if resume else None
    if ckpt is not None:
        trainer = Trainer.load(ckpt, config)
        log.info("resuming from %s at step %d", ckpt, trainer.step)
    else:
        if extractors is None:
            from .extractors import load_pretrained

            extractors = load_pretrained()
        trainer = Trainer(config, extractors=extractors)
        for name in ("train_log.csv", "progress.csv"):
            (out_dir / name).unlink(missing_ok=True)
    trainer.dump_dir = out_dir
    _truncate_csv(out_dir / "train_log.csv", trainer.step)
    _truncate_csv(out_dir / "progress.csv", trainer.step)

    end = config.total_steps if max_steps is None else min(config.total_steps, max_steps)
    ckpt_root = out_dir / "checkpoints"
    last_saved = None
    perm, perm_epoch = None, -1
    while trainer.step < end:
        step = trainer.step
        epoch = step // steps_per_epoch
        if epoch != perm_epoch:
            perm = np.random.default_rng([config.seed, epoch]).permutation(n)
            perm_epoch = epoch
        offset = (step % steps_per_epoch) * config.batch_size
        idx = torch.from_numpy(perm[offset : offset + config.batch_size])
        fade = trainer.fade.at_step(step)
        res = fade.current_resolution
        trainer.set_lr(lr_schedule(epoch, config))
        x, y = photos[idx], sketches[idx]
        if config.augment > 0:
            x, y = augment_pairs(x, y, config.augment, np.random.default_rng([config.seed, step, 2]))
        stats = trainer.train_step(
            _downsample(x, res), _downsample(y, res),
            attrs[idx.numpy()], ids[idx.numpy()], fade=fade,
        )
        stats.epoch = epoch
        _append_csv(out_dir / "train_log.csv", L.LOG_COLUMNS, stats.log_row())
        _append_csv(out_dir / "progress.csv", PROGRESS_COLUMNS, {
            "step": stats.step, "epoch": epoch, "resolution": res,
            "alpha": repr(stats.alpha), "lr": repr(stats.lr), "seconds": f"{stats.seconds:.4f}",
        })
        if trainer.step % config.checkpoint_every == 0 or trainer.step == end:
            last_saved = save_checkpoint(trainer, ckpt_root)
        if trainer.step % 100 == 0:
            log.info("step %d res %d alpha %.2f total_g %.4f total_d %.4f",
                     trainer.step, res, stats.alpha, stats.losses["total_g"], stats.losses["total_d"])
    if last_saved is None:
        last_saved = save_checkpoint(trainer, ckpt_root)
    return last_saved


def save_checkpoint(trainer: Trainer, root: Path) -> Path:
    name = f"step_{trainer.step:06d}"
    path = trainer.save(Path(root) / name)
    (Path(root) / "latest").write_text(name + "\n")
    return path
