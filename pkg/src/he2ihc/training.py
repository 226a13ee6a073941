"""Adversarial training orchestration: alternating updates, linear LR decay,
checkpointing with exact resumption, and ablation-flag wiring."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import (
    DatasetManifest,
    MagnificationPolicy,
    MagnificationSample,
    SuperResolver,
    sample_at,
)
from .discriminator import PatchDiscriminator
from .errors import ConfigError, DataError, NumericError
from .generator import (
    GeneratorConfig,
    PatchProjectionHead,
    TranslationGenerator,
    extract_patch_embeddings,
    init_weights,
)
from .images import ImageTile, StainDomain, load_tile, save_tile, tensor_to_pixels, tile_to_tensor
from .losses import (
    LossWeights,
    PyramidSpec,
    WeightSchedule,
    adaptive_patch_nce_loss,
    adversarial_loss,
    gaussian_pyramid_loss,
    patch_nce_loss,
    total_generator_loss,
)
from .metrics import config_digest

CHECKPOINT_FORMAT_VERSION = 1
LOG_COLUMNS = ("iteration", "lr", "d_loss", "adv", "patch_nce", "asp", "gp", "total")

_LOCATION_STREAM_KEY = 41_2357  # distinguishes patch-location seeds from data-stream seeds


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; serializable to/from a single YAML file."""

    iterations: int = 500
    batch_size: int = 1
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    unified_size: int = 512
    base_channels: int = 64
    n_resblocks: int = 6
    n_patches: int = 256
    temperature: float = 0.07
    ramp_fraction: float = 0.5
    weights: LossWeights = LossWeights()
    policy: MagnificationPolicy = MagnificationPolicy()
    pyramid: PyramidSpec = PyramidSpec()
    use_attention: bool = True
    use_multimag: bool = True
    data_root: str = ""
    out_dir: str = "runs/default"
    checkpoint_every: int = 100
    checkpoint_at: tuple[int, ...] = ()
    log_every: int = 1

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.unified_size < 32 or self.unified_size % 16:
            raise ConfigError(
                "unified_size must be >= 32 and divisible by 16 so every branch stays tile-legal"
            )
        if self.n_patches < 2:
            raise ConfigError("n_patches must be >= 2 (contrastive losses need negatives)")

    # -- derived pieces ----------------------------------------------------

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            base_channels=self.base_channels,
            n_resblocks=self.n_resblocks,
            attention_levels=(1, 2) if self.use_attention else (),
        )

    def schedule(self) -> WeightSchedule:
        return WeightSchedule(total_iterations=self.iterations, ramp_fraction=self.ramp_fraction)

    def effective_policy(self) -> MagnificationPolicy:
        return self.policy if self.use_multimag else MagnificationPolicy.native_only()

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "betas": list(self.betas),
            "seed": self.seed,
            "unified_size": self.unified_size,
            "base_channels": self.base_channels,
            "n_resblocks": self.n_resblocks,
            "n_patches": self.n_patches,
            "temperature": self.temperature,
            "ramp_fraction": self.ramp_fraction,
            "weights": self.weights.as_dict(),
            "policy": {
                "macro": self.policy.macro,
                "native": self.policy.native,
                "zoom2": self.policy.zoom2,
                "zoom4": self.policy.zoom4,
                "macro_factor": self.policy.macro_factor,
            },
            "pyramid": {
                "levels": self.pyramid.levels,
                "kernel_size": self.pyramid.kernel_size,
                "sigma": self.pyramid.sigma,
                "level_weights": list(self.pyramid.level_weights),
            },
            "use_attention": self.use_attention,
            "use_multimag": self.use_multimag,
            "data_root": self.data_root,
            "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every,
            "checkpoint_at": list(self.checkpoint_at),
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        try:
            if "weights" in d:
                d["weights"] = LossWeights(**d["weights"])
            if "policy" in d:
                d["policy"] = MagnificationPolicy(**d["policy"])
            if "pyramid" in d:
                p = dict(d["pyramid"])
                p["level_weights"] = tuple(p.get("level_weights", ()))
                d["pyramid"] = PyramidSpec(**p)
            if "betas" in d:
                d["betas"] = tuple(d["betas"])
            if "checkpoint_at" in d:
                d["checkpoint_at"] = tuple(d["checkpoint_at"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad training config: {exc}") from exc

    @classmethod
    def from_yaml(cls, path: str | Path) -> "TrainConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        return cls.from_dict(raw)

    def to_yaml(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")

    def config_hash(self) -> str:
        # out_dir is a placement detail, not an experimental condition
        payload = self.to_dict()
        payload.pop("out_dir")
        return config_digest(payload)


def lr_at(t: int, cfg: TrainConfig) -> float:
    """Constant LR for the first half of training, then linear decay to zero."""
    T = cfg.iterations
    if t < 0 or t > T:
        raise ValueError(f"iteration {t} outside [0, {T}]")
    half = T / 2.0
    if t < half:
        return cfg.lr
    return cfg.lr * (T - t) / (T - half)


# ---------------------------------------------------------------------------
# Run state.


@dataclass
class RunState:
    generator: TranslationGenerator
    discriminator: PatchDiscriminator
    head: PatchProjectionHead
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    iteration: int = 0
    branch_counts: dict = field(default_factory=dict)
    loss_sums: dict = field(default_factory=dict)
    steps_logged: int = 0


@dataclass
class StepMetrics:
    iteration: int
    lr: float
    d_loss: float
    parts: dict[str, float]
    total: float


def init_run_state(cfg: TrainConfig) -> RunState:
    torch.manual_seed(cfg.seed)
    generator = TranslationGenerator(cfg.generator_config())
    init_weights(generator)
    discriminator = PatchDiscriminator()
    init_weights(discriminator)
    head = PatchProjectionHead(cfg.generator_config())
    init_weights(head)
    opt_g = torch.optim.Adam(
        list(generator.parameters()) + list(head.parameters()), lr=cfg.lr, betas=cfg.betas
    )
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr, betas=cfg.betas)
    return RunState(generator, discriminator, head, opt_g, opt_d)


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _location_seed(seed: int, iteration: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_LOCATION_STREAM_KEY, iteration))
    return int(ss.generate_state(1)[0])


def train_step(state: RunState, sample: MagnificationSample, cfg: TrainConfig) -> StepMetrics:
    """One discriminator update followed by one generator update.

    Loss parts whose weight is zero are never computed; ``parts`` holds only
    evaluated components. Deterministic given (state, sample, cfg).
    """
    t = state.iteration
    if t >= cfg.iterations:
        raise ValueError(f"state already at iteration {t} of {cfg.iterations}")
    lr = lr_at(t, cfg)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr

    state.generator.train()
    state.discriminator.train()
    dtype = next(state.generator.parameters()).dtype
    he = tile_to_tensor(sample.he, dtype=dtype)
    ihc = tile_to_tensor(sample.ihc, dtype=dtype)
    w = cfg.weights

    fake = state.generator(he)

    # discriminator update on real vs detached fake
    _set_requires_grad(state.discriminator, True)
    state.opt_d.zero_grad()
    d_loss = adversarial_loss(state.discriminator(ihc), state.discriminator(fake.detach()), side="D")
    if not torch.isfinite(d_loss.detach()):
        raise NumericError(f"non-finite discriminator loss at iteration {t}")
    d_loss.backward()
    state.opt_d.step()

    # generator update; discriminator frozen so its grads stay clean
    _set_requires_grad(state.discriminator, False)
    state.opt_g.zero_grad()
    parts: dict[str, torch.Tensor] = {}
    if w.adv:
        parts["adv"] = adversarial_loss(None, state.discriminator(fake), side="G")
    if w.patch_nce or w.asp:
        loc_seed = _location_seed(cfg.seed, t)
        fake_set = extract_patch_embeddings(
            fake, state.generator, state.head, n_locations=cfg.n_patches, rng_seed=loc_seed
        )
        if w.patch_nce:
            input_set = extract_patch_embeddings(
                he, state.generator, state.head, locations=fake_set.locations
            ).detached()
            parts["patch_nce"] = patch_nce_loss(input_set, fake_set, cfg.temperature)
        if w.asp:
            real_set = extract_patch_embeddings(
                ihc, state.generator, state.head, locations=fake_set.locations
            ).detached()
            parts["asp"] = adaptive_patch_nce_loss(
                fake_set, real_set, t, cfg.schedule(), cfg.temperature
            )
    if w.gp:
        parts["gp"] = gaussian_pyramid_loss(fake, ihc, cfg.pyramid)

    total = total_generator_loss(parts, w)
    if torch.is_tensor(total):
        total.backward()
    state.opt_g.step()
    _set_requires_grad(state.discriminator, True)

    state.iteration = t + 1
    branch = sample.branch.name
    state.branch_counts[branch] = state.branch_counts.get(branch, 0) + 1
    part_values = {k: float(v.detach()) for k, v in parts.items()}
    total_value = float(total.detach()) if torch.is_tensor(total) else float(total)
    for name, value in {**part_values, "total": total_value, "d_loss": float(d_loss.detach())}.items():
        state.loss_sums[name] = state.loss_sums.get(name, 0.0) + value
    state.steps_logged += 1
    return StepMetrics(iteration=t, lr=lr, d_loss=float(d_loss.detach()), parts=part_values, total=total_value)


# ---------------------------------------------------------------------------
# Checkpointing.


def _hash_obj(h, obj) -> None:
    if torch.is_tensor(obj):
        arr = obj.detach().cpu().numpy()
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    elif isinstance(obj, np.ndarray):
        h.update(str(obj.dtype).encode())
        h.update(str(obj.shape).encode())
        h.update(np.ascontiguousarray(obj).tobytes())
    elif isinstance(obj, dict):
        for key in sorted(obj, key=repr):
            h.update(repr(key).encode())
            _hash_obj(h, obj[key])
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            _hash_obj(h, item)
    else:
        h.update(repr(obj).encode())


def state_hash(state: RunState) -> str:
    """Canonical digest of parameters, buffers, optimizer moments and iteration."""
    h = hashlib.sha256()
    _hash_obj(h, state.generator.state_dict())
    _hash_obj(h, state.discriminator.state_dict())
    _hash_obj(h, state.head.state_dict())
    _hash_obj(h, state.opt_g.state_dict())
    _hash_obj(h, state.opt_d.state_dict())
    _hash_obj(h, state.iteration)
    return h.hexdigest()


def save_checkpoint(state: RunState, cfg: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": cfg.to_dict(),
        "iteration": state.iteration,
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "head": state.head.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "branch_counts": dict(state.branch_counts),
        "loss_sums": dict(state.loss_sums),
        "steps_logged": state.steps_logged,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[RunState, TrainConfig]:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {version!r}")
    cfg = TrainConfig.from_dict(payload["config"])
    state = init_run_state(cfg)
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.head.load_state_dict(payload["head"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.iteration = int(payload["iteration"])
    state.branch_counts = dict(payload["branch_counts"])
    state.loss_sums = dict(payload["loss_sums"])
    state.steps_logged = int(payload["steps_logged"])
    torch.set_rng_state(payload["torch_rng"])
    return state, cfg


def find_latest_checkpoint(out_dir: str | Path) -> Path | None:
    candidates = sorted(Path(out_dir).glob("ckpt_*.pt"))
    return candidates[-1] if candidates else None


# ---------------------------------------------------------------------------
# Full runs.


@dataclass
class TrainResult:
    state: RunState
    config: TrainConfig
    final_checkpoint: Path
    log_path: Path
    summary_path: Path


def run_training(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    resume_from: str | Path | None = None,
    sr: SuperResolver | None = None,
) -> TrainResult:
    """Drive the seeded sample stream through train_step until cfg.iterations.

    Checkpoints land in cfg.out_dir as ``ckpt_<iteration>.pt``; the loss log
    records every objective component plus the weighted total per step.
    Resuming from a checkpoint continues bit-identically.
    """
    if not manifest.entries:
        raise DataError("cannot train on an empty manifest")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state, saved_cfg = load_checkpoint(resume_from)
        if saved_cfg.config_hash() != cfg.config_hash():
            raise ConfigError(
                "checkpoint config does not match the requested config "
                f"({saved_cfg.config_hash()} vs {cfg.config_hash()})"
            )
    else:
        state = init_run_state(cfg)

    policy = cfg.effective_policy()
    log_path = out_dir / "losses.csv"
    new_log = state.iteration == 0 or not log_path.exists()
    checkpoint_marks = set(cfg.checkpoint_at)
    final_ckpt = out_dir / f"ckpt_{cfg.iterations:06d}.pt"

    with log_path.open("w" if new_log else "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new_log:
            writer.writeheader()
        for i in range(state.iteration, cfg.iterations):
            sample = sample_at(manifest, policy, cfg.seed, i, cfg.unified_size, sr)
            try:
                metrics = train_step(state, sample, cfg)
            except NumericError:
                snap = out_dir / f"diverged_{state.iteration:06d}.pt"
                save_checkpoint(state, cfg, snap)
                raise
            if (i + 1) % cfg.log_every == 0 or i + 1 == cfg.iterations:
                row = {
                    "iteration": metrics.iteration,
                    "lr": repr(metrics.lr),
                    "d_loss": repr(metrics.d_loss),
                    "total": repr(metrics.total),
                }
                for name in ("adv", "patch_nce", "asp", "gp"):
                    row[name] = repr(metrics.parts.get(name, 0.0))
                writer.writerow(row)
            done = i + 1
            if done % cfg.checkpoint_every == 0 or done in checkpoint_marks or done == cfg.iterations:
                save_checkpoint(state, cfg, out_dir / f"ckpt_{done:06d}.pt")

    summary_path = out_dir / "summary.json"
    averages = {
        name: state.loss_sums[name] / max(state.steps_logged, 1) for name in sorted(state.loss_sums)
    }
    summary = {
        "iterations": state.iteration,
        "config_hash": cfg.config_hash(),
        "state_hash": state_hash(state),
        "branch_counts": dict(sorted(state.branch_counts.items())),
        "loss_averages": averages,
        "use_attention": cfg.use_attention,
        "use_multimag": cfg.use_multimag,
        "seed": cfg.seed,
    }
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return TrainResult(state, cfg, final_ckpt, log_path, summary_path)


# ---------------------------------------------------------------------------
# Inference.


def load_translator(checkpoint_path: str | Path) -> TranslationGenerator:
    """Generator-only view of a checkpoint, switched to eval mode."""
    state, _ = load_checkpoint(checkpoint_path)
    state.generator.eval()
    return state.generator


def translate_tile(generator: TranslationGenerator, tile: ImageTile) -> ImageTile:
    with torch.no_grad():
        out = generator(tile)
    pixels = np.clip(tensor_to_pixels(out), 0.0, 1.0)
    return ImageTile(pixels, StainDomain.IHC, tile.source_id)


def translate_directory(
    generator: TranslationGenerator, in_dir: str | Path, out_dir: str | Path
) -> list[Path]:
    """Batch inference preserving filenames; deterministic per checkpoint."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    names = sorted(p.name for p in in_dir.glob("*.png"))
    if not names:
        raise DataError(f"no PNG tiles found in {in_dir}")
    for name in names:
        tile = load_tile(in_dir / name, StainDomain.HE)
        fake = translate_tile(generator, tile)
        target = out_dir / name
        save_tile(fake, target)
        written.append(target)
    return written
