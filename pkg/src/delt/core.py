"""Shared domain types, config schema and the on-disk distilled-dataset format."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from PIL import Image

FORMAT_TAG = "delt-distilled/1"

LR_SCHEDULES = ("cosine_decay",)
INIT_MODES = ("real_patch", "gaussian")
SELECTIONS = ("median", "lowest", "highest")
ORDERINGS = ("median_out", "ascending", "descending", "random")
EVAL_OPTIMIZERS = ("adamw",)
EVAL_AUGMENTATIONS = ("rand_augment", "random_resized_crop", "random_horizontal_flip")


class ConfigError(ValueError):
    """Raised when a config or dataset violates its invariants."""


class IntegrityError(Exception):
    """Raised when an on-disk distilled dataset is missing or corrupted."""


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    num_classes: int
    resolution: int
    channel_mean: tuple[float, ...]
    channel_std: tuple[float, ...]
    randaugment_m: float = 5.0
    randaugment_n: int = 4
    randaugment_mstd: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channel_mean", tuple(float(v) for v in self.channel_mean))
        object.__setattr__(self, "channel_std", tuple(float(v) for v in self.channel_std))
        if self.num_classes < 2:
            raise ConfigError(f"profile {self.name!r}: num_classes must be >= 2")
        if self.resolution <= 0:
            raise ConfigError(f"profile {self.name!r}: resolution must be > 0")
        if self.randaugment_mstd <= 0:
            raise ConfigError(f"profile {self.name!r}: randaugment_mstd must be > 0")
        if len(self.channel_mean) != len(self.channel_std) or not self.channel_mean:
            raise ConfigError(f"profile {self.name!r}: channel_mean/channel_std length mismatch")
        if any(s <= 0 for s in self.channel_std):
            raise ConfigError(f"profile {self.name!r}: channel_std entries must be > 0")

    @property
    def channels(self) -> int:
        return len(self.channel_mean)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.resolution, self.resolution)

    def _stats(self, like: torch.Tensor):
        shape = (-1, 1, 1)
        mean = torch.tensor(self.channel_mean, dtype=like.dtype, device=like.device).view(shape)
        std = torch.tensor(self.channel_std, dtype=like.dtype, device=like.device).view(shape)
        return mean, std

    def normalize(self, pixels: torch.Tensor) -> torch.Tensor:
        """Map [0, 1] pixels (``C×H×W`` or ``N×C×H×W``) into channel-normalized space."""
        mean, std = self._stats(pixels)
        return (pixels - mean) / std

    def denormalize(self, images: torch.Tensor) -> torch.Tensor:
        mean, std = self._stats(images)
        return images * std + mean

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetProfile":
        return cls(**d)


# RandAugment m/n/mstd per dataset. "digits" is the offline desk
# proxy built from scikit-learn's bundled 8x8 digits, upsampled to 16 px.
PROFILES: dict[str, DatasetProfile] = {
    "cifar10": DatasetProfile("cifar10", 10, 32, (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616), 5, 4, 1.0),
    "tiny_imagenet": DatasetProfile("tiny_imagenet", 200, 64, (0.4802, 0.4481, 0.3975), (0.2302, 0.2265, 0.2262), 4, 3, 1.0),
    "imagenette": DatasetProfile("imagenette", 10, 224, (0.485, 0.456, 0.406), (0.229, 0.224, 0.225), 6, 2, 1.0),
    "imagenet100": DatasetProfile("imagenet100", 100, 224, (0.485, 0.456, 0.406), (0.229, 0.224, 0.225), 6, 2, 1.0),
    "imagenet1k": DatasetProfile("imagenet1k", 1000, 224, (0.485, 0.456, 0.406), (0.229, 0.224, 0.225), 6, 2, 1.0),
    "digits": DatasetProfile("digits", 10, 16, (0.3055, 0.3055, 0.3055), (0.3187, 0.3187, 0.3187), 5, 4, 1.0),
}


def get_profile(name: str) -> DatasetProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown dataset profile {name!r}; known: {sorted(PROFILES)}") from None


def _check_choice(name: str, value: str, allowed: Sequence[str]):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {list(allowed)}, got {value!r}")


@dataclass(frozen=True)
class RecoveryConfig:
    """Synthesis hyperparameters. Defaults follow the published recovery settings."""

    ipc: int = 10
    num_subbatches: int = 8
    max_iterations: int = 4000
    round_iterations: int = 500
    alpha_bn: float = 0.01
    learning_rate: float = 0.25
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    synthesis_batch_size: int = 100
    lr_schedule: str = "cosine_decay"
    crop_scale_min: float = 0.08
    crop_scale_max: float = 1.0
    init_mode: str = "real_patch"
    mosaic_grid: int = 1
    selection: str = "median"
    ordering: str = "median_out"
    seed: int = 0

    def __post_init__(self):
        validate_recovery_config(self)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RecoveryConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown recovery config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "RecoveryConfig":
        return dataclasses.replace(self, **changes)


def validate_recovery_config(cfg: RecoveryConfig) -> None:
    if cfg.ipc < 1:
        raise ConfigError("ipc must be >= 1")
    if cfg.num_subbatches < 1:
        raise ConfigError("num_subbatches must be >= 1")
    # Uneven splits are allowed (e.g. ipc=10 over 8 sub-batches); every
    # sub-batch still needs at least one image.
    if cfg.num_subbatches > cfg.ipc:
        raise ConfigError(f"num_subbatches ({cfg.num_subbatches}) exceeds ipc ({cfg.ipc})")
    if cfg.max_iterations < 1 or cfg.round_iterations < 0:
        raise ConfigError("max_iterations must be >= 1 and round_iterations >= 0")
    if cfg.max_iterations - (cfg.num_subbatches - 1) * cfg.round_iterations < 1:
        raise ConfigError("last sub-batch has no iterations")
    if not 0 < cfg.crop_scale_min <= cfg.crop_scale_max <= 1:
        raise ConfigError("crop scale must satisfy 0 < min <= max <= 1")
    if cfg.alpha_bn < 0:
        raise ConfigError("alpha_bn must be >= 0")
    if cfg.learning_rate <= 0:
        raise ConfigError("learning_rate must be > 0")
    if cfg.synthesis_batch_size < 1:
        raise ConfigError("synthesis_batch_size must be >= 1")
    if cfg.mosaic_grid < 1:
        raise ConfigError("mosaic_grid must be >= 1")
    _check_choice("lr_schedule", cfg.lr_schedule, LR_SCHEDULES)
    _check_choice("init_mode", cfg.init_mode, INIT_MODES)
    _check_choice("selection", cfg.selection, SELECTIONS)
    _check_choice("ordering", cfg.ordering, ORDERINGS)


# Post-training batch size by IPC.
EVAL_BATCH_BY_IPC = {1: 10, 10: 50, 50: 100}


@dataclass(frozen=True)
class EvalConfig:
    optimizer: str = "adamw"
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    epochs: int = 300
    batch_size: int = 50
    lr_schedule: str = "cosine_decay"
    augmentations: tuple[str, ...] = EVAL_AUGMENTATIONS
    crop_scale_min: float = 0.08
    crop_scale_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "augmentations", tuple(self.augmentations))
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        _check_choice("optimizer", self.optimizer, EVAL_OPTIMIZERS)
        _check_choice("lr_schedule", self.lr_schedule, LR_SCHEDULES)
        for aug in self.augmentations:
            _check_choice("augmentation", aug, EVAL_AUGMENTATIONS)

    @classmethod
    def for_run(cls, ipc: int, student_arch: str, **overrides) -> "EvalConfig":
        """Published validation defaults for a given IPC and student architecture."""
        base: dict[str, Any] = {}
        if ipc in EVAL_BATCH_BY_IPC:
            base["batch_size"] = EVAL_BATCH_BY_IPC[ipc]
        elif ipc > 50:
            base["batch_size"] = 100
        if student_arch.startswith("mobilenet"):
            base["learning_rate"] = 0.0025
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["augmentations"] = list(self.augmentations)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalConfig":
        return cls(**d)

    def replace(self, **changes) -> "EvalConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    image: torch.Tensor  # C×H×W, channel-normalized
    class_id: int
    ipc_index: int
    subbatch_index: int = 0
    iterations_trained: int = 0
    init_provenance: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "image", self.image.detach().to("cpu", torch.float32).contiguous())
        if self.image.dim() != 3:
            raise ConfigError(f"sample image must be C×H×W, got shape {tuple(self.image.shape)}")

    def __eq__(self, other):
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return (
            self.key() == other.key()
            and self.subbatch_index == other.subbatch_index
            and self.iterations_trained == other.iterations_trained
            and self.init_provenance == other.init_provenance
            and torch.equal(self.image, other.image)
        )

    def key(self) -> tuple[int, int]:
        return (self.class_id, self.ipc_index)


@dataclass(frozen=True, eq=False)
class DistilledDataset:
    """Distilled images plus provenance.

    ``run_metadata`` must carry ``ipc``. When it also carries a
    ``recovery_config`` snapshot, each sample's iteration count is checked
    against the staggered schedule of that config.
    """

    profile: DatasetProfile
    samples: tuple[SyntheticSample, ...]
    run_metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ordered = tuple(sorted(self.samples, key=SyntheticSample.key))
        object.__setattr__(self, "samples", ordered)
        object.__setattr__(self, "run_metadata", json.loads(json.dumps(dict(self.run_metadata))))

    def __eq__(self, other):
        if not isinstance(other, DistilledDataset):
            return NotImplemented
        return (
            self.profile == other.profile
            and self.run_metadata == other.run_metadata
            and len(self.samples) == len(other.samples)
            and all(a == b for a, b in zip(self.samples, other.samples))
        )

    @property
    def ipc(self) -> int:
        return int(self.run_metadata["ipc"])

    def validate(self) -> None:
        if "ipc" not in self.run_metadata:
            raise ConfigError("run_metadata must record 'ipc'")
        ipc = self.ipc
        rc = self.run_metadata.get("recovery_config")
        rcfg = RecoveryConfig.from_dict(rc) if rc is not None else None
        shape = self.profile.image_shape
        counts = {c: 0 for c in range(self.profile.num_classes)}
        seen = set()
        for s in self.samples:
            tag = f"sample (class {s.class_id}, ipc_index {s.ipc_index})"
            if s.class_id not in counts:
                raise ConfigError(f"{tag}: class id out of range")
            if s.key() in seen:
                raise ConfigError(f"{tag}: duplicate")
            seen.add(s.key())
            if not 0 <= s.ipc_index < ipc:
                raise ConfigError(f"{tag}: ipc_index out of range [0, {ipc})")
            if tuple(s.image.shape) != shape:
                raise ConfigError(f"{tag}: image shape {tuple(s.image.shape)} != profile {shape}")
            if rcfg is not None:
                if not 0 <= s.subbatch_index < rcfg.num_subbatches:
                    raise ConfigError(f"{tag}: subbatch_index out of range")
                expected = rcfg.max_iterations - s.subbatch_index * rcfg.round_iterations
                if s.iterations_trained != expected:
                    raise ConfigError(f"{tag}: iterations_trained {s.iterations_trained} != {expected}")
            counts[s.class_id] += 1
        for c, n in counts.items():
            if n != ipc:
                raise ConfigError(f"class {c} has {n} samples, expected ipc={ipc}")

    def images(self) -> torch.Tensor:
        return torch.stack([s.image for s in self.samples])

    def labels(self) -> torch.Tensor:
        return torch.tensor([s.class_id for s in self.samples], dtype=torch.long)


# ---------------------------------------------------------------- persistence

def to_uint8(image: torch.Tensor, profile: DatasetProfile) -> np.ndarray:
    """De-normalize, clamp to [0, 1] and quantize to an ``H×W×C`` uint8 array."""
    pixels = profile.denormalize(image.detach().to(torch.float32)).clamp(0.0, 1.0)
    arr = torch.round(pixels * 255.0).to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def from_uint8(arr: np.ndarray, profile: DatasetProfile) -> torch.Tensor:
    pixels = torch.from_numpy(np.array(arr, copy=True)).permute(2, 0, 1).to(torch.float32) / 255.0
    return profile.normalize(pixels)


def quantize_image(image: torch.Tensor, profile: DatasetProfile) -> torch.Tensor:
    """The exact tensor ``load_distilled`` returns for ``image`` after a save."""
    return from_uint8(to_uint8(image, profile), profile)


def _png_bytes(arr: np.ndarray) -> bytes:
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        img = Image.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _read_png(path: Path, channels: int) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L" if channels == 1 else "RGB"))
    return arr[:, :, None] if arr.ndim == 2 else arr


def _image_relpath(class_id: int, ipc_index: int) -> str:
    return f"images/{class_id:05d}/{ipc_index:04d}.png"


def _labels_relpath(class_id: int) -> str:
    return f"labels/{class_id:05d}.f32"


def _digest(meta_wo_digest: Mapping[str, Any], files: Mapping[str, bytes]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(meta_wo_digest, sort_keys=True).encode())
    for rel in sorted(files):
        h.update(rel.encode())
        h.update(b"\0")
        h.update(files[rel])
    return h.hexdigest()


def save_distilled(
    dataset: DistilledDataset,
    path: str | os.PathLike,
    soft_labels: Mapping[int, np.ndarray] | None = None,
    overwrite: bool = False,
) -> str:
    """Write ``dataset`` under ``path`` and return the manifest digest.

    Files are staged in a sibling temp directory and moved into place only
    once everything is written, so an IO failure leaves no partial run.
    """
    dataset.validate()
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise FileExistsError(f"{path} exists and is not empty")
    profile = dataset.profile

    files: dict[str, bytes] = {}
    entries = []
    for s in dataset.samples:
        rel = _image_relpath(s.class_id, s.ipc_index)
        files[rel] = _png_bytes(to_uint8(s.image, profile))
        entries.append(
            {
                "class_id": s.class_id,
                "ipc_index": s.ipc_index,
                "subbatch_index": s.subbatch_index,
                "iterations_trained": s.iterations_trained,
                "init_provenance": s.init_provenance,
                "file": rel,
            }
        )
    if soft_labels:
        for c, arr in soft_labels.items():
            arr = np.asarray(arr, dtype="<f4")
            if arr.shape != (dataset.ipc, profile.num_classes):
                raise ConfigError(f"soft labels for class {c}: shape {arr.shape} != {(dataset.ipc, profile.num_classes)}")
            files[_labels_relpath(int(c))] = np.ascontiguousarray(arr).tobytes()

    meta = {
        "format": FORMAT_TAG,
        "profile": profile.to_dict(),
        "run_metadata": dict(dataset.run_metadata),
        "samples": entries,
    }
    digest = _digest(meta, files)
    meta["digest"] = digest

    path.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for rel, data in files.items():
            target = staging / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        (staging / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(staging, path)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return digest


def _read_meta(path: Path) -> dict[str, Any]:
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise IntegrityError(f"{path} is not a distilled dataset (no meta.json)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise IntegrityError(f"{meta_path}: unreadable manifest: {e}") from e
    if meta.get("format") != FORMAT_TAG or "digest" not in meta:
        raise IntegrityError(f"{path} is not a distilled dataset (bad manifest)")
    return meta


def _collect_files(path: Path) -> dict[str, bytes]:
    files = {}
    for sub in ("images", "labels"):
        root = path / sub
        if root.is_dir():
            for p in root.rglob("*"):
                if p.is_file():
                    files[p.relative_to(path).as_posix()] = p.read_bytes()
    return files


def verify_distilled(path: str | os.PathLike) -> str:
    """Recompute the digest of a saved run; raise ``IntegrityError`` on mismatch."""
    path = Path(path)
    meta = _read_meta(path)
    stored = meta.pop("digest")
    actual = _digest(meta, _collect_files(path))
    if actual != stored:
        raise IntegrityError(f"{path}: digest mismatch (stored {stored[:12]}, actual {actual[:12]})")
    return stored


def load_distilled(path: str | os.PathLike) -> DistilledDataset:
    path = Path(path)
    verify_distilled(path)
    meta = _read_meta(path)
    profile = DatasetProfile.from_dict(meta["profile"])
    samples = []
    for e in meta["samples"]:
        arr = _read_png(path / e["file"], profile.channels)
        samples.append(
            SyntheticSample(
                image=from_uint8(arr, profile),
                class_id=e["class_id"],
                ipc_index=e["ipc_index"],
                subbatch_index=e["subbatch_index"],
                iterations_trained=e["iterations_trained"],
                init_provenance=e["init_provenance"],
            )
        )
    ds = DistilledDataset(profile, tuple(samples), meta["run_metadata"])
    ds.validate()
    return ds


def load_soft_labels(path: str | os.PathLike) -> dict[int, np.ndarray]:
    """Read the optional per-class soft-label files of a saved run."""
    path = Path(path)
    meta = _read_meta(path)
    ipc = int(meta["run_metadata"]["ipc"])
    num_classes = int(meta["profile"]["num_classes"])
    out = {}
    root = path / "labels"
    if root.is_dir():
        for p in sorted(root.glob("*.f32")):
            arr = np.frombuffer(p.read_bytes(), dtype="<f4").reshape(ipc, num_classes)
            out[int(p.stem)] = arr.copy()
    return out
