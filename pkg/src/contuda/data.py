"""Procedural multi-domain segmentation benchmark and protocol-enforcing access.

Scenes are coloured shapes on a shaded background with exact label maps.
A domain shift (hue rotation, brightness, texture, noise) touches pixels
only, so label maps depend on the layout seed alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from .errors import ProtocolViolation, ValidationError

CLASS_NAMES_4 = ("background", "circle", "square", "triangle")
CLASS_NAMES_7 = CLASS_NAMES_4 + ("bar", "ring", "cross")

# canonical RGB colour per class
PALETTE = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.85, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.30, 0.85],
        [0.85, 0.80, 0.20],
        [0.80, 0.25, 0.80],
        [0.20, 0.80, 0.80],
    ]
)

EVAL_INDEX_OFFSET = 1_000_000


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    hue_shift: float = 0.0
    brightness_scale: float = 1.0
    noise_sigma: float = 0.0
    texture_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.domain_id or "/" in self.domain_id:
            raise ValidationError(f"invalid domain_id {self.domain_id!r}")
        if not 0 <= self.hue_shift < 360:
            raise ValidationError(f"hue_shift must be in [0, 360), got {self.hue_shift}")
        if not self.brightness_scale > 0:
            raise ValidationError(f"brightness_scale must be > 0, got {self.brightness_scale}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.texture_strength < 0:
            raise ValidationError(f"texture_strength must be >= 0, got {self.texture_strength}")

    @property
    def is_identity(self) -> bool:
        return (
            self.hue_shift == 0
            and self.brightness_scale == 1
            and self.noise_sigma == 0
            and self.texture_strength == 0
        )


def shapes3(seed: int = 0) -> list[DomainSpec]:
    """Source plus two targets of increasing shift."""
    return [
        DomainSpec("source", seed=seed),
        DomainSpec("target1", hue_shift=40.0, noise_sigma=0.02, seed=seed + 1),
        DomainSpec("target2", hue_shift=200.0, brightness_scale=0.7, texture_strength=0.5, seed=seed + 2),
    ]


@dataclass
class Sample:
    image: np.ndarray
    label: Optional[np.ndarray]
    domain_id: str


# -- rendering ---------------------------------------------------------------


def _shape_mask(kind: int, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    if kind == 1:  # circle
        return dy**2 + dx**2 <= r**2
    if kind == 2:  # square
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == 3:  # triangle, apex up
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = dx * ca + dy * sa, -dx * sa + dy * ca
    if kind == 4:  # bar
        return (np.abs(u) <= r) & (np.abs(v) <= r * 0.3)
    if kind == 5:  # ring
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == 6:  # cross
        return ((np.abs(u) <= r) & (np.abs(v) <= r * 0.25)) | ((np.abs(v) <= r) & (np.abs(u) <= r * 0.25))
    raise ValidationError(f"unknown shape class {kind}")


def render_scene(seed: int, index: int, classes: int, resolution: tuple[int, int]):
    """Canonical image in [0,1] and its label map for one layout."""
    rng = np.random.default_rng([seed, index, 0])
    h, w = resolution
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # smooth background shading
    gy, gx = rng.uniform(-0.12, 0.12, size=2)
    base = PALETTE[0] + rng.uniform(-0.05, 0.05, size=3)
    shade = gy * (yy / h - 0.5) + gx * (xx / w - 0.5)
    image = np.clip(base[None, None, :] + shade[..., None], 0, 1)
    label = np.zeros((h, w), dtype=np.uint8)
    scale = min(h, w) / 64
    for _ in range(rng.integers(2, 6)):
        kind = int(rng.integers(1, classes))
        r = rng.uniform(5, 12) * scale
        cy, cx = rng.uniform(r * 0.5, h - r * 0.5), rng.uniform(r * 0.5, w - r * 0.5)
        mask = _shape_mask(kind, yy, xx, cy, cx, r, rng.uniform(0, np.pi))
        color = np.clip(PALETTE[kind] + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        image[mask] = color
        label[mask] = kind
    return image, label


def apply_shift(image: np.ndarray, spec: DomainSpec, index: int) -> np.ndarray:
    """Pixel-level domain shift; the identity spec returns the input unchanged."""
    if spec.is_identity:
        return image
    rng = np.random.default_rng([spec.seed, index, 1])
    out = image
    if spec.hue_shift:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + spec.hue_shift / 360.0) % 1.0
        out = hsv_to_rgb(hsv)
    if spec.brightness_scale != 1:
        out = out * spec.brightness_scale
    if spec.texture_strength:
        h, w = out.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4, 10)
        phase = (xx * np.cos(theta) + yy * np.sin(theta)) * 2 * np.pi / period
        stripes = 0.5 * (1 + np.sin(phase + rng.uniform(0, 2 * np.pi)))
        out = out * (1 - spec.texture_strength * stripes)[..., None]
    if spec.noise_sigma:
        out = out + rng.normal(0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0, 1)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def _png_bytes(path: Path, array: np.ndarray) -> bytes:
    Image.fromarray(array).save(path, format="PNG", optimize=False)
    return path.read_bytes()


# -- manifests ---------------------------------------------------------------


@dataclass
class DatasetManifest:
    """On-disk description of one rendered domain.

    Image and label arrays are read from the PNG files on first use and
    cached as uint8.
    """

    root: Path
    domain_id: str
    spec: dict
    role: str
    order: int
    classes: int
    resolution: tuple
    splits: dict = field(default_factory=dict)

    @property
    def dir(self) -> Path:
        return Path(self.root) / self.domain_id

    def count(self, split: str) -> int:
        return self.splits[split]["count"]

    def has_labels(self, split: str) -> bool:
        return self.splits[split]["labels"] is not None

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "spec": self.spec,
            "role": self.role,
            "order": self.order,
            "classes": self.classes,
            "resolution": list(self.resolution),
            "splits": self.splits,
        }

    def write(self) -> Path:
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, root, domain_id: str) -> "DatasetManifest":
        d = json.loads((Path(root) / domain_id / "manifest.json").read_text())
        return cls(
            root=Path(root),
            domain_id=d["domain_id"],
            spec=d["spec"],
            role=d["role"],
            order=d["order"],
            classes=d["classes"],
            resolution=tuple(d["resolution"]),
            splits=d["splits"],
        )

    @cached_property
    def _arrays(self) -> dict:
        return {}

    def images(self, split: str) -> np.ndarray:
        key = ("images", split)
        if key not in self._arrays:
            files = self.splits[split]["images"]
            self._arrays[key] = np.stack([np.asarray(Image.open(self.dir / f)) for f in files])
        return self._arrays[key]

    def labels(self, split: str) -> np.ndarray:
        if not self.has_labels(split):
            raise ProtocolViolation(f"{self.domain_id}/{split} has no labels")
        key = ("labels", split)
        if key not in self._arrays:
            files = self.splits[split]["labels"]
            self._arrays[key] = np.stack([np.asarray(Image.open(self.dir / f)) for f in files])
        return self._arrays[key]


def check_resolution(resolution, downsampling: int = 4, pod_scales=(1, 2)) -> None:
    h, w = resolution
    unit = downsampling * max(pod_scales)
    if h < unit or w < unit or h % unit or w % unit:
        raise ValidationError(
            f"resolution {h}x{w} must be divisible by {unit} "
            f"(downsampling {downsampling} x largest pooling scale {max(pod_scales)})"
        )


def generate_domain(
    spec: DomainSpec,
    n_train: int,
    n_eval: int,
    root,
    classes: int = 4,
    resolution: tuple = (64, 64),
    role: str = "source",
    order: int = 0,
    downsampling: int = 4,
    pod_scales=(1, 2),
) -> DatasetManifest:
    """Render a domain to ``<root>/<domain_id>/{train,eval}/{images,labels}``.

    Target training splits are written without labels. Labels are only
    rendered where the protocol allows them: source train, and every eval
    split.
    """
    if classes not in (4, 7):
        raise ValidationError(f"classes must be 4 or 7, got {classes}")
    if role not in ("source", "target"):
        raise ValidationError(f"role must be 'source' or 'target', got {role!r}")
    if n_train < 1 or n_eval < 1:
        raise ValidationError("n_train and n_eval must be >= 1")
    check_resolution(resolution, downsampling, pod_scales)
    manifest = DatasetManifest(
        root=Path(root),
        domain_id=spec.domain_id,
        spec=asdict(spec),
        role=role,
        order=order,
        classes=classes,
        resolution=tuple(resolution),
    )
    for split, n, offset in (("train", n_train, 0), ("eval", n_eval, EVAL_INDEX_OFFSET)):
        with_labels = role == "source" or split == "eval"
        img_dir = manifest.dir / split / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        lbl_dir = manifest.dir / split / "labels"
        if with_labels:
            lbl_dir.mkdir(parents=True, exist_ok=True)
        digest = hashlib.sha256()
        images, labels = [], []
        for i in range(n):
            index = offset + i
            canonical, label = render_scene(spec.seed, index, classes, resolution)
            pixels = to_uint8(apply_shift(canonical, spec, index))
            name = f"{i:05d}.png"
            digest.update(_png_bytes(img_dir / name, pixels))
            images.append(f"{split}/images/{name}")
            if with_labels:
                digest.update(_png_bytes(lbl_dir / name, label))
                labels.append(f"{split}/labels/{name}")
        manifest.splits[split] = {
            "count": n,
            "images": images,
            "labels": labels if with_labels else None,
            "sha256": digest.hexdigest(),
        }
    manifest.write()
    return manifest


def generate_benchmark(specs, root, n_train=2000, n_eval=200, classes=4, resolution=(64, 64), **kw):
    """First spec is the source; the rest are targets 1..T in order."""
    if len(specs) < 2:
        raise ValidationError("a benchmark needs a source and at least one target")
    return [
        generate_domain(
            spec, n_train, n_eval, root, classes, resolution,
            role="source" if k == 0 else "target", order=k, **kw,
        )
        for k, spec in enumerate(specs)
    ]


# -- access log --------------------------------------------------------------


@dataclass(frozen=True)
class AccessRecord:
    step: int
    domain_id: str
    split: str
    count: int
    context: str
    role: str
    order: int


class AccessLog:
    """Append-only record of every data read, optionally mirrored to JSONL."""

    def __init__(self, path=None):
        self._records: list[AccessRecord] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()

    def append(self, record: AccessRecord) -> None:
        self._records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    def __len__(self):
        return len(self._records)

    @classmethod
    def read(cls, path) -> "AccessLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                log._records.append(AccessRecord(**json.loads(line)))
        return log


def _permitted(manifest_role: str, order: int, split: str, step: int, context: str) -> Optional[str]:
    """None if the read is allowed, otherwise a reason."""
    if context == "train":
        if split != "train":
            return "training may only read train splits"
        if manifest_role == "target" and order != step:
            return f"target {order} train split is not available at step {step}"
        return None
    if context == "eval":
        if split != "eval":
            return "evaluation may only read eval splits"
        if manifest_role == "target" and order > step:
            return f"target {order} has not been seen at step {step}"
        return None
    return f"unknown context {context!r}"


def load_batch(
    manifest: DatasetManifest,
    split: str,
    size: Optional[int],
    step: int,
    log: AccessLog,
    rng: Optional[np.random.Generator] = None,
    indices=None,
    context: str = "train",
) -> list[Sample]:
    """Read samples under the continual protocol and record the access.

    Either ``size`` random samples drawn without replacement from ``rng``,
    or explicit ``indices``. Training reads of target splits never carry
    labels.
    """
    reason = _permitted(manifest.role, manifest.order, split, step, context)
    if reason is not None:
        raise ProtocolViolation(f"step {step}: read of {manifest.domain_id}/{split} refused: {reason}")
    n = manifest.count(split)
    if indices is None:
        if rng is None or size is None:
            raise ValidationError("pass either indices or both size and rng")
        indices = rng.choice(n, size=size, replace=False)
    indices = np.asarray(indices, dtype=np.int64)
    images = manifest.images(split)[indices]
    with_labels = manifest.has_labels(split) and not (context == "train" and manifest.role == "target")
    labels = manifest.labels(split)[indices] if with_labels else [None] * len(indices)
    log.append(AccessRecord(step, manifest.domain_id, split, int(len(indices)), context, manifest.role, manifest.order))
    return [Sample(img, lbl, manifest.domain_id) for img, lbl in zip(images, labels)]


def collate(samples: list[Sample], dtype=torch.float32):
    """Stack samples into ``(B,3,H,W)`` images in [0,1] and ``(B,H,W)`` labels (or None)."""
    x = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).to(dtype) / 255.0
    if any(s.label is None for s in samples):
        return x, None
    y = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    return x, y


def audit(log: AccessLog, total_steps: int) -> dict:
    """Check every recorded read against the protocol for its step."""
    violations = []
    reads: dict = {}
    for rec in log.records:
        reads.setdefault(str(rec.step), set()).add(f"{rec.context}:{rec.domain_id}/{rec.split}")
        reason = None
        if not 1 <= rec.step <= total_steps:
            reason = f"step {rec.step} outside 1..{total_steps}"
        else:
            reason = _permitted(rec.role, rec.order, rec.split, rec.step, rec.context)
        if reason is not None:
            violations.append(
                {"step": rec.step, "domain_id": rec.domain_id, "split": rec.split, "context": rec.context, "reason": reason}
            )
    return {
        "total_steps": total_steps,
        "compliant": not violations,
        "violations": violations,
        "reads": {k: sorted(v) for k, v in sorted(reads.items())},
    }
