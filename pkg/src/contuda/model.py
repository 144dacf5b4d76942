"""Segmentation network, patch discriminator and frozen snapshots."""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError

COMPONENTS = ("extractor", "generalist", "specialist")


@dataclass
class NetConfig:
    """Architecture of the desk-scale network.

    ``taps`` selects which encoder blocks feed feature distillation.
    """

    num_classes: int = 4
    widths: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 2, 1, 1)
    taps: tuple = (0, 1, 2, 3)
    disc_width: int = 32

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        self.taps = tuple(self.taps)
        if len(self.widths) != len(self.strides):
            raise ContractError("widths and strides must have equal length")
        if not self.taps or any(t < 0 or t >= len(self.widths) for t in self.taps):
            raise ContractError(f"taps {self.taps} out of range for {len(self.widths)} blocks")

    @property
    def downsampling(self) -> int:
        return int(np.prod(self.strides))

    def tap_strides(self) -> list:
        return [int(np.prod(self.strides[: t + 1])) for t in self.taps]


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class Extractor(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        blocks = []
        in_ch = 3
        for width, stride in zip(cfg.widths, cfg.strides):
            blocks.append(nn.Sequential(nn.Conv2d(in_ch, width, 3, stride, 1), nn.ReLU()))
            in_ch = width
        self.blocks = nn.ModuleList(blocks)
        self.taps = cfg.taps

    def forward(self, x):
        """Return the final activation and the tapped feature stack."""
        stack = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in self.taps:
                stack.append(x)
        return x, stack


class Head(nn.Module):
    """1x1 convolution to class logits at feature resolution."""

    def __init__(self, in_ch: int, num_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, num_classes, 1)

    def forward(self, feats, size):
        logits = self.conv(feats)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


class Discriminator(nn.Module):
    """Fully convolutional patch classifier over self-information maps.

    Three stride-2 4x4 convolutions; a 64x64 input yields 8x8 patch scores
    in (0, 1).
    """

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(num_classes, width, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 4, 2, 1),
        )

    def forward(self, info_map):
        return torch.sigmoid(self.net(info_map))


def make_discriminator(cfg: NetConfig, seed: int) -> Discriminator:
    with seeded(seed):
        return Discriminator(cfg.num_classes, cfg.disc_width)


def _as_batch(image):
    """Accept ``(H,W,3)`` arrays or ``(B,3,H,W)`` tensors; return a batch and a flag."""
    if isinstance(image, torch.Tensor) and image.dim() == 4:
        return image, True
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if x.dim() == 3 and x.shape[-1] == 3:
        return x.permute(2, 0, 1).unsqueeze(0), False
    if x.dim() == 3 and x.shape[0] == 3:
        return x.unsqueeze(0), False
    raise ContractError(f"cannot interpret image of shape {tuple(x.shape)}")


class ModelBundle(nn.Module):
    """Feature extractor with a generalist head and an optional specialist head.

    At step 1 there is a single head answering to both names. From step 2
    on, a bundle trained with multiple heads owns a separate specialist.
    """

    def __init__(self, cfg: NetConfig, step_index: int = 1, with_specialist: bool = False, seed: int = 0):
        super().__init__()
        if step_index < 1:
            raise ContractError("step_index must be >= 1")
        if with_specialist and step_index == 1:
            raise ContractError("a separate specialist head only exists from step 2 on")
        self.cfg = cfg
        self.step_index = step_index
        with seeded(seed):
            self.extractor = Extractor(cfg)
            self.generalist = Head(cfg.widths[-1], cfg.num_classes)
        self.specialist = copy.deepcopy(self.generalist) if with_specialist else None

    @property
    def has_specialist(self) -> bool:
        return self.specialist is not None

    def head(self, name: str) -> Head:
        if name == "generalist":
            return self.generalist
        if name == "specialist":
            if self.specialist is not None:
                return self.specialist
            if self.step_index == 1:
                return self.generalist
            raise ContractError(f"no specialist head at step {self.step_index}")
        raise ContractError(f"unknown head {name!r}")

    def forward_heads(self, x: torch.Tensor, heads: Iterable[str] = ("generalist",)):
        """One extractor pass, several heads. Returns ``({head: probs}, stack)``."""
        modules = {name: self.head(name) for name in heads}
        top, stack = self.extractor(x)
        size = x.shape[-2:]
        probs = {name: torch.softmax(m(top, size), dim=1) for name, m in modules.items()}
        return probs, stack

    def forward_segmentation(self, image, head: str = "generalist"):
        """Per-pixel class probabilities at input resolution and the tapped features.

        Logits are upsampled bilinearly before the softmax, so the map is
        normalized at every pixel regardless of parameter values.
        """
        x, batched = _as_batch(image)
        x = x.to(next(self.parameters()).dtype)
        probs, stack = self.forward_heads(x, (head,))
        p = probs[head]
        if not batched:
            return p[0], [f[0] for f in stack]
        return p, stack

    def component_modules(self) -> dict:
        out = {"extractor": self.extractor, "generalist": self.generalist}
        if self.specialist is not None:
            out["specialist"] = self.specialist
        return out


def serialize_components(components: dict) -> tuple[bytes, dict]:
    """Pack module parameters into one little-endian blob plus a layout manifest.

    Components are written in the fixed ``COMPONENTS`` order; each is a
    contiguous byte range with its own sha256.
    """
    chunks = []
    layout = {}
    offset = 0
    for name in [c for c in COMPONENTS if c in components] + sorted(set(components) - set(COMPONENTS)):
        module = components[name]
        start = offset
        tensors = []
        comp_chunks = []
        for key, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().contiguous().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            data = arr.tobytes()
            tensors.append({"name": key, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset})
            comp_chunks.append(data)
            offset += len(data)
        blob = b"".join(comp_chunks)
        chunks.append(blob)
        layout[name] = {
            "offset": start,
            "nbytes": len(blob),
            "sha256": hashlib.sha256(blob).hexdigest(),
            "tensors": tensors,
        }
    return b"".join(chunks), layout


def _load_state(blob: bytes, entry: dict) -> dict:
    state = {}
    for t in entry["tensors"]:
        dtype = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    return state


class FrozenSnapshot:
    """Immutable copy of a trained bundle.

    Not an ``nn.Module``: it exposes no parameters to optimizers, its
    tensors do not require grad and every forward runs under ``no_grad``.
    """

    def __init__(self, bundle: ModelBundle):
        self._bundle = copy.deepcopy(bundle)
        self._bundle.eval()
        for p in self._bundle.parameters():
            p.requires_grad_(False)
        self.digest = self.current_digest()

    @property
    def step_index(self) -> int:
        return self._bundle.step_index

    @property
    def cfg(self) -> NetConfig:
        return self._bundle.cfg

    @property
    def has_specialist(self) -> bool:
        return self._bundle.has_specialist

    def current_digest(self) -> str:
        blob, _ = serialize_components(self._bundle.component_modules())
        return hashlib.sha256(blob).hexdigest()

    def verify(self) -> None:
        if self.current_digest() != self.digest:
            raise ContractError("frozen snapshot parameters changed")

    @torch.no_grad()
    def forward_segmentation(self, image, head: str = "generalist"):
        return self._bundle.forward_segmentation(image, head)

    @torch.no_grad()
    def forward_heads(self, x, heads=("generalist",)):
        return self._bundle.forward_heads(x, heads)

    def thaw(self) -> ModelBundle:
        """A trainable deep copy of the frozen bundle."""
        bundle = copy.deepcopy(self._bundle)
        for p in bundle.parameters():
            p.requires_grad_(True)
        bundle.train()
        return bundle

    def save(self, bin_path, manifest_path, config_echo: dict | None = None) -> dict:
        blob, layout = serialize_components(self._bundle.component_modules())
        manifest = {
            "step_index": self.step_index,
            "digest": hashlib.sha256(blob).hexdigest(),
            "net": asdict(self.cfg),
            "components": layout,
            "config": config_echo or {},
        }
        Path(bin_path).parent.mkdir(parents=True, exist_ok=True)
        Path(bin_path).write_bytes(blob)
        Path(manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    @classmethod
    def load(cls, bin_path, manifest_path) -> "FrozenSnapshot":
        manifest = json.loads(Path(manifest_path).read_text())
        blob = Path(bin_path).read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest["digest"]:
            raise ContractError(f"checkpoint {bin_path} does not match its manifest digest")
        cfg = NetConfig(**manifest["net"])
        comps = manifest["components"]
        bundle = ModelBundle(cfg, step_index=manifest["step_index"], with_specialist="specialist" in comps)
        for name, module in bundle.component_modules().items():
            module.load_state_dict(_load_state(blob, comps[name]))
        dtypes = {t["dtype"] for c in comps.values() for t in c["tensors"]}
        if dtypes == {"<f8"}:
            bundle.double()
        snap = cls(bundle)
        if snap.digest != manifest["digest"]:
            raise ContractError("reloaded snapshot digest differs from manifest")
        return snap


def snapshot_freeze(bundle: ModelBundle) -> FrozenSnapshot:
    return FrozenSnapshot(bundle)


def spawn_next_step(prev: FrozenSnapshot, with_specialist: bool = True) -> ModelBundle:
    """Start step ``t+1`` from a frozen step-``t`` model.

    Extractor and generalist are copied; the specialist, when requested,
    starts from the previous generalist weights.
    """
    base = prev.thaw()
    bundle = ModelBundle.__new__(ModelBundle)
    nn.Module.__init__(bundle)
    bundle.cfg = base.cfg
    bundle.step_index = prev.step_index + 1
    bundle.extractor = base.extractor
    bundle.generalist = base.generalist
    bundle.specialist = copy.deepcopy(base.generalist) if with_specialist else None
    return bundle


def parameter_partition(bundle: ModelBundle, discriminator: Discriminator) -> dict:
    """Disjoint parameter lists for the segmentation and discriminator optimizers."""
    seg = [p for p in bundle.parameters() if p.requires_grad]
    disc = [p for p in discriminator.parameters() if p.requires_grad]
    if {id(p) for p in seg} & {id(p) for p in disc}:
        raise ContractError("segmentation and discriminator partitions overlap")
    return {"segmentation": seg, "discriminator": disc}


def parameter_digest(params: Iterable[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
