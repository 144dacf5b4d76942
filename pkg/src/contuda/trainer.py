"""Continual training protocol: adversarial first step, distilled later steps."""

from __future__ import annotations

import contextlib
import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import losses as L
from .data import AccessLog, DatasetManifest, audit, collate, load_batch
from .errors import ContractError, NonFiniteComponent, NumericalAbort, ValidationError
from .metrics import ConfusionMatrix, DomainResult, MetricsReport, emit_report, forgetting, history_of, iou_from_confusion
from .model import (
    Discriminator,
    FrozenSnapshot,
    ModelBundle,
    NetConfig,
    make_discriminator,
    parameter_digest,
    parameter_partition,
    snapshot_freeze,
    spawn_next_step,
)

METHODS = ("continual_baseline", "muhdi", "dd_only", "fd_only", "dd_fd")

CURVE_COLUMNS = ("iteration", "L_seg", "L_adv", "L_D", "KL_spec", "KL_prev", "L_pod", "L_total")


@dataclass
class TrainConfig:
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    lr_seg: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_disc: float = 1e-4
    iterations_per_step: int = 3000
    batch_size: int = 4
    pod_scales: tuple = L.DEFAULT_POD_SCALES
    pod_normalize: bool = False
    method: str = "muhdi"
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    disc_warm_start: bool = False
    eval_batch: int = 50
    dtype: str = "float32"
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        self.pod_scales = tuple(self.pod_scales)
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.iterations_per_step < 1:
            raise ValidationError("iterations_per_step must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        for name in ("lr_seg", "lr_disc"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValidationError("grad_clip must be > 0 or None")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    @property
    def multi_heads(self) -> bool:
        return self.method == "muhdi"

    @property
    def uses_dd(self) -> bool:
        return self.method in ("dd_only", "dd_fd", "muhdi") and self.weights.lambda_dd > 0

    @property
    def uses_fd(self) -> bool:
        return self.method in ("fd_only", "dd_fd", "muhdi") and self.weights.lambda_fd > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pod_scales"] = list(self.pod_scales)
        return d


@dataclass
class StepState:
    t: int
    current: ModelBundle
    previous: Optional[FrozenSnapshot]
    discriminator: Discriminator
    iteration: int = 0
    losses: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.previous is not None) != (self.t >= 2):
            raise ContractError(f"previous snapshot must be present iff t >= 2 (t={self.t})")


# -- optimizers --------------------------------------------------------------


def make_optimizers(partition: dict, cfg: TrainConfig):
    seg = torch.optim.SGD(
        partition["segmentation"], lr=cfg.lr_seg, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    disc = torch.optim.Adam(partition["discriminator"], lr=cfg.lr_disc)
    return {"segmentation": seg, "discriminator": disc}


def optimizer_step_contract(partition: dict, optimizer: torch.optim.Optimizer, role: str) -> dict:
    """Step ``optimizer`` for partition ``role`` and verify the other partition is untouched.

    Returns the largest absolute parameter change and the count of changed
    tensors within ``role``.
    """
    if role not in partition:
        raise ContractError(f"unknown partition {role!r}")
    other = [p for name, ps in partition.items() if name != role for p in ps]
    before_other = parameter_digest(other)
    before = [p.detach().clone() for p in partition[role]]
    optimizer.step()
    if parameter_digest(other) != before_other:
        raise ContractError(f"{role} optimizer step changed parameters outside its partition")
    deltas = [(p.detach() - b).abs().max().item() if p.numel() else 0.0 for p, b in zip(partition[role], before)]
    return {
        "role": role,
        "max_abs_delta": max(deltas, default=0.0),
        "changed": sum(d > 0 for d in deltas),
    }


@contextlib.contextmanager
def no_param_grad(module: torch.nn.Module):
    """Let gradients flow through ``module`` without accumulating into its parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


# -- one step ----------------------------------------------------------------


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _checked(value, component: str, t: int, it: int):
    if not math.isfinite(_scalar(value)):
        raise NumericalAbort(component, iteration=it, step=t)
    return value


def train_step(
    cfg: TrainConfig,
    t: int,
    source: DatasetManifest,
    target: DatasetManifest,
    previous: Optional[FrozenSnapshot],
    log: AccessLog,
    curves: Optional[list] = None,
    discriminator: Optional[Discriminator] = None,
    callback: Optional[Callable] = None,
    iteration_offset: int = 0,
) -> tuple[FrozenSnapshot, Discriminator]:
    """Train step ``t`` and return the frozen result with its discriminator.

    Each iteration alternates a segmentation update on the weighted model
    objective and a discriminator update on detached self-information
    maps. ``callback(state)`` runs after every iteration.
    """
    if target.role != "target" or target.order != t:
        raise ContractError(f"step {t} must train on target {t}, got {target.domain_id} (order {target.order})")
    if source.role != "source":
        raise ContractError(f"{source.domain_id} is not a source domain")
    dtype = cfg.torch_dtype
    if t == 1:
        if previous is not None:
            raise ContractError("step 1 takes no previous snapshot")
        bundle = ModelBundle(cfg.net, step_index=1, seed=cfg.seed)
    else:
        if previous is None:
            raise ContractError(f"step {t} requires the previous frozen snapshot")
        if previous.step_index != t - 1:
            raise ContractError(f"previous snapshot is from step {previous.step_index}, expected {t - 1}")
        bundle = spawn_next_step(previous, with_specialist=cfg.multi_heads)
    bundle.to(dtype).train()
    if discriminator is None or not cfg.disc_warm_start:
        discriminator = make_discriminator(cfg.net, seed=cfg.seed * 1000 + t)
    discriminator.to(dtype).train()
    partition = parameter_partition(bundle, discriminator)
    opts = make_optimizers(partition, cfg)
    state = StepState(t, bundle, previous, discriminator)

    w = cfg.weights
    train_head = "specialist" if (t >= 2 and cfg.multi_heads) else "generalist"
    use_dd = t >= 2 and cfg.uses_dd
    use_fd = t >= 2 and cfg.uses_fd
    rng = np.random.default_rng([cfg.seed, t])
    nan = float("nan")

    for it in range(cfg.iterations_per_step):
        xs, ys = collate(load_batch(source, "train", cfg.batch_size, t, log, rng=rng), dtype)
        xt, _ = collate(load_batch(target, "train", cfg.batch_size, t, log, rng=rng), dtype)

        # segmentation update
        opts["segmentation"].zero_grad(set_to_none=True)
        src_heads = {train_head} | ({"generalist"} if use_dd else set())
        tgt_heads = {train_head} | ({"generalist"} if use_dd and cfg.multi_heads else set())
        p_s, feats_s = bundle.forward_heads(xs, sorted(src_heads))
        p_t, _ = bundle.forward_heads(xt, sorted(tgt_heads))
        seg = L.segmentation_ce(p_s[train_head], ys)
        info_t = L.self_information_map(p_t[train_head])
        with no_param_grad(discriminator):
            adv = L.adversarial_fool_loss(discriminator(info_t))

        kl_spec = kl_prev = pod = None
        dd = fd = 0.0
        if use_dd or use_fd:
            p_prev, feats_prev = previous.forward_heads(xs, ("generalist",))
        if use_dd:
            kl_prev = L.kl_map(p_prev["generalist"], p_s["generalist"])
            kl_spec = L.kl_map(p_t[train_head], p_t["generalist"]) if cfg.multi_heads else []
            dd = L.generalist_distillation_loss(kl_spec, kl_prev, w)
        if use_fd:
            pod = L.local_pod_loss(feats_s, feats_prev, cfg.pod_scales, cfg.pod_normalize)
            fd = pod
        try:
            total = L.total_model_loss(seg, adv, dd, fd, w)
        except NonFiniteComponent as exc:
            raise NumericalAbort(exc.component, iteration=it, step=t) from exc
        total.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(partition["segmentation"], cfg.grad_clip)
        opts["segmentation"].step()

        # discriminator update
        opts["discriminator"].zero_grad(set_to_none=True)
        info_s = L.self_information_map(p_s[train_head].detach(), check=False)
        loss_d = L.discriminator_loss(discriminator(info_s), discriminator(info_t.detach()))
        _checked(loss_d, "L_D", t, it)
        loss_d.backward()
        opts["discriminator"].step()

        state.iteration = it + 1
        state.losses = {
            "iteration": iteration_offset + it,
            "L_seg": _scalar(seg),
            "L_adv": _scalar(adv),
            "L_D": _scalar(loss_d),
            "KL_spec": _scalar(kl_spec.mean()) if isinstance(kl_spec, torch.Tensor) else nan,
            "KL_prev": _scalar(kl_prev.mean()) if kl_prev is not None else nan,
            "L_pod": _scalar(pod) if pod is not None else nan,
            "L_total": _scalar(total),
        }
        if curves is not None:
            curves.append(state.losses)
        if callback is not None:
            callback(state)

    if previous is not None:
        previous.verify()
    return snapshot_freeze(bundle), discriminator


def train_first_step(cfg, source, target1, log=None, curves=None) -> FrozenSnapshot:
    snap, _ = train_step(cfg, 1, source, target1, None, log if log is not None else AccessLog(), curves)
    return snap


def train_subsequent_step(cfg, source, target_t, previous, log=None, curves=None) -> FrozenSnapshot:
    if previous is None:
        raise ContractError("a subsequent step requires the previous frozen snapshot")
    snap, _ = train_step(
        cfg, previous.step_index + 1, source, target_t, previous, log if log is not None else AccessLog(), curves
    )
    return snap


# -- evaluation and protocol -------------------------------------------------


@torch.no_grad()
def evaluate_domain(snapshot: FrozenSnapshot, manifest: DatasetManifest, step: int, log: AccessLog, batch: int = 50):
    """Generalist-head confusion matrix over a domain's eval split."""
    cm = ConfusionMatrix(snapshot.cfg.num_classes)
    dtype = next(snapshot._bundle.parameters()).dtype
    n = manifest.count("eval")
    for start in range(0, n, batch):
        samples = load_batch(manifest, "eval", None, step, log, indices=range(start, min(n, start + batch)), context="eval")
        x, y = collate(samples, dtype)
        probs, _ = snapshot.forward_heads(x, ("generalist",))
        cm.accumulate(probs["generalist"].argmax(dim=1).numpy(), y.numpy())
    return cm


def evaluate(snapshot, manifests, step, log, batch=50) -> MetricsReport:
    report = MetricsReport(step=step)
    for m in manifests:
        iou, miou = iou_from_confusion(evaluate_domain(snapshot, m, step, log, batch))
        report.domains.append(DomainResult(m.domain_id, iou, miou))
    return report


def write_curves(path, curves: list) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in curves:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})


def run_protocol(
    cfg: TrainConfig,
    source: DatasetManifest,
    targets: list,
    run_dir=None,
    first_step: Optional[FrozenSnapshot] = None,
    callback: Optional[Callable] = None,
) -> dict:
    """Train on targets in order, evaluating the generalist on all seen targets after each step.

    ``first_step`` lets callers reuse a step-1 snapshot shared by several
    methods; it must have been trained with the same seed and settings.
    Returns ``{"reports", "snapshots", "audit", "failed", "curves"}``.
    """
    if not targets:
        raise ValidationError("at least one target domain is required")
    run_dir = Path(run_dir) if run_dir is not None else None
    log = AccessLog(run_dir / "access_log.jsonl" if run_dir else None)
    curves: list = []
    reports, snapshots = [], []
    previous = None
    discriminator = None
    for t, target in enumerate(targets, start=1):
        if t == 1 and first_step is not None:
            snap = first_step
        else:
            snap, discriminator = train_step(
                cfg, t, source, target, previous, log, curves, discriminator, callback,
                iteration_offset=(t - 1) * cfg.iterations_per_step,
            )
        if previous is not None:
            previous.verify()
        snapshots.append(snap)
        report = evaluate(snap, targets[:t], t, log, cfg.eval_batch)
        hist = history_of(reports + [report])
        intro = {m.domain_id: k for k, m in enumerate(targets[:t], start=1)}
        report.forgetting = forgetting(hist, intro, final_step=t)
        reports.append(report)
        if run_dir is not None:
            ck = run_dir / "checkpoints"
            snap.save(ck / f"step_{t}.bin", run_dir / f"manifest_{t}.json", config_echo=cfg.to_dict())
            emit_report([report], run_dir)
        previous = snap
    result = audit(log, len(targets))
    if run_dir is not None:
        write_curves(run_dir / "curves.csv", curves)
        (run_dir / "audit.json").write_text(json.dumps(result, indent=2, sort_keys=True))
        emit_report(reports, run_dir)
    return {
        "reports": reports,
        "snapshots": snapshots,
        "audit": result,
        "failed": not result["compliant"],
        "curves": curves,
    }


def with_method(cfg: TrainConfig, method: str, seed: Optional[int] = None) -> TrainConfig:
    return replace(cfg, method=method, seed=cfg.seed if seed is None else seed)
