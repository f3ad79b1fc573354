"""Training loop: Adam with bias correction, stepped lr decay, checkpointing.

All randomness is derived statelessly from (seed, epoch, sample index) so a
resumed run reproduces an uninterrupted one bit for bit, and single-threaded
runs are deterministic end to end.
"""

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import metrics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Sample, SamplingSpec, augment, jitter_points_along_ray, sample_points
from .geometry import project_points
from .loss import LossWeights, total_loss
from .network import PointFusionNet, FusionConfig, predict, prepare_sample_points


class NonFiniteGradientError(RuntimeError):
    pass


class TrainAbort(RuntimeError):
    """Raised when the loss goes non-finite; the last good checkpoint survives."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol. Defaults are desk scale; the reference protocol
    (150 epochs, batch 32) stays available through the config file."""

    epochs: int = 30
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    lr0: float = 1.2e-4
    decay_factor: float = 0.94
    decay_every: int = 5
    decay_start: int = 10
    seed: int = 0
    checkpoint_every: int = 10
    grad_clip: float = 10.0
    threads: int = 1
    augment: bool = False
    pattern: str = "random"
    point_counts: Tuple[int, ...] = (32,)
    point_noise: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if min(self.lr0, self.decay_factor, self.eps_opt) <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("momentum coefficients must lie in [0, 1)")
        if self.decay_every < 1 or self.decay_start < 0:
            raise ValueError("invalid decay schedule")
        if not self.point_counts:
            raise ValueError("point_counts must not be empty")
        if self.point_noise < 0:
            raise ValueError("point_noise must be non-negative")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant until decay_start, then multiplicative steps every decay_every."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < cfg.decay_start:
        return cfg.lr0
    steps = 1 + (epoch - cfg.decay_start) // cfg.decay_every
    return cfg.lr0 * cfg.decay_factor ** steps


def derive_seed(*parts) -> int:
    """Stable scalar seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class AdamState:
    m: List[torch.Tensor]
    v: List[torch.Tensor]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(m=[torch.zeros_like(p) for p in params],
                   v=[torch.zeros_like(p) for p in params])


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
              state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradientError("non-finite gradient; aborting step")
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            p.add_(-lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps_opt))


def clip_gradients(grads: Sequence[torch.Tensor], max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = torch.sqrt(sum((g ** 2).sum() for g in grads if g is not None))
    total = float(total)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        with torch.no_grad():
            for g in grads:
                if g is not None:
                    g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# checkpoint plumbing


def save_train_checkpoint(path, model: PointFusionNet, state: AdamState,
                          epochs_done: int) -> None:
    entries = {}
    names = [n for n, _ in model.named_parameters()]
    for (name, p), m, v in zip(model.named_parameters(), state.m, state.v):
        entries[f"param/{name}"] = p.detach().cpu().numpy()
        entries[f"adam/m/{name}"] = m.cpu().numpy()
        entries[f"adam/v/{name}"] = v.cpu().numpy()
    entries["meta/adam_step"] = np.array([state.step], dtype=np.float32)
    entries["meta/epochs_done"] = np.array([epochs_done], dtype=np.float32)
    assert len(names) == len(state.m)
    save_checkpoint(path, entries)


def load_params_into_model(model: PointFusionNet, entries: dict) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in entries:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            arr = entries[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"parameter {name}: checkpoint shape {arr.shape} does not "
                    f"match model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.copy()))


def load_train_checkpoint(path, model: PointFusionNet):
    """Restore parameters + optimizer state; returns (state, epochs_done)."""
    entries = load_checkpoint(path)
    load_params_into_model(model, entries)
    state = AdamState.for_params([p for _, p in model.named_parameters()])
    for i, (name, _) in enumerate(model.named_parameters()):
        for prefix, slot in (("adam/m/", state.m), ("adam/v/", state.v)):
            key = prefix + name
            if key not in entries:
                raise CheckpointError(f"checkpoint missing {key}")
            slot[i] = torch.from_numpy(entries[key].copy())
    state.step = int(entries["meta/adam_step"][0])
    epochs_done = int(entries["meta/epochs_done"][0])
    return state, epochs_done


def load_model_checkpoint(path, model: PointFusionNet) -> None:
    """Parameters only (for evaluation/inference)."""
    load_params_into_model(model, load_checkpoint(path))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    final_checkpoint: str
    log_path: str
    checkpoints: List[str] = field(default_factory=list)
    final_loss: float = float("nan")


def _prepare_item(sample: Sample, model_cfg: FusionConfig, cfg: TrainConfig,
                  epoch: int, index: int):
    item_seed = derive_seed(cfg.seed, epoch, index)
    rng = np.random.default_rng(item_seed)
    if cfg.augment:
        sample = augment(sample, seed=derive_seed(item_seed, 1),
                         sampling=SamplingSpec(pattern=cfg.pattern,
                                               count=max(cfg.point_counts),
                                               seed=derive_seed(item_seed, 2)))
    count = int(rng.choice(np.asarray(cfg.point_counts)))
    count = min(count, int(sample.gt_mask.sum()))
    spec = SamplingSpec(pattern=cfg.pattern, count=count,
                        seed=derive_seed(item_seed, 3))
    cloud = sample_points(sample.gt_depth, sample.gt_mask, sample.intrinsics,
                          spec, rgb=sample.rgb)
    if cfg.point_noise > 0:
        cloud = jitter_points_along_ray(
            cloud, cfg.point_noise, np.random.default_rng(derive_seed(item_seed, 4)))
    sparse = project_points(cloud, sample.intrinsics)
    points = prepare_sample_points(sparse, cloud, model_cfg)
    return sample, sparse, points


def _batch_tensors(samples, sparses, device):
    rgb = torch.stack([torch.from_numpy(s.rgb) for s in samples]).to(device)
    sparse = torch.stack(
        [torch.from_numpy(sp.depth).unsqueeze(0) for sp in sparses]).to(device)
    gt = torch.stack(
        [torch.from_numpy(s.gt_depth).unsqueeze(0) for s in samples]).to(device)
    mask = torch.stack(
        [torch.from_numpy(s.gt_mask).unsqueeze(0) for s in samples]).to(device)
    return rgb, sparse, gt, mask


def evaluate_model(model: PointFusionNet, dataset: Sequence[Sample],
                   count: int, pattern: str = "random",
                   seed: int = 0, noise: float = 0.0) -> metrics.MetricReport:
    """Mean per-image metrics with freshly sampled point sets."""
    reports = []
    for i, sample in enumerate(dataset):
        spec = SamplingSpec(pattern=pattern,
                            count=min(count, int(sample.gt_mask.sum())),
                            seed=derive_seed(seed, i))
        cloud = sample_points(sample.gt_depth, sample.gt_mask,
                              sample.intrinsics, spec, rgb=sample.rgb)
        if noise > 0:
            cloud = jitter_points_along_ray(
                cloud, noise, np.random.default_rng(derive_seed(seed, i, 1)))
        est = predict(model, sample.rgb, cloud, sample.intrinsics)
        reports.append(metrics.evaluate(est.depth, sample.gt_depth, sample.gt_mask))
    return metrics.mean_report(reports)


def train(model: PointFusionNet, dataset: Sequence[Sample], cfg: TrainConfig,
          out_dir, val_dataset: Optional[Sequence[Sample]] = None,
          weights: Optional[LossWeights] = None,
          resume: Optional[str] = None) -> TrainResult:
    """Optimize the model on a dataset; writes logs and checkpoints to out_dir.

    The training log is an append-only CSV of (epoch, step, lr, loss, rmse),
    free of wall-clock data so reruns produce identical bytes.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    os.makedirs(out_dir, exist_ok=True)
    torch.set_num_threads(cfg.threads)
    device = next(model.parameters()).device
    weights = (weights or LossWeights()).for_scales(model.config.num_fusion_nets)

    params = [p for _, p in model.named_parameters()]
    if resume:
        state, start_epoch = load_train_checkpoint(resume, model)
    else:
        state, start_epoch = AdamState.for_params(params), 0

    log_path = os.path.join(out_dir, "train_log.csv")
    eval_path = os.path.join(out_dir, "eval_log.csv")
    checkpoints: List[str] = []
    last_loss = float("nan")
    global_step = state.step

    log_f = open(log_path, "a" if resume else "w")
    eval_f = None
    if val_dataset is not None:
        eval_f = open(eval_path, "a" if resume else "w")
        if not resume:
            eval_f.write("epoch,rel,rmse,mae,delta1\n")
    if not resume:
        log_f.write("epoch,step,lr,loss,rmse\n")

    def _save(epoch_done: int) -> str:
        path = os.path.join(out_dir, f"checkpoint_{epoch_done:04d}.pfck")
        save_train_checkpoint(path, model, state, epoch_done)
        checkpoints.append(path)
        return path

    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = np.random.default_rng(
                derive_seed(cfg.seed, 7919, epoch)).permutation(len(dataset))
            for lo in range(0, len(order), cfg.batch_size):
                batch_ids = order[lo:lo + cfg.batch_size]
                prepared = [_prepare_item(dataset[int(i)], model.config, cfg,
                                          epoch, int(i)) for i in batch_ids]
                samples = [p[0] for p in prepared]
                sparses = [p[1] for p in prepared]
                points = [p[2] for p in prepared]
                rgb, sparse, gt, mask = _batch_tensors(samples, sparses, device)

                out = model(rgb, sparse, points)
                loss = total_loss(out.scale_depths, gt, mask, weights)
                if not torch.isfinite(loss):
                    log_f.flush()
                    raise TrainAbort(
                        f"non-finite loss at epoch {epoch}",
                        last_checkpoint=checkpoints[-1] if checkpoints else None)
                model.zero_grad(set_to_none=True)
                loss.backward()
                grads = [p.grad for p in params]
                clip_gradients(grads, cfg.grad_clip)
                adam_step(params, grads, state, lr, cfg)

                with torch.no_grad():
                    diff = (out.depth - gt)[mask]
                    rmse = float(torch.sqrt((diff ** 2).mean()))
                last_loss = float(loss)
                global_step += 1
                log_f.write(f"{epoch},{global_step},{lr:.9g},"
                            f"{last_loss:.9g},{rmse:.9g}\n")

            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                _save(epoch + 1)
                if val_dataset is not None:
                    rep = evaluate_model(model, val_dataset, cfg.point_counts[0],
                                         pattern=cfg.pattern,
                                         seed=derive_seed(cfg.seed, 104729, epoch))
                    eval_f.write(f"{epoch + 1},{rep.rel:.9g},{rep.rmse:.9g},"
                                 f"{rep.mae:.9g},{rep.delta1:.9g}\n")
    finally:
        log_f.close()
        if eval_f is not None:
            eval_f.close()

    return TrainResult(final_checkpoint=checkpoints[-1], log_path=log_path,
                       checkpoints=checkpoints, final_loss=last_loss)
