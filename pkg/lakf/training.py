"""Trajectory-loss training of the learned gain networks."""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as func
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from torch import Tensor

from lakf.dataio import DatasetSplit, SemiSimTrajectory
from lakf.errors import DomainError, FormatError, ModeMismatchError, NumericError, TrainingDivergedError
from lakf.evaluation import collect_ious, network_model, average_recall
from lakf.geometry import StateMode, as_mode
from lakf.learned_filters import (
    GainNetwork,
    GainNetworkState,
    NetworkConfig,
    RecursionState,
    TrajectoryBatch,
    Variant,
    as_variant,
    build_network,
    collate,
    filter_batch,
    init_recursion,
    reset,
    run_window,
)
from lakf.logger import get_logger, get_logger_with_context

logger = get_logger(__name__)

CHECKPOINT_SCHEMA = "lakf-ckpt-v1"


class TrainConfig(BaseModel):
    """Optimizer, schedule and unrolling settings."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=50, ge=1, description="Training epochs")
    batch_size: int = Field(default=32, ge=1, description="Trajectories per batch")
    lr_init: float = Field(default=1e-3, gt=0, description="Initial learning rate")
    lr_final: float = Field(default=1e-7, ge=0, description="Final learning rate")
    schedule: str = Field(default="cosine", description="Learning-rate schedule")
    tbptt_window: Optional[int] = Field(default=None, ge=2, description="Truncated BPTT window in frames")
    grad_clip: float = Field(default=1.0, gt=0, description="Gradient-norm clipping threshold")
    seed: int = Field(default=0, description="Seed of initialization and shuffling")
    variant: Variant = Field(default=Variant.SIKNET, description="Network variant")
    mode: StateMode = Field(default=StateMode.XYAH, description="State mode")

    @field_validator("variant", mode="before")
    @classmethod
    def validate_variant(cls, v):
        variant = as_variant(v)
        if variant is Variant.KF:
            raise ValueError("the KF variant has no trainable parameters")
        return variant

    @field_validator("mode", mode="before")
    @classmethod
    def validate_mode(cls, v):
        return as_mode(v)

    @field_validator("schedule")
    @classmethod
    def validate_schedule(cls, v):
        if v != "cosine":
            raise ValueError(f"unsupported schedule {v!r}, only 'cosine' is implemented")
        return v

    @model_validator(mode="after")
    def check_lr_order(self):
        if not self.lr_final < self.lr_init:
            raise ValueError("lr_final must be smaller than lr_init")
        return self


@dataclass
class EpochRecord:
    """One line of the training log."""

    epoch: int
    step: int
    lr: float
    loss: float
    val_mar: Optional[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# ============================================================================
# Loss and schedule
# ============================================================================

def smooth_l1_loss(est: Union[Tensor, Sequence], gt: Union[Tensor, Sequence]) -> Tensor:
    """
    Smooth-L1 error summed over the four box coordinates, averaged over frames.

    Raises:
        DomainError: On shape mismatch or an empty sequence
    """
    est = torch.as_tensor(est, dtype=torch.float64)
    gt = torch.as_tensor(gt, dtype=torch.float64)
    if est.shape != gt.shape or est.dim() != 2 or est.shape[-1] != 4:
        raise DomainError(f"expected equal (T, 4) shapes, got {tuple(est.shape)} and {tuple(gt.shape)}")
    if est.shape[0] < 1:
        raise DomainError("loss needs at least one frame")
    return func.smooth_l1_loss(est, gt, reduction="none", beta=1.0).sum(dim=-1).mean()


def masked_trajectory_losses(est: Tensor, gt: Tensor, mask: Tensor, counts: Tensor) -> Tensor:
    """Per-trajectory Smooth-L1 sums over valid frames divided by the trajectory's frame count."""
    per_frame = func.smooth_l1_loss(est, gt, reduction="none", beta=1.0).sum(dim=-1)
    return (per_frame * mask).sum(dim=1) / counts


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_init at step 0 to lr_final at total_steps."""
    if total_steps <= 0:
        return cfg.lr_init
    progress = min(max(step, 0), total_steps) / total_steps
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * progress))


# ============================================================================
# Forward / backward over a batch
# ============================================================================

def _detach_state(state: RecursionState) -> RecursionState:
    def d(t):
        return None if t is None else t.detach()

    return RecursionState(x_post=d(state.x_post), y_prev=d(state.y_prev), t=state.t,
                          x_post_prev=d(state.x_post_prev), x_prior_prev=d(state.x_prior_prev),
                          x_prior=d(state.x_prior), scale=state.scale)


def batch_loss(net: GainNetwork, batch: TrajectoryBatch) -> Tensor:
    """Mean over trajectories of the frame-averaged loss on frames after the first."""
    out = filter_batch(net, batch.meas, batch.lengths, scale=batch.scale)
    counts = torch.as_tensor([n - 1 for n in batch.lengths], dtype=torch.float64)
    losses = masked_trajectory_losses(out.posterior[:, 1:], batch.gt[:, 1:], out.mask[:, 1:].double(), counts)
    return losses.mean()


def backward_batch(net: GainNetwork, batch: TrajectoryBatch, window: Optional[int] = None) -> float:
    """
    Accumulates gradients of batch_loss and returns its value.

    With a window, the recursion is cut every ``window`` frames: each window's
    share of the loss is backpropagated on its own and the state and hidden
    vectors are carried into the next window detached. A window covering the
    whole sequence gives the full-BPTT gradient.
    """
    if window is None:
        loss = batch_loss(net, batch)
        loss.backward()
        return float(loss.detach())

    batch_size, steps = batch.meas.shape[0], batch.meas.shape[1]
    mask = batch.mask
    counts = torch.as_tensor([n - 1 for n in batch.lengths], dtype=torch.float64)
    state = init_recursion(batch.meas[:, 0], scale=batch.scale)
    net_state: GainNetworkState = reset(net, batch_size)
    total = 0.0
    for start in range(1, steps, window):
        stop = min(steps, start + window)
        posts, _, state, net_state = run_window(net_state, state, batch.meas[:, start:stop], mask[:, start:stop])
        part = masked_trajectory_losses(posts, batch.gt[:, start:stop], mask[:, start:stop].double(), counts).mean()
        part.backward()
        total += float(part.detach())
        state = _detach_state(state)
        net_state = GainNetworkState(net=net, hidden=tuple(h.detach() for h in net_state.hidden))
    return total


def validation_mar(net: GainNetwork, trajs: Sequence[SemiSimTrajectory]) -> Optional[float]:
    """mAR of posterior boxes, unweighted over (dataset, category)."""
    if not trajs:
        return None
    pooled: Dict[Tuple[str, str], List] = {}
    for res in collect_ious(network_model(net), trajs):
        pooled.setdefault((res.dataset, res.category), []).extend(res.posterior.tolist())
    scores = [average_recall(ious) for ious in pooled.values() if ious]
    return float(sum(scores) / len(scores)) if scores else None


# ============================================================================
# Training loop
# ============================================================================

def train(split: DatasetSplit, cfg: TrainConfig, net_cfg: Optional[NetworkConfig] = None,
          log_path: Optional[Union[str, Path]] = None,
          checkpoint_path: Optional[Union[str, Path]] = None) -> Tuple[GainNetworkState, List[EpochRecord]]:
    """
    Trains a gain network with Adam on the train split, selecting by validation mAR.

    Args:
        split: Dataset split; train must be non-empty
        cfg: Training configuration
        net_cfg: Network architecture; its mode is forced to cfg.mode
        log_path: Optional JSON-lines training log
        checkpoint_path: Optional path receiving the best checkpoint

    Returns:
        Tuple of (network state holding the best parameters, per-epoch history)

    Raises:
        DomainError: If the train split is empty
        TrainingDivergedError: If a loss becomes non-finite
    """
    if not split.train:
        raise DomainError("training split is empty")
    net_cfg = (net_cfg or NetworkConfig()).model_copy(update={"mode": cfg.mode})
    net = build_network(cfg.variant, net_cfg, seed=cfg.seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr_init, betas=(0.9, 0.999))
    n_batches = math.ceil(len(split.train) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: lr_at(s, total_steps, cfg) / cfg.lr_init)
    generator = torch.Generator().manual_seed(cfg.seed)

    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w", encoding="utf-8")

    epoch_logger = get_logger_with_context(__name__, {"variant": cfg.variant.value, "mode": cfg.mode.value})
    logger.info(f"Training {cfg.variant.value} ({net.num_parameters()} parameters) on "
                f"{len(split.train)} trajectories, {cfg.epochs} epochs x {n_batches} batches")
    history: List[EpochRecord] = []
    best_state: Optional[Dict[str, Tensor]] = None
    best_mar = -math.inf
    best_epoch = 0
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            net.train()
            order = torch.randperm(len(split.train), generator=generator).tolist()
            epoch_loss = 0.0
            for b in range(n_batches):
                chunk = [split.train[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                batch = collate(chunk, cfg.mode, normalize=net_cfg.normalize_inputs)
                optimizer.zero_grad()
                try:
                    loss = backward_batch(net, batch, cfg.tbptt_window)
                except NumericError as exc:
                    raise TrainingDivergedError(epoch, step, float("nan")) from exc
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch, step, loss)
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
                optimizer.step()
                scheduler.step()
                step += 1
                epoch_loss += loss

            val_mar = validation_mar(net, split.val)
            record = EpochRecord(epoch=epoch, step=step, lr=optimizer.param_groups[0]["lr"],
                                 loss=epoch_loss / n_batches, val_mar=val_mar)
            history.append(record)
            if log_file is not None:
                log_file.write(record.to_json() + "\n")
                log_file.flush()
            epoch_logger.info(f"epoch {epoch}/{cfg.epochs} loss={record.loss:.6f} lr={record.lr:.3e} val_mAR={val_mar}",
                              extra=asdict(record))

            score = val_mar if val_mar is not None else -record.loss
            if score > best_mar:
                best_mar = score
                best_epoch = epoch
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    finally:
        if log_file is not None:
            log_file.close()

    if best_state is not None:
        net.load_state_dict(best_state)
    logger.info(f"Best epoch {best_epoch} (score {best_mar:.6f})")
    if checkpoint_path is not None:
        best_val = history[best_epoch - 1].val_mar if best_epoch else None
        save_checkpoint(checkpoint_path, Checkpoint.from_network(net, cfg, best_epoch, best_val))
    return reset(net), history


# ============================================================================
# Gradient check
# ============================================================================

def gradient_check(net: Optional[GainNetwork], meas: Tensor, gt: Tensor, max_params: int = 200,
                   step: float = 1e-5, seed: int = 0) -> float:
    """
    Largest relative difference between autograd and central finite differences.

    Args:
        net: Gain network in float64
        meas: ``(T, 4)`` or ``(B, T, 4)`` measurements to differentiate
        gt: Ground truth of the same shape
        max_params: Number of sampled scalar parameters
        step: Finite-difference step
        seed: Seed of the parameter sample

    Returns:
        ``max |a - n| / max(|a|, |n|, 1e-4)`` over the sampled parameters

    Raises:
        DomainError: For the KF (no network) or an empty parameter selection
    """
    if net is None or not isinstance(net, GainNetwork) or net.variant is Variant.KF:
        raise DomainError("gradient_check needs a learned gain network")
    params = [p for p in net.parameters() if p.requires_grad]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    if total == 0 or max_params < 1:
        raise DomainError("gradient_check has no parameters to check")

    if meas.dim() == 2:
        meas, gt = meas.unsqueeze(0), gt.unsqueeze(0)
    batch = TrajectoryBatch(meas=meas.double(), gt=gt.double(), lengths=[meas.shape[1]] * meas.shape[0])

    def loss_fn() -> Tensor:
        return batch_loss(net, batch)

    generator = torch.Generator().manual_seed(seed)
    picks = torch.randperm(total, generator=generator)[:max_params].tolist()
    offsets = [0]
    for size in sizes:
        offsets.append(offsets[-1] + size)

    net.zero_grad()
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for flat_index in picks:
            p_index = next(i for i in range(len(params)) if offsets[i] <= flat_index < offsets[i + 1])
            param = params[p_index]
            local = flat_index - offsets[p_index]
            analytic = float(param.grad.reshape(-1)[local])
            values = param.data.view(-1)
            original = float(values[local])
            values[local] = original + step
            plus = float(loss_fn())
            values[local] = original - step
            minus = float(loss_fn())
            values[local] = original
            numeric = (plus - minus) / (2.0 * step)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
            worst = max(worst, rel)
    net.zero_grad()
    logger.debug(f"gradient_check over {len(picks)} parameters: max rel err {worst:.3e}")
    return worst


# ============================================================================
# Checkpoints
# ============================================================================

@dataclass(eq=False)
class Checkpoint:
    """Everything needed to rebuild a trained network."""

    variant: Variant
    mode: StateMode
    network: NetworkConfig
    state_dict: Dict[str, Tensor]
    train: Dict[str, Any]
    epoch: int
    val_mar: Optional[float]
    schema: str = CHECKPOINT_SCHEMA

    @classmethod
    def from_network(cls, net: GainNetwork, cfg: Optional[TrainConfig] = None, epoch: int = 0,
                     val_mar: Optional[float] = None) -> "Checkpoint":
        return cls(
            variant=net.variant,
            mode=net.config.mode,
            network=net.config,
            state_dict={k: v.detach().clone() for k, v in net.state_dict().items()},
            train=cfg.model_dump(mode="json") if cfg is not None else {},
            epoch=epoch,
            val_mar=val_mar,
        )

    def build_network(self) -> GainNetwork:
        net = build_network(self.variant, self.network)
        net.load_state_dict(self.state_dict)
        return net


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """Writes a checkpoint with torch.save; all metadata is stored as plain types."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "schema": ckpt.schema,
        "variant": ckpt.variant.value,
        "mode": ckpt.mode.value,
        "network": ckpt.network.model_dump(mode="json"),
        "state_dict": ckpt.state_dict,
        "train": ckpt.train,
        "epoch": ckpt.epoch,
        "val_mar": ckpt.val_mar,
    }, path)
    logger.info(f"Checkpoint saved to {path}")
    return path


def load_checkpoint(path: Union[str, Path], expect_mode=None, expect_variant=None,
                    allow_mismatch: bool = False) -> Checkpoint:
    """
    Reads a checkpoint written by save_checkpoint.

    Args:
        path: Checkpoint file
        expect_mode: State mode the caller will run in
        expect_variant: Variant the caller expects
        allow_mismatch: Accept a different mode or variant

    Raises:
        FormatError: On an unreadable file or schema problem
        ModeMismatchError: On a mode or variant mismatch without override
    """
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise FormatError(f"checkpoint {path} is not a mapping")
    for key in ("schema", "variant", "mode", "network", "state_dict", "train", "epoch", "val_mar"):
        if key not in raw:
            raise FormatError(f"checkpoint {path} is incomplete", field=key)
    if raw["schema"] != CHECKPOINT_SCHEMA:
        raise FormatError(f"unsupported checkpoint schema {raw['schema']!r}", field="schema")
    try:
        network = NetworkConfig.model_validate(raw["network"])
        variant = as_variant(raw["variant"])
        mode = as_mode(raw["mode"])
    except (ValidationError, DomainError) as exc:
        raise FormatError(f"invalid checkpoint metadata: {exc}", field="network") from None

    if not allow_mismatch:
        if expect_mode is not None and as_mode(expect_mode) is not mode:
            raise ModeMismatchError(f"checkpoint is {mode.value}, requested {as_mode(expect_mode).value}")
        if expect_variant is not None and as_variant(expect_variant) is not variant:
            raise ModeMismatchError(f"checkpoint is {variant.value}, requested {as_variant(expect_variant).value}")

    ckpt = Checkpoint(variant=variant, mode=mode, network=network, state_dict=raw["state_dict"],
                      train=raw["train"], epoch=int(raw["epoch"]), val_mar=raw["val_mar"], schema=raw["schema"])
    try:
        ckpt.build_network()
    except RuntimeError as exc:
        raise FormatError(f"state_dict does not match {variant.value}: {exc}", field="state_dict") from None
    return ckpt
