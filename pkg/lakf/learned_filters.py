"""Learning-aided Kalman gain recursions: KNet, SKNet and SIKNet.

All variants share the constant-velocity mean prediction of the model-based
filter and replace the analytic gain by a recurrent network. Covariances are
never propagated. Tensors are float64 and batched along the first axis.
"""

from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as func
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import Tensor, nn

from lakf.dataio import SemiSimTrajectory
from lakf.errors import DomainError, ModeMismatchError, NumericError
from lakf.geometry import BBox, StateMode, as_mode, convert_mode
from lakf.kalman_core import MIN_SIZE, SIZE_INDICES, FilterStep, init_from_measurement, predict_mean
from lakf.linear_models import MEAS_DIM, STATE_DIM, LinearModelConfig, build_measurement, build_transition
from lakf.logger import get_logger
from lakf.sie import SemanticIndependentEncoder, SIEConfig

logger = get_logger(__name__)

DTYPE = torch.float64


class Variant(str, Enum):
    """Filter family; KF is the model-based baseline without parameters."""

    KF = "KF"
    KNET = "KNET"
    SKNET = "SKNET"
    SIKNET = "SIKNET"


def as_variant(variant: Union["Variant", str]) -> Variant:
    try:
        return variant if isinstance(variant, Variant) else Variant(str(variant).upper())
    except ValueError:
        raise DomainError(f"unknown filter variant: {variant!r}") from None


class NetworkConfig(BaseModel):
    """Architecture and state-space settings shared by the learned variants."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: StateMode = Field(default=StateMode.XYAH, description="State mode")
    dt: float = Field(default=1.0, gt=0, description="Frame interval")
    hidden_dim: int = Field(default=4 * (STATE_DIM + MEAS_DIM), ge=1, description="Recurrent width")
    sie_channels: int = Field(default=4, ge=1, description="SIE convolution channels")
    normalize_inputs: bool = Field(default=False, description="Divide network inputs by the image size")

    @field_validator("mode", mode="before")
    @classmethod
    def validate_mode(cls, v):
        return as_mode(v)

    def linear_config(self) -> LinearModelConfig:
        return LinearModelConfig(mode=self.mode, dt=self.dt)


# ============================================================================
# Features
# ============================================================================

@dataclass(frozen=True, eq=False)
class FeatureBundle:
    """Network inputs of one step, each ``(..., rows, cols)``."""

    z1: Tensor  # state evolution and update differences, (8, 2)
    z2: Tensor  # measurement and innovation differences, (4, 2)
    z3: Tensor  # x_{t-2|t-2}, x_{t-1|t-2}, x_{t-1|t-1}, (8, 3)
    z4: Tensor  # y_{t-1}, y_{t|t-1}, y_t, (4, 3)


def input_scale(mode: StateMode, img_w: float, img_h: float) -> Tuple[Tensor, Tensor]:
    """Per-entry divisors of state and measurement vectors for image-size normalization."""
    s3 = 1.0 if as_mode(mode) is StateMode.XYAH else float(img_w)
    w, h = float(img_w), float(img_h)
    state = torch.tensor([w, w, h, h, s3, s3, h, h], dtype=DTYPE)
    meas = torch.tensor([w, h, s3, h], dtype=DTYPE)
    return state, meas


def compute_features(x_post_prev: Tensor, y_t: Tensor,
                     x_post_prev2: Optional[Tensor] = None,
                     x_prior_prev: Optional[Tensor] = None,
                     y_prev: Optional[Tensor] = None,
                     y_pred: Optional[Tensor] = None,
                     scale: Optional[Tuple[Tensor, Tensor]] = None) -> FeatureBundle:
    """
    Assembles the four feature groups available at time t.

    Missing lags replicate the nearest available quantity, so on the first
    step the difference features are zero and the raw features repeat the
    only known vectors.

    Args:
        x_post_prev: Posterior at t-1
        y_t: Current measurement
        x_post_prev2: Posterior at t-2
        x_prior_prev: Prior for t-1 made at t-2
        y_prev: Measurement at t-1
        y_pred: Predicted measurement for t
        scale: Optional (state, measurement) divisors

    Returns:
        FeatureBundle
    """
    if x_post_prev2 is None:
        x_post_prev2 = x_post_prev
    if x_prior_prev is None:
        x_prior_prev = x_post_prev
    if y_prev is None:
        y_prev = y_t
    if y_pred is None:
        y_pred = y_t
    if scale is not None:
        state_scale, meas_scale = scale
        x_post_prev, x_post_prev2, x_prior_prev = (v / state_scale for v in (x_post_prev, x_post_prev2, x_prior_prev))
        y_t, y_prev, y_pred = (v / meas_scale for v in (y_t, y_prev, y_pred))
    return FeatureBundle(
        z1=torch.stack([x_post_prev - x_post_prev2, x_post_prev - x_prior_prev], dim=-1),
        z2=torch.stack([y_t - y_prev, y_t - y_pred], dim=-1),
        z3=torch.stack([x_post_prev2, x_prior_prev, x_post_prev], dim=-1),
        z4=torch.stack([y_prev, y_pred, y_t], dim=-1),
    )


def _unit_columns(z: Tensor) -> Tensor:
    return func.normalize(z, p=2, dim=-2, eps=1e-12).flatten(-2)


# ============================================================================
# Gain networks
# ============================================================================

def compose_gain(g1: Tensor, g2: Tensor, h_t: Tensor) -> Tensor:
    """``K = G1 H^T G2`` for ``(..., 8, 8)`` and ``(..., 4, 4)`` factors."""
    return g1 @ h_t @ g2


class RecurrentHead(nn.Module):
    """FC + ReLU, a GRU cell, and an output FC reshaped to ``rows x cols``."""

    def __init__(self, in_dim: int, hidden_dim: int, rows: int, cols: int):
        super().__init__()
        self.rows = rows
        self.cols = cols
        self.input_layer = nn.Linear(in_dim, hidden_dim)
        self.activation = nn.ReLU()
        self.gru = nn.GRUCell(hidden_dim, hidden_dim)
        self.output_layer = nn.Linear(hidden_dim, rows * cols)

    def forward(self, inputs: Tensor, hidden: Tensor) -> Tuple[Tensor, Tensor]:
        hidden = self.gru(self.activation(self.input_layer(inputs)), hidden)
        out = self.output_layer(hidden)
        return out.view(*out.shape[:-1], self.rows, self.cols), hidden


class GainNetwork(nn.Module):
    """Base class; subclasses map a FeatureBundle and hidden state to a gain."""

    variant: Variant = Variant.KF
    n_hidden: int = 1

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        self.register_buffer("h_t", torch.from_numpy(build_measurement().T.copy()), persistent=False)
        self.register_buffer("transition", torch.from_numpy(build_transition(cfg.linear_config())), persistent=False)

    def init_hidden(self, batch: int) -> Tuple[Tensor, ...]:
        return tuple(torch.zeros(batch, self.config.hidden_dim, dtype=DTYPE) for _ in range(self.n_hidden))

    def gain(self, features: FeatureBundle, hidden: Tuple[Tensor, ...]) -> Tuple[Tensor, Tuple[Tensor, ...]]:
        raise NotImplementedError

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class KNet(GainNetwork):
    """Single recurrent network emitting the full 8 x 4 gain from difference features."""

    variant = Variant.KNET
    n_hidden = 1

    def __init__(self, cfg: NetworkConfig):
        super().__init__(cfg)
        self.head = RecurrentHead(2 * STATE_DIM + 2 * MEAS_DIM, cfg.hidden_dim, STATE_DIM, MEAS_DIM)

    def gain(self, features, hidden):
        inputs = torch.cat([_unit_columns(features.z1), _unit_columns(features.z2)], dim=-1)
        K, h = self.head(inputs, hidden[0])
        return K, (h,)


class SKNet(GainNetwork):
    """Two recurrent networks: state differences drive G1, measurement differences drive G2."""

    variant = Variant.SKNET
    n_hidden = 2

    def __init__(self, cfg: NetworkConfig):
        super().__init__(cfg)
        self.head1 = RecurrentHead(2 * STATE_DIM, cfg.hidden_dim, STATE_DIM, STATE_DIM)
        self.head2 = RecurrentHead(2 * MEAS_DIM, cfg.hidden_dim, MEAS_DIM, MEAS_DIM)

    def gain(self, features, hidden):
        g1, h1 = self.head1(_unit_columns(features.z1), hidden[0])
        g2, h2 = self.head2(_unit_columns(features.z2), hidden[1])
        return compose_gain(g1, g2, self.h_t), (h1, h2)


class SIKNet(GainNetwork):
    """
    SKNet with every feature group embedded by its own Semantic-Independent Encoder.

    G1 sees the state-side embeddings (z1, z3); G2 sees all four.
    """

    variant = Variant.SIKNET
    n_hidden = 2

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__(cfg)
        c = cfg.sie_channels
        self.sie1 = SemanticIndependentEncoder(SIEConfig(m=STATE_DIM, n=2, channels=c), seed=seed + 1)
        self.sie2 = SemanticIndependentEncoder(SIEConfig(m=MEAS_DIM, n=2, channels=c), seed=seed + 2)
        self.sie3 = SemanticIndependentEncoder(SIEConfig(m=STATE_DIM, n=3, channels=c), seed=seed + 3)
        self.sie4 = SemanticIndependentEncoder(SIEConfig(m=MEAS_DIM, n=3, channels=c), seed=seed + 4)
        in1 = self.sie1.out_dim + self.sie3.out_dim
        in2 = in1 + self.sie2.out_dim + self.sie4.out_dim
        self.head1 = RecurrentHead(in1, cfg.hidden_dim, STATE_DIM, STATE_DIM)
        self.head2 = RecurrentHead(in2, cfg.hidden_dim, MEAS_DIM, MEAS_DIM)

    def gain(self, features, hidden):
        emb1 = self.sie1(features.z1)
        emb2 = self.sie2(features.z2)
        emb3 = self.sie3(features.z3)
        emb4 = self.sie4(features.z4)
        g1, h1 = self.head1(torch.cat([emb1, emb3], dim=-1), hidden[0])
        g2, h2 = self.head2(torch.cat([emb1, emb2, emb3, emb4], dim=-1), hidden[1])
        return compose_gain(g1, g2, self.h_t), (h1, h2)


NETWORKS = {Variant.KNET: KNet, Variant.SKNET: SKNet, Variant.SIKNET: SIKNet}


def build_network(variant: Union[Variant, str], cfg: Optional[NetworkConfig] = None, seed: int = 0) -> GainNetwork:
    """
    Creates a float64 gain network with deterministic initialization.

    Raises:
        DomainError: For the KF variant, which has no network
    """
    variant = as_variant(variant)
    if variant not in NETWORKS:
        raise DomainError(f"variant {variant.value} has no gain network")
    cfg = cfg or NetworkConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = NETWORKS[variant](cfg, seed=seed) if variant is Variant.SIKNET else NETWORKS[variant](cfg)
    net = net.to(DTYPE)
    logger.debug(f"Built {variant.value} with {net.num_parameters()} parameters")
    return net


@dataclass(frozen=True, eq=False)
class GainNetworkState:
    """Shared network parameters plus the hidden vectors of one batch of tracks."""

    net: GainNetwork
    hidden: Tuple[Tensor, ...]

    @property
    def variant(self) -> Variant:
        return self.net.variant


def reset(net: Union[GainNetwork, GainNetworkState], batch: int = 1) -> GainNetworkState:
    """Zero hidden state; parameters are shared, never copied."""
    module = net.net if isinstance(net, GainNetworkState) else net
    return GainNetworkState(net=module, hidden=module.init_hidden(batch))


# ============================================================================
# Recursion
# ============================================================================

@dataclass(frozen=True, eq=False)
class RecursionState:
    """
    Lagged quantities of the learned recursion for a batch of tracks.

    ``x_post`` is the latest posterior at frame ``t``. ``x_prior`` is set only
    between predict and update.
    """

    x_post: Tensor
    y_prev: Tensor
    t: int = 1
    x_post_prev: Optional[Tensor] = None
    x_prior_prev: Optional[Tensor] = None
    x_prior: Optional[Tensor] = None
    scale: Optional[Tuple[Tensor, Tensor]] = None


@dataclass(frozen=True, eq=False)
class StepDiagnostics:
    K: Tensor
    innovation: Tensor
    features: FeatureBundle


def clamp_sizes(x: Tensor) -> Tensor:
    """Replaces non-positive aspect/width and height entries by the minimum size."""
    mask = torch.zeros(STATE_DIM, dtype=torch.bool)
    mask[list(SIZE_INDICES)] = True
    return torch.where(mask & (x <= 0), torch.full_like(x, MIN_SIZE), x)


def apply_gain(x_prior: Tensor, K: Tensor, innovation: Tensor) -> Tensor:
    """``x_post = x_prior + K (y - y_pred)`` with size clamping."""
    return clamp_sizes(x_prior + (K @ innovation.unsqueeze(-1)).squeeze(-1))


def init_recursion(y1: Tensor, scale: Optional[Tuple[Tensor, Tensor]] = None) -> RecursionState:
    """Positions from the first measurement, zero velocities."""
    h = torch.from_numpy(build_measurement()).to(y1.dtype)
    return RecursionState(x_post=y1 @ h, y_prev=y1, t=1, scale=scale)


def predict_recursion(state: RecursionState, transition: Tensor) -> RecursionState:
    """Shared mean prediction; the result is a post-predict state."""
    return replace(state, x_prior=clamp_sizes(predict_mean(state.x_post, transition)))


def coast_recursion(state: RecursionState) -> RecursionState:
    """Accepts the prior as posterior for a frame without a measurement."""
    if state.x_prior is None:
        raise DomainError("coast needs a post-predict state")
    return replace(state, x_post=state.x_prior, x_post_prev=state.x_post, x_prior_prev=state.x_prior,
                   x_prior=None, t=state.t + 1)


def learned_step(state: RecursionState, net_state: GainNetworkState,
                 y_t: Tensor) -> Tuple[RecursionState, GainNetworkState, StepDiagnostics]:
    """
    One learned update from a post-predict state.

    Raises:
        DomainError: If the state has not been predicted
        NumericError: If the gain, posterior or hidden state is not finite
    """
    if state.x_prior is None:
        raise DomainError("learned update needs a post-predict state")
    net = net_state.net
    y_pred = state.x_prior @ net.h_t
    features = compute_features(state.x_post, y_t, state.x_post_prev, state.x_prior_prev,
                                state.y_prev, y_pred, scale=state.scale)
    K, hidden = net.gain(features, net_state.hidden)
    innovation = y_t - y_pred
    x_post = apply_gain(state.x_prior, K, innovation)
    step = state.t + 1
    if not torch.isfinite(x_post).all() or not all(torch.isfinite(h).all() for h in hidden):
        raise NumericError(f"non-finite {net.variant.value} activations", step=step)
    new_state = RecursionState(x_post=x_post, y_prev=y_t, t=step, x_post_prev=state.x_post,
                               x_prior_prev=state.x_prior, x_prior=None, scale=state.scale)
    return new_state, GainNetworkState(net=net, hidden=hidden), StepDiagnostics(K, innovation, features)


def _require_variant(net_state: GainNetworkState, expected: Variant) -> None:
    if net_state.variant is not expected:
        raise ModeMismatchError(f"expected a {expected.value} network, got {net_state.variant.value}")


def knet_step(state: RecursionState, net_state: GainNetworkState, y_t: Tensor):
    """KNet update: the recurrent network emits the full gain."""
    _require_variant(net_state, Variant.KNET)
    return learned_step(state, net_state, y_t)


def sknet_step(state: RecursionState, net_state: GainNetworkState, y_t: Tensor):
    """SKNet update: `K = G1 H^T G2` from two recurrent networks."""
    _require_variant(net_state, Variant.SKNET)
    return learned_step(state, net_state, y_t)


def siknet_step(state: RecursionState, net_state: GainNetworkState, y_t: Tensor):
    """SIKNet update: SIE embeddings feed the two gain factors."""
    _require_variant(net_state, Variant.SIKNET)
    return learned_step(state, net_state, y_t)


def _select(valid: Tensor, new: Optional[Tensor], old: Optional[Tensor]) -> Optional[Tensor]:
    if new is None or old is None:
        return new
    return torch.where(valid.unsqueeze(-1), new, old)


@dataclass(frozen=True, eq=False)
class BatchOutput:
    """Measurement-space boxes ``(B, T, 4)``; frame 0 holds the initial measurement."""

    posterior: Tensor
    prior: Tensor
    mask: Tensor


def run_window(net_state: GainNetworkState, state: RecursionState, meas: Tensor,
               mask: Tensor) -> Tuple[Tensor, Tensor, RecursionState, GainNetworkState]:
    """
    Runs predict + update over a ``(B, W, 4)`` window of measurements.

    Rows with ``mask == False`` keep their state and hidden vectors unchanged.

    Returns:
        Tuple of (posterior boxes, prior boxes, final state, final network state)
    """
    net = net_state.net
    posts, priors = [], []
    for w in range(meas.shape[1]):
        predicted = predict_recursion(state, net.transition)
        new_state, new_net_state, _ = learned_step(predicted, net_state, meas[:, w])
        valid = mask[:, w]
        if bool(valid.all()):
            state, net_state = new_state, new_net_state
        else:
            state = RecursionState(
                x_post=_select(valid, new_state.x_post, state.x_post),
                y_prev=_select(valid, new_state.y_prev, state.y_prev),
                t=new_state.t,
                x_post_prev=_select(valid, new_state.x_post_prev, state.x_post_prev),
                x_prior_prev=_select(valid, new_state.x_prior_prev, state.x_prior_prev),
                scale=state.scale,
            )
            net_state = GainNetworkState(net=net, hidden=tuple(
                _select(valid, new_h, old_h) for new_h, old_h in zip(new_net_state.hidden, net_state.hidden)
            ))
        posts.append(new_state.x_post @ net.h_t)
        priors.append(predicted.x_prior @ net.h_t)
    return torch.stack(posts, dim=1), torch.stack(priors, dim=1), state, net_state


def lengths_mask(lengths: Sequence[int], max_len: int) -> Tensor:
    return torch.arange(max_len).unsqueeze(0) < torch.as_tensor(list(lengths)).unsqueeze(1)


def filter_batch(net: GainNetwork, meas: Tensor, lengths: Optional[Sequence[int]] = None,
                 scale: Optional[Tuple[Tensor, Tensor]] = None) -> BatchOutput:
    """
    Differentiable recursion over padded ragged trajectories.

    Args:
        net: Gain network
        meas: ``(B, T, 4)`` measurements in the network's mode, padded by
            repeating each track's last measurement
        lengths: True lengths, defaults to T for every row
        scale: Optional ``(B, 8)`` / ``(B, 4)`` input divisors

    Returns:
        BatchOutput with posterior and prior boxes
    """
    batch, steps = meas.shape[0], meas.shape[1]
    if steps < 1:
        raise DomainError("filter_batch needs at least one frame")
    lengths = [steps] * batch if lengths is None else list(lengths)
    mask = lengths_mask(lengths, steps)
    state = init_recursion(meas[:, 0], scale=scale)
    net_state = reset(net, batch)
    if steps == 1:
        return BatchOutput(posterior=meas[:, :1], prior=meas[:, :1], mask=mask)
    posts, priors, _, _ = run_window(net_state, state, meas[:, 1:], mask[:, 1:])
    first = meas[:, :1]
    return BatchOutput(posterior=torch.cat([first, posts], dim=1),
                       prior=torch.cat([first, priors], dim=1), mask=mask)


def run_learned_filter(meas_seq: Sequence[BBox], net: Union[GainNetwork, GainNetworkState],
                       cfg: LinearModelConfig,
                       img_size: Optional[Tuple[int, int]] = None) -> List[FilterStep]:
    """
    Filters one measurement sequence with a learned gain network.

    The hidden state is reset at the start, so identical inputs give
    bit-identical outputs.

    Args:
        meas_seq: Non-empty measurement sequence in one state mode
        net: Network or network state
        cfg: Linear model configuration; its mode must match the network's
        img_size: (width, height), required when the network normalizes inputs

    Returns:
        One FilterStep per frame; the first has no prediction

    Raises:
        DomainError: On an empty sequence or missing image size
        ModeMismatchError: If cfg.mode differs from the network's mode
    """
    if not meas_seq:
        raise DomainError("run_learned_filter needs at least one measurement")
    net_state = reset(net)
    module = net_state.net
    if module.config.mode is not cfg.mode:
        raise ModeMismatchError(f"network trained in {module.config.mode.value}, filter runs in {cfg.mode.value}")
    scale = None
    if module.config.normalize_inputs:
        if img_size is None:
            raise DomainError("network normalizes inputs; img_size is required")
        scale = input_scale(cfg.mode, *img_size)
    boxes = [convert_mode(box, cfg.mode) for box in meas_seq]
    transition = torch.from_numpy(build_transition(cfg))

    x0 = init_from_measurement(boxes[0], cfg).x
    steps = [FilterStep(predicted=None, updated=boxes[0])]
    with torch.no_grad():
        state = RecursionState(x_post=torch.from_numpy(x0).unsqueeze(0), y_prev=_row(boxes[0]), t=1, scale=scale)
        for box in boxes[1:]:
            state = predict_recursion(state, transition)
            predicted = _to_box(state.x_prior @ module.h_t, cfg.mode)
            state, net_state, _ = learned_step(state, net_state, _row(box))
            steps.append(FilterStep(predicted=predicted, updated=_to_box(state.x_post @ module.h_t, cfg.mode)))
    return steps


def _row(box: BBox) -> Tensor:
    return torch.from_numpy(box.to_array()).unsqueeze(0)


def _to_box(values: Tensor, mode: StateMode) -> BBox:
    return BBox.from_array(np.asarray(values.detach().reshape(-1).cpu().numpy(), dtype=np.float64), mode)


# ============================================================================
# Batching
# ============================================================================

@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """Padded tensors of a list of semi-simulated trajectories."""

    meas: Tensor
    gt: Tensor
    lengths: List[int]
    scale: Optional[Tuple[Tensor, Tensor]] = None

    @property
    def mask(self) -> Tensor:
        return lengths_mask(self.lengths, self.meas.shape[1])


def collate(trajs: Sequence[SemiSimTrajectory], mode: StateMode, normalize: bool = False) -> TrajectoryBatch:
    """
    Stacks trajectories into ``(B, T_max, 4)`` tensors in the requested mode.

    Shorter trajectories are padded by repeating their last row, which keeps
    padded steps finite; the mask excludes them from losses and metrics.
    """
    if not trajs:
        raise DomainError("collate needs at least one trajectory")
    mode = as_mode(mode)
    max_len = max(len(traj) for traj in trajs)
    meas, gt, lengths = [], [], []
    for traj in trajs:
        gt_arr, meas_arr = traj.arrays(mode)
        pad = ((0, max_len - len(traj)), (0, 0))
        meas.append(np.pad(meas_arr, pad, mode="edge"))
        gt.append(np.pad(gt_arr, pad, mode="edge"))
        lengths.append(len(traj))
    scale = None
    if normalize:
        scales = [input_scale(mode, traj.base.img_w, traj.base.img_h) for traj in trajs]
        scale = (torch.stack([s[0] for s in scales]), torch.stack([s[1] for s in scales]))
    return TrajectoryBatch(
        meas=torch.from_numpy(np.stack(meas)),
        gt=torch.from_numpy(np.stack(gt)),
        lengths=lengths,
        scale=scale,
    )
