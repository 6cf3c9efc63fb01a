"""
Empirical convergence diagnostics for one client's local training: local
Lipschitz estimates of the loss gradient, parameter-distance sequences to
the run's final point, and the observed satisfaction rate of the
contraction relation between the global and personalized distances.

The reference point is the replay's final parameters, so the report
describes observed contraction; it does not verify any bound.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from client import ClientState, TrajectoryPoint, client_training
from encoders import EncoderParams, layer_tensors_from_flat
from losses import objective, representations_from_layers
from tensor_core import GradTape, Tensor

DEFAULT_PROBES = 8
DEFAULT_RADIUS = 0.05
DEFAULT_MONITOR_SEED = 0
MIN_PROBE_DISTANCE = 1e-12
MAX_RESAMPLES = 100


class MonitorError(Exception):
    """Raised for invalid probe settings or traces too short to check."""


@dataclass(frozen=True)
class MonitorConfig:
    enabled: bool = True
    client_id: Optional[int] = None
    probes: int = DEFAULT_PROBES
    radius: float = DEFAULT_RADIUS
    seed: int = DEFAULT_MONITOR_SEED


@dataclass
class TrajectoryTrace:
    w_distances: np.ndarray
    theta_distances: np.ndarray
    losses: list
    lipschitz_w: float = 0.0
    lipschitz_theta: float = 0.0

    def __post_init__(self):
        self.w_distances = np.asarray(self.w_distances, dtype=np.float64)
        self.theta_distances = np.asarray(self.theta_distances, dtype=np.float64)
        if self.w_distances.shape != self.theta_distances.shape:
            raise MonitorError("Distance sequences must have equal length.")
        if np.any(self.w_distances < 0) or np.any(self.theta_distances < 0):
            raise MonitorError("Distances must be non-negative.")

    def __len__(self):
        return len(self.w_distances)


@dataclass
class BoundsReport:
    steps: int
    eta: float
    lipschitz_w: float
    lipschitz_theta: float
    w_bound_satisfied: float
    theta_bound_satisfied: float
    w_decrease_fraction: float
    theta_decrease_fraction: float
    w_distances: list = field(default_factory=list)
    theta_distances: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "eta": self.eta,
            "lipschitz_w": self.lipschitz_w,
            "lipschitz_theta": self.lipschitz_theta,
            "w_bound_satisfied": self.w_bound_satisfied,
            "theta_bound_satisfied": self.theta_bound_satisfied,
            "w_decrease_fraction": self.w_decrease_fraction,
            "theta_decrease_fraction": self.theta_decrease_fraction,
            "w_distances": list(self.w_distances),
            "theta_distances": list(self.theta_distances),
        }


def _gradient_at(loss_fn: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    tape = GradTape()
    watched = tape.watch(point)
    (grad,) = tape.gradient(loss_fn(watched), [watched])
    return grad.reshape(-1)


def _ball_point(rng, center: np.ndarray, radius: float) -> np.ndarray:
    direction = rng.normal(size=center.shape)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        return center.copy()
    return center + radius * rng.uniform() ** (1.0 / center.size) * direction / norm


def estimate_lipschitz(
    loss_fn: Callable[[Tensor], Tensor],
    params,
    probes: int = DEFAULT_PROBES,
    radius: float = DEFAULT_RADIUS,
    seed: int = DEFAULT_MONITOR_SEED,
) -> float:
    """
    max over all pairs of seeded probes in the radius ball around params of
    ||grad(p1) - grad(p2)|| / ||p1 - p2||. A lower bound on the local constant.

    Probes are drawn sequentially from one seeded stream, so more probes
    always means a superset of pairs.
    """
    if probes < 2:
        raise MonitorError(f"Need at least two probes, got {probes}")
    if radius <= 0:
        raise MonitorError(f"radius must be positive, got {radius}")
    center = np.asarray(params.data if isinstance(params, Tensor) else params, dtype=np.float64)
    center = center.reshape(-1)
    rng = np.random.default_rng(seed)

    points, grads = [], []
    estimate = 0.0
    for _ in range(probes):
        for _ in range(MAX_RESAMPLES):
            point = _ball_point(rng, center, radius)
            if all(np.linalg.norm(point - p) > MIN_PROBE_DISTANCE for p in points):
                break
        else:
            raise MonitorError("Could not draw distinct probe points.")
        grad = _gradient_at(loss_fn, point)
        for other_point, other_grad in zip(points, grads):
            ratio = np.linalg.norm(grad - other_grad) / np.linalg.norm(point - other_point)
            estimate = max(estimate, float(ratio))
        points.append(point)
        grads.append(grad)
    return estimate


def trace_from_trajectory(
    trajectory: Sequence[TrajectoryPoint], lipschitz_w: float = 0.0, lipschitz_theta: float = 0.0
) -> TrajectoryTrace:
    if not trajectory:
        raise MonitorError("Empty trajectory.")
    w_ref, theta_ref = trajectory[-1].w, trajectory[-1].theta
    return TrajectoryTrace(
        w_distances=[np.linalg.norm(p.w - w_ref) for p in trajectory],
        theta_distances=[np.linalg.norm(p.theta - theta_ref) for p in trajectory],
        losses=[p.loss for p in trajectory],
        lipschitz_w=lipschitz_w,
        lipschitz_theta=lipschitz_theta,
    )


def _fraction(flags) -> float:
    flags = np.asarray(flags, dtype=bool)
    return float(flags.mean()) if flags.size else 0.0


def check_bounds(trace: TrajectoryTrace, eta: float) -> BoundsReport:
    """
    Per step e: d_w[e+1] <= d_w[e] - eta * L_w * d_theta[e], and the theta
    counterpart with the roles swapped. Reports satisfaction fractions and the
    fraction of strictly decreasing steps for each sequence.
    """
    if len(trace) < 2:
        raise MonitorError(f"Need at least two trace points, got {len(trace)}")
    d_w, d_theta = trace.w_distances, trace.theta_distances
    w_holds = d_w[1:] <= d_w[:-1] - eta * trace.lipschitz_w * d_theta[:-1]
    theta_holds = d_theta[1:] <= d_theta[:-1] - eta * trace.lipschitz_theta * d_w[:-1]
    return BoundsReport(
        steps=len(trace) - 1,
        eta=eta,
        lipschitz_w=trace.lipschitz_w,
        lipschitz_theta=trace.lipschitz_theta,
        w_bound_satisfied=_fraction(w_holds),
        theta_bound_satisfied=_fraction(theta_holds),
        w_decrease_fraction=_fraction(d_w[1:] < d_w[:-1]),
        theta_decrease_fraction=_fraction(d_theta[1:] < d_theta[:-1]),
        w_distances=d_w.tolist(),
        theta_distances=d_theta.tolist(),
    )


def flat_loss_functions(
    psi: EncoderParams, w: EncoderParams, theta: EncoderParams, batch, settings
):
    """Total loss as a function of flat w (theta fixed) and of flat theta (w fixed)."""
    config = w.config

    def loss_of_w(flat: Tensor) -> Tensor:
        reps = representations_from_layers(
            psi, layer_tensors_from_flat(flat, config), theta.tensors(), batch, config
        )
        return objective(reps, settings).total

    def loss_of_theta(flat: Tensor) -> Tensor:
        reps = representations_from_layers(
            psi, w.tensors(), layer_tensors_from_flat(flat, config), batch, config
        )
        return objective(reps, settings).total

    return loss_of_w, loss_of_theta


def monitor_client(
    state: ClientState,
    w_global: EncoderParams,
    psi: EncoderParams,
    config: MonitorConfig = MonitorConfig(),
    seed: int = 0,
) -> dict:
    """
    Replay one round of local training for a copy of the client, starting from
    w_global, and report distances, Lipschitz estimates and bound checks.
    The client's own state is left untouched.
    """
    replica = replace(state)
    update = client_training(replica, w_global, psi, seed, record_trajectory=True)
    final_w = EncoderParams.from_flat(w_global.config, update.trajectory[-1].w)
    final_theta = EncoderParams.from_flat(w_global.config, update.trajectory[-1].theta)

    loss_of_w, loss_of_theta = flat_loss_functions(
        psi, final_w, final_theta, state.dataset.train, state.hyper.loss
    )
    lipschitz_w = estimate_lipschitz(
        loss_of_w, final_w.flatten(), config.probes, config.radius, config.seed
    )
    lipschitz_theta = estimate_lipschitz(
        loss_of_theta, final_theta.flatten(), config.probes, config.radius, config.seed
    )
    trace = trace_from_trajectory(update.trajectory, lipschitz_w, lipschitz_theta)
    report = check_bounds(trace, state.hyper.learning_rate)
    logging.info(
        "Convergence monitor client %d: L_w %.4f L_theta %.4f, w bound %.2f, theta bound %.2f",
        state.client_id,
        lipschitz_w,
        lipschitz_theta,
        report.w_bound_satisfied,
        report.theta_bound_satisfied,
    )
    return {
        "client_id": state.client_id,
        "losses": [loss for loss in trace.losses if loss is not None],
        **report.to_dict(),
    }
