"""
Local training of one client: joint SGD on the global copy w_c and the
personalized θ_c against the total loss, ψ frozen.
"""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from datagen import IdentityDataset, derive_seed
from encoders import EncoderParams, sgd_step
from losses import LossSettings, build_representations, objective
from tensor_core import GradTape, NumericError

DEFAULT_LEARNING_RATE = 5e-3
DEFAULT_LOCAL_EPOCHS = 2
DEFAULT_BATCH_SIZE = 8


class ClientError(Exception):
    """Base class for client training errors."""


class ClientConfigError(ClientError):
    """Raised for batch sizes or architectures the losses cannot work with."""


class DatasetTooSmallError(ClientError):
    """Raised when a client has fewer than two training samples."""


class TrainingDivergedError(ClientError):
    """Raised when the loss becomes non-finite; carries the step index."""

    def __init__(self, client_id, step, message=""):
        super().__init__(f"client {client_id} diverged at step {step}. {message}".strip())
        self.client_id = client_id
        self.step = step


@dataclass(frozen=True)
class ClientHyper:
    learning_rate: float = DEFAULT_LEARNING_RATE
    local_epochs: int = DEFAULT_LOCAL_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    loss: LossSettings = field(default_factory=LossSettings)


@dataclass
class ClientState:
    """θ_c persists across rounds; w_c is overwritten by every broadcast."""

    client_id: int
    w_c: EncoderParams
    theta_c: EncoderParams
    dataset: IdentityDataset
    hyper: ClientHyper = field(default_factory=ClientHyper)
    rounds_trained: int = 0


class LossRecord(NamedTuple):
    insub: float
    reg: float
    total: float


class TrajectoryPoint(NamedTuple):
    w: np.ndarray
    theta: np.ndarray
    loss: Optional[float]


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    w_c: EncoderParams
    num_samples: int
    round_loss_trace: tuple
    trajectory: tuple = ()


def make_batches(train: np.ndarray, batch_size: int, seed) -> list:
    """Seeded shuffle, contiguous chunks; a trailing chunk of one row joins the previous batch."""
    if batch_size < 2:
        raise ClientConfigError(f"batch_size must be at least 2, got {batch_size}")
    count = len(train)
    if count < 2:
        raise DatasetTooSmallError(f"Need at least two training samples, got {count}")
    order = np.random.default_rng(seed).permutation(count)
    chunks = [order[start : start + batch_size] for start in range(0, count, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return [train[chunk] for chunk in chunks]


def client_training(
    state: ClientState,
    w_broadcast: EncoderParams,
    psi: EncoderParams,
    seed: int = 0,
    record_trajectory: bool = False,
) -> ClientUpdate:
    hyper = state.hyper
    if w_broadcast.config != state.theta_c.config:
        raise ClientConfigError(
            f"client {state.client_id}: broadcast architecture differs from the personalized model"
        )
    if hyper.batch_size < 2:
        raise ClientConfigError(f"batch_size must be at least 2, got {hyper.batch_size}")

    w, theta = w_broadcast, state.theta_c
    split = len(w.arrays())
    trace, trajectory = [], []
    step = 0
    for epoch in range(hyper.local_epochs):
        batches = make_batches(state.dataset.train, hyper.batch_size, derive_seed(seed, epoch))
        for batch in batches:
            tape = GradTape()
            try:
                reps = build_representations(psi, w, theta, batch, tape)
                losses = objective(reps, hyper.loss)
                grads = tape.gradient(losses.total, [*reps.w_leaves, *reps.theta_leaves])
            except NumericError as error:
                raise TrainingDivergedError(state.client_id, step, str(error)) from error
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(state.client_id, step, "non-finite gradient")
            if record_trajectory:
                trajectory.append(TrajectoryPoint(w.flatten(), theta.flatten(), losses.total.item()))
            w = sgd_step(w, grads[:split], hyper.learning_rate)
            theta = sgd_step(theta, grads[split:], hyper.learning_rate)
            trace.append(LossRecord(losses.insub.item(), losses.reg.item(), losses.total.item()))
            logging.debug(
                "client %d step %d insub %.6f reg %.6f total %.6f",
                state.client_id,
                step,
                *trace[-1],
            )
            step += 1

    if record_trajectory:
        trajectory.append(TrajectoryPoint(w.flatten(), theta.flatten(), None))

    state.w_c, state.theta_c = w, theta
    state.rounds_trained += 1
    return ClientUpdate(
        client_id=state.client_id,
        w_c=w,
        num_samples=len(state.dataset.train),
        round_loss_trace=tuple(trace),
        trajectory=tuple(trajectory),
    )
