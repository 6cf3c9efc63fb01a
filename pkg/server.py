"""
Round orchestration: participant sampling, broadcast, concurrent local
training, FedAvg aggregation and the outer loop over communication rounds.
"""
import asyncio
import logging
import math
import os
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Optional, Protocol, Sequence

import numpy as np

from client import ClientState, ClientUpdate, TrainingDivergedError, client_training
from datagen import derive_seed
from encoders import EncoderParams

DEFAULT_TOTAL_ROUNDS = 5
DEFAULT_PARTICIPATION_RATE = 0.7
DEFAULT_ROUND_SEED = 0


class ServerError(Exception):
    """Base class for round orchestration errors."""


class EmptyRegistryError(ServerError):
    """Raised when there are no clients to sample from."""


class RoundConfigError(ServerError):
    """Raised when the participation rate or round count is invalid."""


class AggregationAbortedError(ServerError):
    """Raised when a round has no client update to aggregate."""


@dataclass(frozen=True)
class RoundConfig:
    total_rounds: int = DEFAULT_TOTAL_ROUNDS
    participation_rate: float = DEFAULT_PARTICIPATION_RATE
    seed: int = DEFAULT_ROUND_SEED
    registry: tuple = ()

    def __post_init__(self):
        if self.total_rounds < 0:
            raise RoundConfigError(f"total_rounds must be non-negative, got {self.total_rounds}")
        if not 0 < self.participation_rate <= 1:
            raise RoundConfigError(
                f"participation_rate must lie in (0, 1], got {self.participation_rate}"
            )


@dataclass
class RoundMetrics:
    round_index: int
    participants: list
    excluded: list
    aggregation_weights: dict
    mean_insub: Optional[float]
    mean_reg: Optional[float]
    mean_total: Optional[float]
    aborted: bool
    wall_time_seconds: float

    def to_dict(self) -> dict:
        record = asdict(self)
        record["aggregation_weights"] = {str(k): v for k, v in self.aggregation_weights.items()}
        return record


@dataclass
class GlobalState:
    w_g: EncoderParams
    round_index: int = 0
    aggregation_log: list = field(default_factory=list)


class Transport(Protocol):
    """Boundary between the server loop and wherever client training runs."""

    async def train(
        self, state: ClientState, w_broadcast: EncoderParams, psi: EncoderParams, seed: int
    ) -> ClientUpdate:
        ...


class InProcessTransport:
    def __init__(self, executor: Executor):
        self.executor = executor

    async def train(self, state, w_broadcast, psi, seed) -> ClientUpdate:
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(
            self.executor, partial(client_training, state, w_broadcast, psi, seed)
        )


def sample_participants(registry: Sequence[int], rate: float, seed: int, round_index: int) -> list:
    """Uniform sample without replacement of max(1, round(rate * C)) ids, in registry order."""
    if not registry:
        raise EmptyRegistryError("No clients registered.")
    if not 0 < rate <= 1:
        raise RoundConfigError(f"participation_rate must lie in (0, 1], got {rate}")
    registry = list(registry)
    if rate == 1.0:
        return registry
    count = max(1, math.floor(rate * len(registry) + 0.5))
    rng = np.random.default_rng([seed, round_index])
    chosen = np.sort(rng.choice(len(registry), size=count, replace=False))
    return [registry[i] for i in chosen]


def aggregation_weights(updates: Sequence[ClientUpdate]) -> dict:
    total = sum(u.num_samples for u in updates)
    return {u.client_id: u.num_samples / total for u in sorted(updates, key=lambda u: u.client_id)}


def fedavg(updates: Sequence[ClientUpdate]) -> EncoderParams:
    """Sample-count weighted mean of client parameters, summed in ascending client id order."""
    if not updates:
        raise AggregationAbortedError("No client updates to aggregate.")
    ordered = sorted(updates, key=lambda u: u.client_id)
    config = ordered[0].w_c.config
    if any(u.w_c.config != config for u in ordered):
        raise ServerError("Client updates disagree on the encoder architecture.")
    if any(u.num_samples <= 0 for u in ordered):
        raise ServerError("Every client update needs a positive sample count.")
    weights = aggregation_weights(ordered)
    total = np.zeros(config.parameter_count)
    for update in ordered:
        total = total + weights[update.client_id] * update.w_c.flatten()
    return EncoderParams.from_flat(config, total)


def _mean(values) -> Optional[float]:
    values = list(values)
    return float(np.mean(values)) if values else None


async def _train_round(transport, participants, w_g, psi, seed, round_index):
    return await asyncio.gather(
        *(
            transport.train(state, w_g, psi, derive_seed(seed, round_index, state.client_id))
            for state in participants
        ),
        return_exceptions=True,
    )


async def run_federation(
    global_state: GlobalState,
    clients: Sequence[ClientState],
    psi: EncoderParams,
    config: RoundConfig,
    transport: Optional[Transport] = None,
    parallelism: Optional[int] = None,
) -> list:
    """
    Sequential rounds, concurrent clients within a round. Clients that diverge
    are excluded from that round's aggregation; a round with no surviving
    update leaves w_g unchanged.
    """
    if transport is None:
        with ThreadPoolExecutor(max_workers=parallelism or os.cpu_count() or 1) as executor:
            return await run_federation(
                global_state, clients, psi, config, InProcessTransport(executor)
            )

    by_id = {state.client_id: state for state in clients}
    registry = list(config.registry) or sorted(by_id)
    log = []
    for _ in range(config.total_rounds):
        round_index = global_state.round_index
        started = time.perf_counter()
        sampled = sample_participants(registry, config.participation_rate, config.seed, round_index)
        logging.info("Round %d: %d participants", round_index, len(sampled))

        results = await _train_round(
            transport, [by_id[c] for c in sampled], global_state.w_g, psi, config.seed, round_index
        )
        updates, excluded = [], []
        for client_id, result in zip(sampled, results):
            if isinstance(result, TrainingDivergedError):
                logging.warning("Round %d: excluding client %d: %s", round_index, client_id, result)
                excluded.append(client_id)
            elif isinstance(result, BaseException):
                raise result
            else:
                updates.append(result)

        aborted = False
        weights = {}
        try:
            global_state.w_g = fedavg(updates)
            weights = aggregation_weights(updates)
        except AggregationAbortedError as error:
            logging.warning("Round %d aborted, global model unchanged: %s", round_index, error)
            aborted = True

        steps = [record for u in updates for record in u.round_loss_trace]
        metrics = RoundMetrics(
            round_index=round_index,
            participants=[u.client_id for u in sorted(updates, key=lambda u: u.client_id)],
            excluded=excluded,
            aggregation_weights=weights,
            mean_insub=_mean(s.insub for s in steps),
            mean_reg=_mean(s.reg for s in steps),
            mean_total=_mean(s.total for s in steps),
            aborted=aborted,
            wall_time_seconds=time.perf_counter() - started,
        )
        global_state.aggregation_log.append(metrics)
        global_state.round_index += 1
        log.append(metrics)
    return log
