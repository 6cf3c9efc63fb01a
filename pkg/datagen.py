"""
Synthetic identity universe: one identity per client, held-out impostor
identities for open-set evaluation, and a disjoint public pool for
pre-training. Also reads and writes the JSON-lines dataset format.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

DEFAULT_NUM_CLIENTS = 200
DEFAULT_SAMPLES_PER_IDENTITY = 70
DEFAULT_INPUT_DIM = 24
DEFAULT_INTRA_CLASS_NOISE = 0.5
DEFAULT_INTER_CLASS_SEPARATION = 3.0
DEFAULT_PUBLIC_POOL_IDENTITIES = 100
DEFAULT_IMPOSTOR_FRACTION = 0.2
DEFAULT_TRAIN_FRACTION = 0.8
DEFAULT_WARP_STRENGTH = 0.5
DEFAULT_NUISANCE_DIM = 4
DEFAULT_NUISANCE_RATIO = 3.0
DEFAULT_SEED = 1
DATASET_FORMAT_VERSION = 1

ROLE_CLIENT = "client"
ROLE_IMPOSTOR = "impostor"
ROLE_PUBLIC = "public"
SPLITS = ("train", "eval", "all")


class DatagenError(Exception):
    """Base class for dataset generation and ingestion errors."""


class DatasetParseError(DatagenError):
    """Raised when a dataset file is malformed."""


class DatasetValidationError(DatagenError):
    """Raised when parsed records break a dataset invariant."""


@dataclass(frozen=True)
class UniverseConfig:
    num_clients: int = DEFAULT_NUM_CLIENTS
    samples_per_identity: int = DEFAULT_SAMPLES_PER_IDENTITY
    input_dim: int = DEFAULT_INPUT_DIM
    intra_class_noise: float = DEFAULT_INTRA_CLASS_NOISE
    inter_class_separation: float = DEFAULT_INTER_CLASS_SEPARATION
    public_pool_identities: int = DEFAULT_PUBLIC_POOL_IDENTITIES
    impostor_fraction: float = DEFAULT_IMPOSTOR_FRACTION
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    warp_strength: float = DEFAULT_WARP_STRENGTH
    nuisance_dim: int = DEFAULT_NUISANCE_DIM
    nuisance_ratio: float = DEFAULT_NUISANCE_RATIO
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        counts = (
            self.num_clients,
            self.samples_per_identity,
            self.input_dim,
            self.public_pool_identities,
        )
        if min(counts) < 1:
            raise DatagenError(f"All universe counts must be positive: {self}")
        if self.intra_class_noise <= 0:
            raise DatagenError("intra_class_noise must be positive.")
        if not 0 < self.impostor_fraction < 1 or not 0 < self.train_fraction < 1:
            raise DatagenError("impostor_fraction and train_fraction must lie in (0, 1).")
        if not 0 <= self.nuisance_dim <= self.input_dim:
            raise DatagenError(f"nuisance_dim must lie in [0, {self.input_dim}], got {self.nuisance_dim}")
        if self.nuisance_ratio < 0:
            raise DatagenError("nuisance_ratio must be non-negative.")

    @property
    def num_impostors(self) -> int:
        """Impostors make up impostor_fraction of the non-public identities."""
        ratio = self.impostor_fraction / (1.0 - self.impostor_fraction)
        return max(1, math.floor(self.num_clients * ratio + 0.5))

    @property
    def train_count(self) -> int:
        return math.floor(self.samples_per_identity * self.train_fraction + 0.5)


@dataclass(frozen=True, eq=False)
class IdentityDataset:
    client_id: int
    identity_id: int
    train: np.ndarray
    eval: np.ndarray

    def __post_init__(self):
        for name in ("train", "eval"):
            array = np.array(getattr(self, name), dtype=np.float64)
            if array.ndim != 2:
                raise DatasetValidationError(f"client {self.client_id}: {name} must be a matrix")
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    @property
    def input_dim(self) -> int:
        return self.train.shape[1]

    def __eq__(self, other):
        if not isinstance(other, IdentityDataset):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.identity_id == other.identity_id
            and np.array_equal(self.train, other.train)
            and np.array_equal(self.eval, other.eval)
        )


@dataclass(eq=False)
class Universe:
    clients: list
    impostors: dict = field(default_factory=dict)
    public_pool: dict = field(default_factory=dict)
    config: Optional[UniverseConfig] = None

    @property
    def input_dim(self) -> int:
        return self.clients[0].input_dim


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _warp(samples: np.ndarray, mixing: np.ndarray, strength: float) -> np.ndarray:
    return samples + strength * np.tanh(samples @ mixing)


def _nuisance_basis(rng, config: UniverseConfig) -> np.ndarray:
    """Orthonormal input_dim x nuisance_dim basis; empty when nuisance_dim is 0."""
    if config.nuisance_dim == 0:
        return np.zeros((config.input_dim, 0))
    basis, _ = np.linalg.qr(rng.normal(size=(config.input_dim, config.nuisance_dim)))
    return basis


def _identity_samples(rng, config: UniverseConfig, mixing: np.ndarray, nuisance: np.ndarray) -> np.ndarray:
    direction = rng.normal(size=config.input_dim)
    center = config.inter_class_separation * direction / np.linalg.norm(direction)
    noise = rng.normal(size=(config.samples_per_identity, config.input_dim))
    shared = rng.normal(size=(config.samples_per_identity, nuisance.shape[1])) @ nuisance.T
    noise = noise + config.nuisance_ratio * shared
    return _warp(center + config.intra_class_noise * noise, mixing, config.warp_strength)


def generate_universe(config: UniverseConfig) -> Universe:
    """
    Each identity gets a center on a sphere of radius inter_class_separation.
    Samples are center + intra_class_noise * (isotropic Gaussian + nuisance_ratio
    * Gaussian along a nuisance subspace), pushed through a shared tanh warp.
    Client and impostor identities share one nuisance subspace; the public
    pool varies along an independent one, so an encoder fitted to the pool
    does not learn to ignore the population's nuisance directions.
    Identity ids: clients 1..C, then impostors, then the public pool.
    """
    rng = np.random.default_rng(config.seed)
    mixing = rng.normal(size=(config.input_dim, config.input_dim)) / np.sqrt(config.input_dim)
    population_nuisance = _nuisance_basis(rng, config)
    public_nuisance = _nuisance_basis(rng, config)
    n_train = config.train_count

    clients = []
    for client_id in range(1, config.num_clients + 1):
        samples = _identity_samples(rng, config, mixing, population_nuisance)
        order = rng.permutation(len(samples))
        clients.append(
            IdentityDataset(
                client_id=client_id,
                identity_id=client_id,
                train=samples[order[:n_train]],
                eval=samples[order[n_train:]],
            )
        )

    next_id = config.num_clients + 1
    impostors = {}
    for identity_id in range(next_id, next_id + config.num_impostors):
        impostors[identity_id] = _identity_samples(rng, config, mixing, population_nuisance)

    next_id += config.num_impostors
    public_pool = {}
    for identity_id in range(next_id, next_id + config.public_pool_identities):
        public_pool[identity_id] = _identity_samples(rng, config, mixing, public_nuisance)

    logging.info(
        "Generated universe: %d clients, %d impostors, %d public identities (seed %d)",
        len(clients),
        len(impostors),
        len(public_pool),
        config.seed,
    )
    return Universe(clients, impostors, public_pool, config)


def _records(universe: Universe):
    for dataset in universe.clients:
        for split in ("train", "eval"):
            for row in getattr(dataset, split):
                yield {
                    "role": ROLE_CLIENT,
                    "client_id": dataset.client_id,
                    "identity_id": dataset.identity_id,
                    "split": split,
                    "features": row.tolist(),
                }
    for role, pool in ((ROLE_IMPOSTOR, universe.impostors), (ROLE_PUBLIC, universe.public_pool)):
        for identity_id in sorted(pool):
            for row in pool[identity_id]:
                yield {
                    "role": role,
                    "client_id": None,
                    "identity_id": identity_id,
                    "split": "all",
                    "features": row.tolist(),
                }


def save_universe(universe: Universe, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "input_dim": universe.input_dim,
        "universe": asdict(universe.config) if universe.config else None,
    }
    with path.open("w") as handle:
        handle.write(json.dumps(header) + "\n")
        for record in _records(universe):
            handle.write(json.dumps(record) + "\n")
    logging.info("Wrote dataset %s", path)
    return path


def _parse_header(line: str, path: Path) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as error:
        raise DatasetParseError(f"{path}:1: header is not JSON: {error}") from error
    if not isinstance(header, dict) or header.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetParseError(f"{path}:1: missing or unsupported format_version")
    if not isinstance(header.get("input_dim"), int) or header["input_dim"] < 1:
        raise DatasetParseError(f"{path}:1: header needs a positive integer input_dim")
    return header


def _parse_record(line: str, line_number: int, path: Path) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as error:
        raise DatasetParseError(f"{path}:{line_number}: not JSON: {error}") from error
    missing = {"identity_id", "split", "features"} - set(record if isinstance(record, dict) else ())
    if missing:
        raise DatasetParseError(f"{path}:{line_number}: missing fields {sorted(missing)}")
    record.setdefault("role", ROLE_CLIENT)
    if record["split"] not in SPLITS:
        raise DatasetParseError(f"{path}:{line_number}: unknown split {record['split']!r}")
    return record


def load_universe(path) -> Universe:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as error:
        raise DatasetParseError(f"Cannot read dataset {path}: {error}") from error
    if not lines or not lines[0].strip():
        raise DatasetParseError(f"{path}: empty dataset file")

    header = _parse_header(lines[0], path)
    input_dim = header["input_dim"]
    client_rows, client_identity = {}, {}
    pools = {ROLE_IMPOSTOR: {}, ROLE_PUBLIC: {}}

    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        record = _parse_record(line, line_number, path)
        features = record["features"]
        if not isinstance(features, list) or len(features) != input_dim:
            raise DatasetValidationError(
                f"{path}:{line_number}: record for identity {record['identity_id']} has "
                f"{len(features) if isinstance(features, list) else 'no'} features, expected {input_dim}"
            )
        role = record["role"]
        if role == ROLE_CLIENT:
            client_id = record.get("client_id")
            if not isinstance(client_id, int):
                raise DatasetValidationError(f"{path}:{line_number}: client record without client_id")
            known = client_identity.setdefault(client_id, record["identity_id"])
            if known != record["identity_id"]:
                raise DatasetValidationError(
                    f"{path}:{line_number}: client {client_id} holds identities {known} "
                    f"and {record['identity_id']}"
                )
            if record["split"] == "all":
                raise DatasetValidationError(f"{path}:{line_number}: client records need train or eval")
            client_rows.setdefault(client_id, {"train": [], "eval": []})[record["split"]].append(features)
        elif role in pools:
            pools[role].setdefault(record["identity_id"], []).append(features)
        else:
            raise DatasetParseError(f"{path}:{line_number}: unknown role {role!r}")

    if not client_rows:
        raise DatasetValidationError(f"{path}: no client records")
    clients = []
    for client_id in sorted(client_rows):
        rows = client_rows[client_id]
        if not rows["train"]:
            raise DatasetValidationError(f"{path}: client {client_id} has no training samples")
        clients.append(
            IdentityDataset(
                client_id=client_id,
                identity_id=client_identity[client_id],
                train=np.array(rows["train"], dtype=np.float64),
                eval=np.array(rows["eval"], dtype=np.float64).reshape(-1, input_dim),
            )
        )
    impostors = {i: np.array(rows) for i, rows in sorted(pools[ROLE_IMPOSTOR].items())}
    public_pool = {i: np.array(rows) for i, rows in sorted(pools[ROLE_PUBLIC].items())}
    config = UniverseConfig(**header["universe"]) if header.get("universe") else None
    return Universe(clients, impostors, public_pool, config)


def load_dataset(path) -> list:
    return load_universe(path).clients
