"""
Personalization metrics: open-set 1:N identification (TPIR at fixed FPIR),
AUROC, ROC points, similarity histograms with their overlap, and
intra-class variance.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from sklearn.metrics import roc_curve

from client import ClientState
from datagen import IdentityDataset, derive_seed
from encoders import EncoderParams, forward

DEFAULT_FPIR_POINTS = (0.1, 0.01, 0.001)
DEFAULT_HISTOGRAM_BINS = 64
DEFAULT_NEGATIVE_PAIRS = 2000
DEFAULT_ENROLL_FRACTION = 0.5
DEFAULT_MAX_CLIENTS = 0
DEGENERATE_CENTROID_NORM = 1e-9

MODE_PRETRAINED = "pretrained_only"
MODE_PERSONALIZED = "fedfs"
MODES = (MODE_PRETRAINED, MODE_PERSONALIZED)
MODE_ALIASES = {"pretrained": MODE_PRETRAINED, "personalized": MODE_PERSONALIZED}


class EvaluationError(Exception):
    """Base class for evaluation errors."""


class InsufficientDataError(EvaluationError):
    """Raised when an operating point cannot be reached with the available searches."""


class UnknownModeError(EvaluationError):
    """Raised for an embedding mode other than pretrained_only or fedfs."""


class DegenerateHistogramError(EvaluationError):
    """Raised when a similarity histogram would be empty."""


@dataclass(frozen=True)
class EvaluationConfig:
    fpir_points: tuple = DEFAULT_FPIR_POINTS
    histogram_bins: int = DEFAULT_HISTOGRAM_BINS
    negative_pairs: int = DEFAULT_NEGATIVE_PAIRS
    enroll_fraction: float = DEFAULT_ENROLL_FRACTION
    max_clients: int = DEFAULT_MAX_CLIENTS


@dataclass(frozen=True)
class IdentificationProtocol:
    """
    Gallery: enrollment half of each enrolled identity's eval split.
    Mated probes: the other half. Non-mated probes: every impostor sample.
    """

    gallery: Mapping[int, np.ndarray]
    mated_probes: Mapping[int, np.ndarray]
    non_mated_probes: np.ndarray
    non_mated_identities: np.ndarray


@dataclass(frozen=True)
class ScoreSet:
    mated_scores: np.ndarray
    mated_correct: np.ndarray
    non_mated_scores: np.ndarray


@dataclass(frozen=True)
class SimilarityHistograms:
    edges: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    overlap: float
    positive_count: int
    negative_count: int


@dataclass
class ClientScores:
    client_id: int
    auroc: float
    tpir: dict
    positive: np.ndarray
    negative: np.ndarray


@dataclass
class MethodEvaluation:
    mode: str
    clients: list = field(default_factory=list)
    histograms: Optional[SimilarityHistograms] = None
    intra_class_variance: float = float("nan")

    @property
    def mean_auroc(self) -> float:
        return float(np.mean([c.auroc for c in self.clients]))

    def mean_tpir(self, fpir: float) -> Optional[float]:
        values = [c.tpir[fpir] for c in self.clients if c.tpir.get(fpir) is not None]
        return float(np.mean(values)) if values else None

    def roc_points(self):
        positive = np.concatenate([c.positive for c in self.clients])
        negative = np.concatenate([c.negative for c in self.clients])
        return roc_points(positive, negative)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def build_protocol(
    clients: Sequence[IdentityDataset],
    impostors: Mapping[int, np.ndarray],
    enroll_fraction: float = DEFAULT_ENROLL_FRACTION,
) -> IdentificationProtocol:
    gallery, probes = {}, {}
    for dataset in clients:
        n_enroll = int(len(dataset.eval) * enroll_fraction)
        if n_enroll < 1 or n_enroll >= len(dataset.eval):
            raise EvaluationError(
                f"client {dataset.client_id}: {len(dataset.eval)} eval samples cannot be "
                "split into enrollment and probes"
            )
        gallery[dataset.identity_id] = dataset.eval[:n_enroll]
        probes[dataset.identity_id] = dataset.eval[n_enroll:]
    if not impostors:
        raise EvaluationError("Open-set evaluation needs impostor identities.")
    if set(impostors) & set(gallery):
        raise EvaluationError("Impostor identities must not be enrolled.")
    identities = sorted(impostors)
    non_mated = np.concatenate([impostors[i] for i in identities])
    labels = np.concatenate([np.full(len(impostors[i]), i) for i in identities])
    return IdentificationProtocol(gallery, probes, non_mated, labels)


def resolve_mode(mode: str) -> str:
    """Canonical mode name; the row labels pretrained and personalized are accepted too."""
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise UnknownModeError(f"Unknown embedding mode: {mode!r}")
    return mode


def embed_for_client(
    state: Optional[ClientState], psi: EncoderParams, mode: str
) -> Callable[[np.ndarray], np.ndarray]:
    """pretrained_only: the frozen encoder for everyone. fedfs: the client's w output then its theta output."""
    mode = resolve_mode(mode)
    if mode == MODE_PRETRAINED:
        return lambda x: forward(psi, x).final.data
    if state is None:
        raise EvaluationError("Personalized embeddings need a trained client state.")
    w_c, theta_c = state.w_c, state.theta_c
    return lambda x: np.concatenate(
        [forward(w_c, x).final.data, forward(theta_c, x).final.data], axis=1
    )


def gallery_templates(embed: Callable, protocol: IdentificationProtocol):
    identities = np.array(sorted(protocol.gallery))
    templates = np.stack([embed(protocol.gallery[i]).mean(axis=0) for i in identities])
    return identities, _normalize_rows(templates)


def identification_scores(
    embed: Callable, protocol: IdentificationProtocol, identity_id: int, templates=None
) -> ScoreSet:
    """Top-match cosine scores of one identity's mated probes and of all non-mated probes."""
    identities, template_matrix = templates or gallery_templates(embed, protocol)
    mated = _normalize_rows(embed(protocol.mated_probes[identity_id])) @ template_matrix.T
    non_mated = _normalize_rows(embed(protocol.non_mated_probes)) @ template_matrix.T
    top = mated.argmax(axis=1)
    return ScoreSet(
        mated_scores=np.clip(mated[np.arange(len(top)), top], -1.0, 1.0),
        mated_correct=identities[top] == identity_id,
        non_mated_scores=np.clip(non_mated.max(axis=1), -1.0, 1.0),
    )


def tpir_at_fpir(scores: ScoreSet, fpir: float) -> float:
    """
    Threshold = smallest candidate score whose non-mated acceptance fraction
    is at most fpir (no interpolation). TPIR counts mated probes whose top
    match is correct and scores at or above the threshold.
    """
    mated = np.asarray(scores.mated_scores, dtype=np.float64)
    correct = np.asarray(scores.mated_correct, dtype=bool)
    non_mated = np.sort(np.asarray(scores.non_mated_scores, dtype=np.float64))
    if mated.size == 0 or non_mated.size == 0:
        raise EvaluationError("TPIR needs mated and non-mated searches.")
    if not 0 < fpir < 1:
        raise EvaluationError(f"fpir must lie in (0, 1), got {fpir}")
    if non_mated.size * fpir < 1.0 - 1e-9:
        raise InsufficientDataError(
            f"{non_mated.size} non-mated searches cannot resolve FPIR {fpir}"
        )
    candidates = np.unique(np.concatenate([mated, non_mated]))
    accepted = non_mated.size - np.searchsorted(non_mated, candidates, side="left")
    reachable = candidates[accepted <= fpir * non_mated.size]
    threshold = reachable[0] if reachable.size else np.inf
    return float(np.mean(correct & (mated >= threshold)))


def auroc(positive_scores, negative_scores) -> float:
    """Mann-Whitney: P(positive > negative), ties count one half."""
    positive = np.asarray(positive_scores, dtype=np.float64)
    negative = np.sort(np.asarray(negative_scores, dtype=np.float64))
    if positive.size == 0 or negative.size == 0:
        raise EvaluationError("AUROC needs positive and negative scores.")
    below = np.searchsorted(negative, positive, side="left")
    at_or_below = np.searchsorted(negative, positive, side="right")
    wins = below.sum() + 0.5 * (at_or_below - below).sum()
    return float(wins / (positive.size * negative.size))


def roc_points(positive_scores, negative_scores):
    """(fpr, tpr, thresholds) of the ROC curve."""
    positive = np.asarray(positive_scores, dtype=np.float64)
    negative = np.asarray(negative_scores, dtype=np.float64)
    labels = np.concatenate([np.ones(positive.size), np.zeros(negative.size)])
    return roc_curve(labels, np.concatenate([positive, negative]))


def _pairwise_cosines(x: np.ndarray) -> np.ndarray:
    unit = _normalize_rows(x)
    rows, cols = np.triu_indices(len(x), k=1)
    return np.sum(unit[rows] * unit[cols], axis=1)


def _negative_cosines(embeddings, anchor, negative_pairs, seed) -> np.ndarray:
    identities = sorted(embeddings)
    labels = np.concatenate([np.full(len(embeddings[i]), i) for i in identities])
    unit = _normalize_rows(np.concatenate([embeddings[i] for i in identities]))
    sources = np.flatnonzero(labels == anchor) if anchor is not None else np.arange(len(labels))
    rng = np.random.default_rng(seed)
    left, right = [], []
    while len(left) < negative_pairs:
        a = rng.choice(sources, size=negative_pairs)
        b = rng.integers(0, len(labels), size=negative_pairs)
        keep = labels[a] != labels[b]
        left.extend(a[keep].tolist())
        right.extend(b[keep].tolist())
    left, right = np.array(left[:negative_pairs]), np.array(right[:negative_pairs])
    return np.sum(unit[left] * unit[right], axis=1)


def similarity_histograms(
    embeddings: Mapping[int, np.ndarray],
    bins: int = DEFAULT_HISTOGRAM_BINS,
    negative_pairs: int = DEFAULT_NEGATIVE_PAIRS,
    seed: int = 0,
    anchor: Optional[int] = None,
) -> SimilarityHistograms:
    """
    Positive: all intra-identity pair cosines (only the anchor's when given).
    Negative: sampled inter-identity pair cosines (involving the anchor when
    given). Both histograms are unit-mass over [-1, 1]; overlap is the summed
    per-bin minimum.
    """
    if len(embeddings) < 2:
        raise EvaluationError("Similarity histograms need at least two identities.")
    populated = [i for i in embeddings if len(embeddings[i]) > 0]
    if len(populated) < 2 or (anchor is not None and anchor not in populated):
        raise DegenerateHistogramError(
            "Negative pairs need embeddings for at least two identities, the anchor included."
        )
    owners = [anchor] if anchor is not None else sorted(embeddings)
    positive = np.concatenate(
        [_pairwise_cosines(np.asarray(embeddings[i])) for i in owners if len(embeddings[i]) >= 2]
        or [np.empty(0)]
    )
    if positive.size == 0:
        raise DegenerateHistogramError("No identity has two embeddings; positive histogram is empty.")
    negative = _negative_cosines(embeddings, anchor, negative_pairs, seed)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    pos_counts, _ = np.histogram(np.clip(positive, -1.0, 1.0), bins=edges)
    neg_counts, _ = np.histogram(np.clip(negative, -1.0, 1.0), bins=edges)
    pos_mass = pos_counts / pos_counts.sum()
    neg_mass = neg_counts / neg_counts.sum()
    return SimilarityHistograms(
        edges=edges,
        positive=pos_mass,
        negative=neg_mass,
        overlap=float(np.minimum(pos_mass, neg_mass).sum()),
        positive_count=int(positive.size),
        negative_count=int(negative.size),
    )


def average_histograms(histograms: Sequence[SimilarityHistograms]) -> SimilarityHistograms:
    positive = np.mean([h.positive for h in histograms], axis=0)
    negative = np.mean([h.negative for h in histograms], axis=0)
    return SimilarityHistograms(
        edges=histograms[0].edges,
        positive=positive,
        negative=negative,
        overlap=float(np.minimum(positive, negative).sum()),
        positive_count=sum(h.positive_count for h in histograms),
        negative_count=sum(h.negative_count for h in histograms),
    )


def intra_class_variance(embeddings_per_identity) -> float:
    """
    Mean over identities of the mean squared distance between L2-normalized
    embeddings and their renormalized centroid. A centroid with norm below
    1e-9 is used unnormalized.
    """
    groups = (
        list(embeddings_per_identity.values())
        if isinstance(embeddings_per_identity, Mapping)
        else list(embeddings_per_identity)
    )
    if not groups:
        raise EvaluationError("No identities given.")
    variances = []
    for group in groups:
        group = np.asarray(group, dtype=np.float64)
        if len(group) < 2:
            raise EvaluationError("Every identity needs at least two embeddings.")
        unit = _normalize_rows(group)
        centroid = unit.mean(axis=0)
        norm = np.linalg.norm(centroid)
        if norm >= DEGENERATE_CENTROID_NORM:
            centroid = centroid / norm
        variances.append(np.mean(np.sum((unit - centroid) ** 2, axis=1)))
    return float(np.mean(variances))


def _memoized(embed: Callable) -> Callable:
    """Embed each input array once per client pipeline."""
    cache = {}

    def wrapped(x):
        if id(x) not in cache:
            cache[id(x)] = (x, embed(x))
        return cache[id(x)][1]

    return wrapped


def evaluate_clients(
    states: Sequence[ClientState],
    psi: EncoderParams,
    protocol: IdentificationProtocol,
    mode: str,
    config: EvaluationConfig = EvaluationConfig(),
    seed: int = 0,
) -> MethodEvaluation:
    """Per-client identification scores, AUROC, histograms and variance under one mode."""
    mode = resolve_mode(mode)
    ordered = sorted(states, key=lambda s: s.client_id)
    if config.max_clients:
        ordered = ordered[: config.max_clients]
    result = MethodEvaluation(mode)
    shared_templates = None
    histograms, own_embeddings = [], {}
    for state in ordered:
        embed = _memoized(embed_for_client(state, psi, mode))
        if mode == MODE_PRETRAINED:
            shared_templates = shared_templates or gallery_templates(embed, protocol)
            templates = shared_templates
        else:
            templates = gallery_templates(embed, protocol)
        identity = state.dataset.identity_id
        scores = identification_scores(embed, protocol, identity, templates)

        tpir = {}
        for fpir in config.fpir_points:
            try:
                tpir[fpir] = tpir_at_fpir(scores, fpir)
            except InsufficientDataError as error:
                logging.warning("client %d: %s", state.client_id, error)
                tpir[fpir] = None

        identities, template_matrix = templates
        own_template = template_matrix[np.flatnonzero(identities == identity)[0]]
        positive = _normalize_rows(embed(protocol.mated_probes[identity])) @ own_template
        negative = _normalize_rows(embed(protocol.non_mated_probes)) @ own_template
        result.clients.append(
            ClientScores(state.client_id, auroc(positive, negative), tpir, positive, negative)
        )

        own = embed(state.dataset.eval)
        own_embeddings[identity] = own
        non_mated = embed(protocol.non_mated_probes)
        pool = {
            identity: own,
            **{
                i: non_mated[protocol.non_mated_identities == i]
                for i in np.unique(protocol.non_mated_identities)
            },
        }
        histograms.append(
            similarity_histograms(
                pool,
                config.histogram_bins,
                config.negative_pairs,
                derive_seed(seed, state.client_id),
                anchor=identity,
            )
        )

    if result.clients:
        result.histograms = average_histograms(histograms)
        result.intra_class_variance = intra_class_variance(own_embeddings)
    return result
