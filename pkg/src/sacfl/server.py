"""Server side: pools, aggregation rules and adversarial-task detection.

Aggregation happens in two stages for the Encoder. :func:`spatial_aggregate` first
averages the client updates of one round weighted by data size, then
:func:`temporal_fuse` averages the result with the final global Encoders of all
completed tasks. Decoders only go through the spatial stage.

When an attack is suspected the spatial stage is replaced by a robust rule:
:func:`krum`, :func:`coordinate_median` or :func:`trimmed_mean`.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .data_gen import Dataset, ProxyPool
from .errors import (
    ContractViolation,
    PoolLookupError,
    ValidationError,
    ZeroBaselineAccuracy,
)
from .nn_core import Network, ParamVector, accuracy, encoder_params, unflatten

__all__ = [
    "ServerState",
    "AggregationWeights",
    "AdversarialReport",
    "ROBUST_AGGREGATORS",
    "spatial_aggregate",
    "temporal_fuse",
    "krum",
    "coordinate_median",
    "trimmed_mean",
    "robust_aggregate",
    "evaluate_accuracy",
    "record_baselines",
    "detect_adversarial",
]

_logger = logging.getLogger(__name__)

PoolKey = Tuple[int, int]


@dataclass
class ServerState:
    """Global model plus the Encoder, Decoder and proxy-data pools.

    ``global_model`` carries the spatial aggregate of the last round;
    :meth:`distributed_model` is what clients receive, with its Encoder fused with
    the Encoder pool.
    """

    global_model: Network
    encoder_pool: List[ParamVector] = field(default_factory=list)
    decoder_pool: Dict[PoolKey, ParamVector] = field(default_factory=dict)
    proxy_pool: ProxyPool = field(default_factory=ProxyPool)
    baseline_acc: Dict[PoolKey, float] = field(default_factory=dict)
    global_task: int = 0
    degrade_threshold: float = 0.40
    #: global task ids flagged adversarial, they never enter any pool
    flagged_tasks: Set[int] = field(default_factory=set)

    def distributed_model(self) -> Network:
        spatial = encoder_params(self.global_model)
        fused = temporal_fuse(self.encoder_pool, spatial, len(self.encoder_pool))
        if fused is spatial:
            return self.global_model
        return unflatten(self.global_model, fused)

    def push_decoder(self, client: int, task: int, decoder: ParamVector):
        if (client, task) in self.decoder_pool:
            raise ContractViolation(f"server already pooled Decoder {(client, task)}")
        self.decoder_pool[(client, task)] = decoder


@dataclass(frozen=True)
class AggregationWeights:
    weights: Tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.size == 0 or np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValidationError(f"weights must be non-negative and sum to 1: {w}")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "AggregationWeights":
        sizes_arr = np.asarray(sizes, dtype=np.float64)
        if sizes_arr.size == 0:
            raise ValidationError("no client sizes given")
        if np.any(sizes_arr <= 0):
            raise ValidationError(f"data sizes must be positive, got {list(sizes)}")
        return cls(tuple(float(s) for s in sizes_arr / sizes_arr.sum()))


@dataclass(frozen=True)
class AdversarialReport:
    degrade: float
    adversarial: bool
    threshold: float
    #: per-client mean relative accuracy drop
    per_client: Dict[int, float] = field(default_factory=dict)


def _stack(updates: Sequence[ParamVector], where: str) -> np.ndarray:
    if not updates:
        raise ValidationError(f"{where} needs at least one update")
    first = updates[0]
    for update in updates[1:]:
        if update.layout != first.layout:
            raise ValidationError(f"layout mismatch between updates in {where}")
    return np.stack([u.values for u in updates])


def spatial_aggregate(
    updates: Sequence[ParamVector], sizes: Sequence[int]
) -> ParamVector:
    """Data-size weighted mean of the client updates"""
    stacked = _stack(updates, "spatial_aggregate")
    if len(sizes) != len(updates):
        raise ValidationError(f"{len(updates)} updates but {len(sizes)} sizes")
    weights = np.asarray(AggregationWeights.from_sizes(sizes).weights)
    if np.all(stacked == stacked[0]):
        return updates[0].copy()
    return updates[0].with_values(weights @ stacked)


def temporal_fuse(
    encoder_pool: Sequence[ParamVector], spatial: ParamVector, t: int
) -> ParamVector:
    """Uniform mean of the ``t`` pooled Encoders and the spatial aggregate"""
    if len(encoder_pool) != t:
        msg = f"Encoder pool holds {len(encoder_pool)} entries, expected {t}"
        raise ContractViolation(msg)
    if t == 0:
        return spatial
    for pooled in encoder_pool:
        pooled.check_layout(spatial, "pooled and aggregated Encoders")
    stacked = np.stack([p.values for p in encoder_pool] + [spatial.values])
    return spatial.with_values(stacked.sum(axis=0) / (t + 1))


def krum(updates: Sequence[ParamVector], f: int) -> Tuple[ParamVector, List[float]]:
    """Select the update closest to its ``n - f - 2`` nearest neighbours.

    Scores are sums of squared Euclidean distances; ties go to the lowest index.
    """
    stacked = _stack(updates, "krum")
    n = len(updates)
    if f < 0 or n < f + 3:
        raise ValidationError(f"krum needs n >= f + 3, got n={n}, f={f}")
    distances = ((stacked[:, None, :] - stacked[None, :, :]) ** 2).sum(axis=2)
    neighbours = n - f - 2
    scores = []
    for i in range(n):
        others = np.delete(distances[i], i)
        scores.append(float(np.sort(others)[:neighbours].sum()))
    selected = int(np.argmin(scores))
    _logger.debug("krum selected update %d with score %.6g", selected, scores[selected])
    return updates[selected], scores


def coordinate_median(updates: Sequence[ParamVector]) -> ParamVector:
    stacked = _stack(updates, "coordinate_median")
    return updates[0].with_values(np.median(stacked, axis=0))


def trimmed_mean(updates: Sequence[ParamVector], beta: float) -> ParamVector:
    """Per-coordinate mean without the ``floor(beta * n)`` extremes on each side"""
    stacked = _stack(updates, "trimmed_mean")
    n = len(updates)
    if not 0 <= beta < 0.5:
        raise ValidationError(f"trim fraction must lie in [0, 0.5), got {beta}")
    k = int(np.floor(beta * n + 1e-9))
    if 2 * k >= n:
        raise ValidationError(f"trimming {k} values per side leaves nothing of {n}")
    ordered = np.sort(stacked, axis=0)
    return updates[0].with_values(ordered[k : n - k].mean(axis=0))


ROBUST_AGGREGATORS = ("krum", "median", "trimmed_mean")


def robust_aggregate(
    name: str, updates: Sequence[ParamVector], krum_f: int = 1, trim_beta: float = 0.1
) -> ParamVector:
    """Dispatch to a robust rule by name (``krum``, ``median``, ``trimmed_mean``)"""
    if name == "krum":
        return krum(updates, krum_f)[0]
    if name == "median":
        return coordinate_median(updates)
    if name == "trimmed_mean":
        return trimmed_mean(updates, trim_beta)
    raise ValidationError(f"unknown robust aggregator {name!r}")


def evaluate_accuracy(
    encoder: ParamVector, decoder: ParamVector, template: Network, data: Dataset
) -> float:
    """Accuracy of ``encoder`` composed with ``decoder`` on ``data``"""
    model = unflatten(unflatten(template, encoder), decoder)
    return accuracy(model, data.features, data.labels)


def _proxy(proxy_pool: ProxyPool, key: PoolKey) -> Dataset:
    if key not in proxy_pool:
        raise PoolLookupError("proxy history data pool", key)
    return proxy_pool[key]


def record_baselines(
    encoder: ParamVector,
    decoder_pool: Dict[PoolKey, ParamVector],
    proxy_pool: ProxyPool,
    template: Network,
    keys: Optional[Sequence[PoolKey]] = None,
) -> Dict[PoolKey, float]:
    """Accuracy of ``encoder`` with each pooled Decoder on its proxy data"""
    keys = sorted(decoder_pool) if keys is None else list(keys)
    baselines = {}
    for key in keys:
        if key not in decoder_pool:
            raise PoolLookupError("server Decoder pool", key)
        data = _proxy(proxy_pool, key)
        baselines[key] = evaluate_accuracy(encoder, decoder_pool[key], template, data)
    return baselines


def detect_adversarial(
    candidate_encoder: ParamVector,
    decoder_pool: Dict[PoolKey, ParamVector],
    proxy_pool: ProxyPool,
    baseline_acc: Dict[PoolKey, float],
    j: int,
    template: Network,
    degrade_threshold: float = 0.40,
) -> AdversarialReport:
    """Degradation rate of historical tasks under a candidate Encoder.

    Every pooled Decoder of a task ``t < j`` is composed with ``candidate_encoder``
    and evaluated on the matching proxy data. The relative accuracy drop against the
    recorded baseline is averaged over each client's tasks, then over clients. A
    zero baseline cannot be divided by and is left out with a warning.
    """
    if j < 1:
        raise ValidationError(f"adversarial detection needs j >= 1, got {j}")
    drops: Dict[int, List[float]] = {}
    for key in sorted(k for k in decoder_pool if k[1] < j):
        client, task = key
        if key not in baseline_acc:
            raise PoolLookupError("baseline accuracy table", key)
        data = _proxy(proxy_pool, key)
        base = baseline_acc[key]
        if base == 0:
            ZeroBaselineAccuracy.warn(client, task)
            continue
        decoder = decoder_pool[key]
        current = evaluate_accuracy(candidate_encoder, decoder, template, data)
        drops.setdefault(client, []).append((base - current) / base)
    per_client = {k: float(np.mean(v)) for k, v in drops.items()}
    degrade = float(np.mean(list(per_client.values()))) if per_client else 0.0
    report = AdversarialReport(
        degrade, degrade > degrade_threshold, degrade_threshold, per_client
    )
    _logger.debug("degrade %.6g per client: %s", degrade, per_client)
    return report
