"""Client side of the protocol.

A :class:`ClientState` holds everything a client keeps between rounds: the local
model, optimiser moments, the Decoder pool of completed tasks and the probe batch
used to detect data drift.

One federated round on a client is split in two by the orchestrator. The first
local epoch runs on its own so the Encoder after that epoch can be compared with a
reference (:func:`detect_drift`): the Encoder received from the server, or the one
the client had after the first epoch of its previous round. The remaining epochs run
after the server has reacted to drift and attack reports. Both halves share one
:class:`numpy.random.Generator`, which makes the split invisible: two calls with
``epochs=1`` and ``epochs=N-1`` give the same parameters as one call with ``N``.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data_gen import Dataset
from .errors import ContractViolation, PoolLookupError, ValidationError, _render
from .nn_core import (
    Network,
    OptimizerState,
    ParamVector,
    Seed,
    backward,
    cosine_distance,
    decoder_params,
    encoder_output,
    euclidean,
    flatten,
    forward,
    kl_feature_divergence,
    kl_feature_gradient,
    manhattan,
    optimizer_step,
    predict,
    reinit_decoder,
    softmax_cross_entropy,
    unflatten,
)

__all__ = [
    "ClientState",
    "DriftReport",
    "DecoderNotFoundError",
    "DRIFT_METRICS",
    "build_probe",
    "fedprox_penalty",
    "local_train",
    "defense_train",
    "detect_drift",
    "on_drift",
    "infer_historical",
]

_logger = logging.getLogger(__name__)

DRIFT_METRICS = {
    "manhattan": manhattan,
    "euclidean": euclidean,
    "cosine": cosine_distance,
}


class DecoderNotFoundError(PoolLookupError):
    """Client {client} has no Decoder for task {task}."""

    def __init__(self, client: int, task: int):
        self.client = client
        self.task = task
        self.pool = "client Decoder pool"
        self.key = task
        Exception.__init__(self, _render(self.__class__, client=client, task=task))


@dataclass
class ClientState:
    client_id: int
    model: Network
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    current_task: int = 0
    decoder_pool: Dict[int, ParamVector] = field(default_factory=dict)
    probe_cache: Optional[np.ndarray] = None
    data_size: int = 0
    attack_mode: bool = False
    drift_threshold: float = math.inf
    drift_metric: str = "manhattan"
    probe_size: int = 32
    #: federated iterations spent on the current task so far
    task_round: int = 0
    #: Decoder at the end of the client's last round, pushed to the pools on drift
    last_decoder: Optional[ParamVector] = None
    #: Encoder after the first local epoch of the client's previous round
    previous_encoder: Optional[ParamVector] = None

    def __post_init__(self):
        if self.drift_metric not in DRIFT_METRICS:
            raise ValidationError(f"unknown drift metric {self.drift_metric!r}")
        if not self.drift_threshold > 0:
            raise ValidationError("drift threshold must be positive")
        if self.last_decoder is None:
            self.last_decoder = decoder_params(self.model)


@dataclass(frozen=True)
class DriftReport:
    diff: float
    threshold: float
    shifted: bool
    metric: str = "manhattan"
    #: the same comparison under every supported distance
    distances: Dict[str, float] = field(default_factory=dict)


def build_probe(data: Dataset, size: int, rng_seed: Seed) -> np.ndarray:
    """Fixed batch of ``min(size, n)`` rows of ``data``, in index order"""
    if len(data) == 0:
        raise ValidationError("cannot draw a probe batch from an empty dataset")
    rng = np.random.default_rng(rng_seed)
    rows = np.sort(rng.choice(len(data), size=min(size, len(data)), replace=False))
    return data.features[rows].copy()


def fedprox_penalty(
    local: ParamVector, global_ref: ParamVector, mu: float
) -> Tuple[float, np.ndarray]:
    """Proximal term ``(mu/2)||local - global_ref||^2`` and its gradient"""
    local.check_layout(global_ref, "local and reference parameters")
    if not mu >= 0:
        raise ValidationError(f"proximal weight must be >= 0, got {mu}")
    delta = local.values - global_ref.values
    return 0.5 * mu * float(delta @ delta), mu * delta


def _check_inputs(state: ClientState, start: Network, data: Dataset, epochs: int):
    if not start.same_architecture(state.model):
        raise ValidationError("global model architecture differs from the client's")
    if data.dim != start.in_dim:
        msg = f"data has {data.dim} features, model expects {start.in_dim}"
        raise ValidationError(msg)
    if len(data) == 0:
        raise ValidationError("cannot train on an empty dataset")
    if epochs < 1:
        raise ValidationError(f"epochs must be >= 1, got {epochs}")


def _train(
    state: ClientState,
    start: Network,
    data: Dataset,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    reference: Optional[Network] = None,
    alpha: float = 0.0,
    prox_ref: Optional[ParamVector] = None,
    prox_mu: float = 0.0,
) -> Tuple[Network, List[float]]:
    model = start
    params = flatten(model)
    split = model.split_index
    n = len(data)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for begin in range(0, n, batch_size):
            idx = order[begin : begin + batch_size]
            x, y = data.features[idx], data.labels[idx]
            logits, cache = forward(model, x)
            loss, grad = softmax_cross_entropy(logits, y)
            feature_grad = None
            if reference is not None and alpha > 0:
                f_ref = encoder_output(reference, x)
                f_cur = cache.inputs[split]
                kl = kl_feature_divergence(f_ref, f_cur)
                loss = alpha * kl + (1.0 - alpha) * loss
                grad = (1.0 - alpha) * grad
                feature_grad = alpha * kl_feature_gradient(f_ref, f_cur)
            grads = backward(model, cache, grad, feature_grad)
            if prox_ref is not None and prox_mu > 0:
                extra_loss, extra_grad = fedprox_penalty(params, prox_ref, prox_mu)
                loss += extra_loss
                grads = grads.with_values(grads.values + extra_grad)
            params = optimizer_step(state.optimizer, params, grads)
            model = unflatten(model, params)
            total += loss * idx.size
        losses.append(total / n)
    return model, losses


def local_train(
    state: ClientState,
    global_model: Network,
    data: Dataset,
    epochs: int,
    batch_size: int = 32,
    rng_seed: Seed = 0,
    prox_mu: float = 0.0,
    prox_ref: Optional[ParamVector] = None,
) -> Tuple[Network, List[float]]:
    """Mini-batch training starting from ``global_model``.

    Args:
        state: the client; its optimiser moments are advanced, nothing else changes
        global_model: starting point, same architecture as ``state.model``
        data: current task data
        epochs: full passes over ``data``, each in a freshly shuffled order
        batch_size: mini-batch size, the last batch of an epoch may be smaller
        rng_seed: seed or a generator shared with a later continuation call
        prox_mu: weight of the FedProx proximal term, ``0`` disables it
        prox_ref: anchor of the proximal term, default: ``global_model``

    Returns:
        the trained network and the mean loss of every epoch
    """
    _check_inputs(state, global_model, data, epochs)
    if prox_mu > 0 and prox_ref is None:
        prox_ref = flatten(global_model)
    rng = np.random.default_rng(rng_seed)
    return _train(
        state, global_model, data, epochs, batch_size, rng,
        prox_ref=prox_ref, prox_mu=prox_mu,
    )


def defense_train(
    state: ClientState,
    prev_global_encoder: ParamVector,
    data: Dataset,
    alpha: float,
    epochs: int,
    batch_size: int = 32,
    rng_seed: Seed = 0,
    start: Optional[Network] = None,
) -> Tuple[Network, List[float]]:
    """Training that keeps the Encoder output close to a frozen reference.

    The loss is ``alpha * KL(ref || current) + (1 - alpha) * cross-entropy`` where
    both feature maps are softmax-normalised Encoder outputs on the same batch.
    ``start`` defaults to ``state.model``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if not state.attack_mode:
        raise ContractViolation("defense training outside attack mode")
    start = state.model if start is None else start
    _check_inputs(state, start, data, epochs)
    reference = unflatten(start, prev_global_encoder)
    rng = np.random.default_rng(rng_seed)
    return _train(state, start, data, epochs, batch_size, rng, reference, alpha)


def detect_drift(
    state: ClientState, encoder_before: ParamVector, encoder_after: ParamVector
) -> DriftReport:
    """Compare Encoder outputs on the probe batch before and after one local epoch"""
    probe = state.probe_cache
    if probe is None or len(probe) == 0:
        raise ValidationError(f"client {state.client_id} has no probe batch")
    before = encoder_output(unflatten(state.model, encoder_before), probe)
    after = encoder_output(unflatten(state.model, encoder_after), probe)
    distances = {}
    for name, metric in DRIFT_METRICS.items():
        try:
            distances[name] = metric(after, before)
        except ValidationError:
            if name == state.drift_metric:
                raise
            distances[name] = math.nan
    diff = distances[state.drift_metric]
    report = DriftReport(
        diff, state.drift_threshold, diff > state.drift_threshold,
        state.drift_metric, distances,
    )
    _logger.debug(
        "client %d task %d: %s diff %.6g (threshold %.6g)",
        state.client_id, state.current_task, state.drift_metric, diff,
        state.drift_threshold,
    )
    return report


def on_drift(
    state: ClientState,
    prev_decoder: ParamVector,
    rng_seed: Seed,
    data: Optional[Dataset] = None,
    probe_seed: Seed = None,
    store_decoder: bool = True,
) -> ClientState:
    """Close the current task and open the next one.

    The Decoder of the finished task goes into the client's pool unless the task was
    flagged adversarial (``store_decoder=False``). The Decoder layers are
    re-initialised from ``rng_seed`` while the Encoder is kept as is. When ``data``
    of the new task is given the probe batch is rebuilt from it.
    """
    task = state.current_task
    if store_decoder:
        if task in state.decoder_pool:
            msg = f"client {state.client_id} already pooled task {task}"
            raise ContractViolation(msg)
        state.decoder_pool[task] = prev_decoder
    state.model = reinit_decoder(state.model, rng_seed)
    state.current_task = task + 1
    state.task_round = 0
    state.attack_mode = False
    state.optimizer.reset()
    if data is not None:
        seed = rng_seed if probe_seed is None else probe_seed
        state.probe_cache = build_probe(data, state.probe_size, seed)
        state.data_size = len(data)
    _logger.info(
        "client %d moved from task %d to task %d (decoder %s)",
        state.client_id, task, task + 1, "pooled" if store_decoder else "discarded",
    )
    return state


def infer_historical(state: ClientState, task_id: int, batch: np.ndarray) -> np.ndarray:
    """Predict with the current Encoder and the Decoder belonging to ``task_id``"""
    if task_id == state.current_task:
        return predict(state.model, batch)
    if task_id not in state.decoder_pool:
        raise DecoderNotFoundError(state.client_id, task_id)
    return predict(unflatten(state.model, state.decoder_pool[task_id]), batch)
