"""Round loop of an experiment.

:class:`Simulation` wires the data side (:class:`Environment`), the clients and the
server together and runs one federated round per :meth:`Simulation.step`:

1. the server distributes its model, the Encoder fused with the Encoder pool;
2. every participant trains one local epoch and, once a task is past its warm-up
   rounds, compares the resulting Encoder with a reference (see
   :class:`~sacfl.config.DetectionConfig`);
3. after a barrier, drift reports are resolved: clients that changed task push
   their last Decoder to the pools and the server records baselines for the
   finished task;
4. participants finish the remaining local epochs, a client that just opened a new
   task trains its fresh Decoder for at least one of them;
5. the server checks the aggregate of the trained Encoders of those clients for an
   adversarial task;
6. the server aggregates, robustly while an attack is flagged. Flagged clients
   train with the KL-constrained loss from the next round on.

Randomness comes from a single master seed fanned out by :class:`SeedFanout` into
independent streams per purpose, client, round and task, so results do not depend
on the order or the threads clients run in.
"""
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from dataclasses import replace as replace_spec
from enum import IntEnum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .client import (
    ClientState,
    DecoderNotFoundError,
    DriftReport,
    build_probe,
    defense_train,
    detect_drift,
    fedprox_penalty,
    local_train,
    on_drift,
)
from .config import ExperimentConfig
from .data_gen import (
    AttackKind,
    Dataset,
    TaskStream,
    apply_backdoor,
    apply_label_flip,
    apply_noise,
    load_idx_dataset,
    make_blobs,
    partition_class_incremental,
    partition_domain_incremental,
    sample_proxy,
    stratified_split,
)
from .errors import (
    MissingHistoricalDecoder,
    NumericalError,
    SacFLError,
    ValidationError,
)
from .nn_core import (
    Network,
    OptimizerKind,
    OptimizerState,
    ParamVector,
    accuracy,
    decoder_params,
    encoder_params,
    flatten,
    init_network,
    layer_change_profile,
    unflatten,
)
from .server import (
    ServerState,
    detect_adversarial,
    evaluate_accuracy,
    record_baselines,
    robust_aggregate,
    spatial_aggregate,
)

__all__ = [
    "Purpose",
    "SeedFanout",
    "Environment",
    "RoundMetrics",
    "StorageReport",
    "LayerDiagnosis",
    "CalibrationError",
    "Simulation",
    "build_environment",
    "run_simulation",
    "evaluate_historical",
    "separating_threshold",
    "drift_distances",
    "calibrate_drift_threshold",
    "fedprox_penalty",
    "storage_report",
    "diagnose_layers",
    "thread_count",
]

_logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

BYTES_PER_PARAM = 8
ROBUST_METHODS = ("krum", "median", "trimmed_mean")


class CalibrationError(SacFLError):
    """Drift threshold calibration failed: {msg}"""


class Purpose(IntEnum):
    INIT = 0
    DATA = 1
    ATTACK = 2
    PROBE = 3
    TRAIN = 4
    DECODER = 5
    PROXY = 6
    SAMPLE = 7


class SeedFanout:
    """Counter-based seed derivation from one master seed.

    ``seed(purpose, *counters)`` depends only on the master seed and its arguments,
    so adding a client never changes the streams of the existing ones.
    """

    def __init__(self, master: int):
        self.master = int(master)

    def seed(self, purpose: Purpose, *counters: int) -> np.random.SeedSequence:
        key = (int(purpose),) + tuple(int(c) for c in counters)
        return np.random.SeedSequence(entropy=self.master, spawn_key=key)

    def rng(self, purpose: Purpose, *counters: int) -> np.random.Generator:
        return np.random.default_rng(self.seed(purpose, *counters))


def thread_count() -> int:
    """Worker threads per round, from ``SACFL_THREADS`` (default 1)"""
    raw = os.environ.get("SACFL_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        msg = f"SACFL_THREADS must be an integer, got {raw!r}"
        raise ValidationError(msg) from None
    if value < 1:
        raise ValidationError(f"SACFL_THREADS must be >= 1, got {value}")
    return value


# ---- Data side ----


@dataclass
class Environment:
    """Training streams plus the clean per-task public and test data"""

    streams: List[TaskStream]
    public: List[Dataset]
    tests: List[Dataset]
    attacks: List[str]
    num_classes: int

    @property
    def num_tasks(self) -> int:
        return len(self.tests)

    @property
    def dim(self) -> int:
        return self.tests[0].dim

    @property
    def total_rounds(self) -> int:
        return max(s.total_rounds for s in self.streams)

    @property
    def benign_tasks(self) -> List[int]:
        return [t for t, attack in enumerate(self.attacks) if attack == "none"]

    def truncated(self, num_tasks: int, iterations: int) -> "Environment":
        """First ``num_tasks`` tasks, ``iterations`` rounds each, shared boundaries"""
        if num_tasks > self.num_tasks:
            raise ValidationError(f"only {self.num_tasks} tasks available")
        streams = []
        for s in self.streams:
            head = s.specs[:num_tasks]
            specs = [replace_spec(spec, iterations=iterations) for spec in head]
            streams.append(TaskStream(s.client_id, specs, s.datasets[:num_tasks]))
        return Environment(
            streams,
            self.public[:num_tasks],
            self.tests[:num_tasks],
            self.attacks[:num_tasks],
            self.num_classes,
        )


def _base_dataset(cfg: ExperimentConfig, fan: SeedFanout) -> Dataset:
    s = cfg.stream
    if s.idx_images is not None:
        return load_idx_dataset(s.idx_images, s.idx_labels)
    per_class = s.per_class + s.test_per_class + s.public_per_class
    seed = fan.seed(Purpose.DATA, 0)
    return make_blobs(s.num_classes, s.dim, per_class, s.separation, s.spread, seed)


def _poison(cfg: ExperimentConfig, ds: Dataset, kind: str, seed, classes) -> Dataset:
    s = cfg.stream
    if kind == "label_flip":
        space = classes if s.flip_space == "global" else ds.class_set
        return apply_label_flip(ds, seed, space)
    b = s.backdoor
    value = 3.0 * s.spread if b.value is None else b.value
    widened = ds.with_class_set(ds.class_set | classes)
    return apply_backdoor(widened, b.dims, value, b.target, b.fraction, seed)


def build_environment(cfg: ExperimentConfig) -> Environment:
    """Generate (or load) the data of an experiment, poisoned where scheduled"""
    fan = SeedFanout(cfg.seed)
    s = cfg.stream
    base = _base_dataset(cfg, fan)
    split_seed = fan.seed(Purpose.DATA, 1)
    test_base, public_base, train_base = stratified_split(
        base, [s.test_per_class, s.public_per_class], split_seed
    )
    its = s.iterations_per_task
    offsets = s.client_offsets
    k = cfg.num_clients
    if s.kind == "class_incremental":
        seed = fan.seed(Purpose.DATA, 2)
        streams = partition_class_incremental(
            train_base, s.num_tasks, k, seed, its, offsets
        )
        groups = [spec.classes for spec in streams[0].specs]
        tests = [test_base.select_classes(g) for g in groups]
        public = [public_base.select_classes(g) for g in groups]
    else:
        seed = fan.seed(Purpose.DATA, 2)
        streams = partition_domain_incremental(
            train_base, s.noise, k, seed, its, offsets
        )
        tests = [
            apply_noise(test_base, noise, fan.seed(Purpose.DATA, 3, t))
            for t, noise in enumerate(s.noise)
        ]
        public = [
            apply_noise(public_base, noise, fan.seed(Purpose.DATA, 4, t))
            for t, noise in enumerate(s.noise)
        ]

    attacks = s.attack_schedule
    attackers = range(k) if s.attack_clients is None else s.attack_clients
    for client in attackers:
        stream = streams[client]
        for t, kind in enumerate(attacks):
            if kind == "none":
                continue
            seed = fan.seed(Purpose.ATTACK, client, t)
            poisoned = _poison(cfg, stream.datasets[t], kind, seed, base.class_set)
            stream.datasets[t] = poisoned
            stream.specs[t] = replace_spec(stream.specs[t], attack=AttackKind(kind))
    num_classes = max(base.class_set) + 1
    return Environment(streams, public, tests, attacks, num_classes)


# ---- Metrics ----


@dataclass
class RoundMetrics:
    round: int
    task: int
    #: test accuracy of every evaluated task
    accuracies: Dict[int, float]
    avg_accuracy: float
    train_loss: float
    participants: Tuple[int, ...] = ()
    #: drift distance of every checked client under the configured metric
    diffs: Dict[int, float] = field(default_factory=dict)
    #: the same comparisons under every supported metric
    distances: Dict[int, Dict[str, float]] = field(default_factory=dict)
    drift: bool = False
    drift_clients: Tuple[int, ...] = ()
    degrade: Optional[float] = None
    attack: bool = False
    aggregator: str = "weighted"
    wall_time: float = 0.0


@dataclass(frozen=True)
class StorageReport:
    decoder_params: int
    model_params: int
    #: bytes held by all client Decoder pools together
    client_pool_bytes: int
    #: bytes held by the server Decoder pool
    decoder_pool_bytes: int
    #: bytes needed to keep one full model per pooled entry instead
    full_model_bytes: int

    @property
    def ratio(self) -> float:
        return self.decoder_params / self.model_params

    def as_dict(self) -> Dict[str, float]:
        return {
            "decoder_params": self.decoder_params,
            "model_params": self.model_params,
            "client_pool_bytes": self.client_pool_bytes,
            "decoder_pool_bytes": self.decoder_pool_bytes,
            "full_model_bytes": self.full_model_bytes,
            "ratio": self.ratio,
        }


def storage_report(
    server: ServerState, clients: Sequence[ClientState], model: Network
) -> StorageReport:
    """Storage used by the Decoder pools compared with storing whole models"""
    entries = len(server.decoder_pool)
    client_entries = sum(len(c.decoder_pool) for c in clients)
    return StorageReport(
        decoder_params=model.decoder_param_count,
        model_params=model.param_count,
        client_pool_bytes=client_entries * model.decoder_param_count * BYTES_PER_PARAM,
        decoder_pool_bytes=entries * model.decoder_param_count * BYTES_PER_PARAM,
        full_model_bytes=entries * model.param_count * BYTES_PER_PARAM,
    )


def evaluate_historical(
    server: ServerState,
    clients: Sequence[ClientState],
    test_sets: Sequence[Dataset],
    tasks: Optional[Sequence[int]] = None,
    use_pools: bool = True,
    strict: bool = True,
) -> Tuple[Dict[int, float], float]:
    """Accuracy on every task in ``tasks`` (default: all test sets) and their mean.

    With ``use_pools`` a task a client has already left is evaluated with the
    current global Encoder and the client's pooled Decoder of that task, the others
    with the global Decoder; accuracies are averaged over clients. A client without
    the Decoder it needs raises :class:`DecoderNotFoundError`, or falls back to the
    global Decoder with a warning when ``strict`` is false.
    """
    model = server.distributed_model() if use_pools else server.global_model
    tasks = list(range(len(test_sets))) if tasks is None else list(tasks)
    encoder = encoder_params(model)
    global_acc: Dict[int, float] = {}

    def current(t: int) -> float:
        if t not in global_acc:
            data = test_sets[t]
            global_acc[t] = accuracy(model, data.features, data.labels)
        return global_acc[t]

    accuracies = {}
    for t in tasks:
        if not use_pools:
            accuracies[t] = current(t)
            continue
        per_client = []
        for client in clients:
            if t in client.decoder_pool:
                decoder = client.decoder_pool[t]
                data = test_sets[t]
                per_client.append(evaluate_accuracy(encoder, decoder, model, data))
            elif t >= client.current_task:
                per_client.append(current(t))
            elif strict:
                raise DecoderNotFoundError(client.client_id, t)
            else:
                MissingHistoricalDecoder.warn(client.client_id, t)
                per_client.append(current(t))
        if all(value == per_client[0] for value in per_client):
            accuracies[t] = per_client[0]
        else:
            accuracies[t] = float(np.mean(per_client))
    average = float(np.mean(list(accuracies.values()))) if accuracies else 0.0
    return accuracies, average


# ---- Simulation ----


@dataclass
class _Progress:
    """What one client carries from the first to the second half of a round"""

    model: Network
    losses: List[float]
    rng: np.random.Generator
    data: Dataset
    report: Optional[DriftReport] = None


class Simulation:
    """One experiment, advanced round by round

    Args:
        cfg: validated configuration
        env: data to run on, default: :func:`build_environment` of ``cfg``
        drift_threshold: overrides the configured (or calibrated) threshold
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        env: Optional[Environment] = None,
        drift_threshold: Optional[float] = None,
    ):
        self.cfg = cfg
        self.env = build_environment(cfg) if env is None else env
        self.fan = SeedFanout(cfg.seed)
        self.round = 0
        self.metrics: List[RoundMetrics] = []
        self.threads = thread_count()
        self.drift_threshold = self._threshold(drift_threshold)

        widths = [self.env.dim, *cfg.model.hidden, self.env.num_classes]
        model = init_network(widths, cfg.split_index, self.fan.seed(Purpose.INIT))
        self.server = ServerState(
            model, degrade_threshold=cfg.detection.degrade_threshold
        )
        self.clients = [self._new_client(k, model) for k in range(cfg.num_clients)]

    @property
    def sacfl(self) -> bool:
        return self.cfg.method == "sacfl"

    def _threshold(self, explicit: Optional[float]) -> float:
        d = self.cfg.detection
        if explicit is not None:
            return explicit
        if not isinstance(d.drift_threshold, str):
            return d.drift_threshold
        if not self.sacfl or d.mode != "distance" or self.env.num_tasks < 2:
            return math.inf
        return calibrate_drift_threshold(self.cfg, env=self.env)

    def _new_client(self, k: int, model: Network) -> ClientState:
        o, d = self.cfg.optimizer, self.cfg.detection
        optimizer = OptimizerState(
            OptimizerKind(o.kind), o.learning_rate, o.beta1, o.beta2, o.eps
        )
        first = self.env.streams[k].datasets[0]
        state = ClientState(
            k,
            model,
            optimizer,
            data_size=len(first),
            drift_threshold=self.drift_threshold,
            drift_metric=d.metric,
            probe_size=d.probe_size,
        )
        if self.sacfl:
            seed = self.fan.seed(Purpose.PROBE, k, 0)
            state.probe_cache = build_probe(first, d.probe_size, seed)
        return state

    def _map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        if self.threads == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=min(self.threads, len(items))) as pool:
            return list(pool.map(fn, items))

    def participants(self, round_idx: int) -> List[int]:
        k = self.cfg.num_clients
        m = self.cfg.participants
        if m >= k:
            return list(range(k))
        rng = self.fan.rng(Purpose.SAMPLE, round_idx)
        return sorted(int(c) for c in rng.choice(k, size=m, replace=False))

    # -- client work --

    def _defends(self, state: ClientState) -> bool:
        return (
            self.sacfl
            and state.attack_mode
            and self.cfg.defense.enabled
            and bool(self.server.encoder_pool)
        )

    def _train(
        self,
        state: ClientState,
        start: Network,
        distributed: Network,
        data: Dataset,
        epochs: int,
        rng: np.random.Generator,
    ) -> Tuple[Network, List[float]]:
        o = self.cfg.optimizer
        if self._defends(state):
            reference = self.server.encoder_pool[-1]
            return defense_train(
                state, reference, data, self.cfg.defense.alpha, epochs,
                o.batch_size, rng, start=start,
            )
        mu = self.cfg.prox_mu if self.cfg.method == "fedprox" else 0.0
        return local_train(
            state, start, data, epochs, o.batch_size, rng,
            prox_mu=mu, prox_ref=flatten(distributed) if mu > 0 else None,
        )

    def _first_epoch(self, k: int, distributed: Network) -> _Progress:
        i = self.round
        state = self.clients[k]
        data = self.env.streams[k].dataset_at(i)
        rng = self.fan.rng(Purpose.TRAIN, k, i)
        state.optimizer.reset()
        state.model = distributed
        model, losses = self._train(state, distributed, distributed, data, 1, rng)
        state.model = model
        report = None
        if self.sacfl:
            d = self.cfg.detection
            after = encoder_params(model)
            if d.reference == "received":
                before: Optional[ParamVector] = encoder_params(distributed)
            else:
                before = state.previous_encoder
            if state.task_round >= d.warmup_rounds and before is not None:
                report = detect_drift(state, before, after)
            state.previous_encoder = after
        return _Progress(model, losses, rng, data, report)

    def _remaining_epochs(
        self, k: int, progress: _Progress, distributed: Network, reopened: bool
    ):
        state = self.clients[k]
        epochs = self.cfg.optimizer.local_epochs - 1
        if reopened:
            # the first epoch trained the Decoder on_drift replaced
            epochs = max(epochs, 1)
        if epochs > 0:
            model, losses = self._train(
                state, state.model, distributed, progress.data, epochs, progress.rng
            )
            progress.model = model
            progress.losses.extend(losses)
        else:
            progress.model = state.model
        state.model = progress.model
        state.last_decoder = decoder_params(progress.model)
        state.data_size = len(progress.data)
        state.task_round += 1

    # -- server work --

    def _drifted(self, progress: Dict[int, _Progress]) -> List[int]:
        mode = self.cfg.detection.mode
        if not self.sacfl or mode == "off":
            return []
        flagged = []
        for k, p in progress.items():
            state = self.clients[k]
            if mode == "oracle":
                shifted = self.env.streams[k].task_at(self.round) > state.current_task
            else:
                shifted = p.report is not None and p.report.shifted
            if shifted:
                flagged.append(k)
        if flagged and self.cfg.stream.client_offsets is None:
            # boundaries are shared, one report moves everybody
            return list(range(self.cfg.num_clients))
        return flagged

    def _close_task(self, k: int, distributed: Network):
        i = self.round
        state = self.clients[k]
        old_task = state.current_task
        benign = not state.attack_mode
        if not benign:
            self.server.flagged_tasks.add(old_task)
        prev_decoder = state.last_decoder
        assert prev_decoder is not None
        stream = self.env.streams[k]
        new_task = old_task + 1
        on_drift(
            state,
            prev_decoder,
            self.fan.seed(Purpose.DECODER, new_task),
            data=stream.dataset_at(i),
            probe_seed=self.fan.seed(Purpose.PROBE, k, new_task),
            store_decoder=benign,
        )
        if not benign:
            return
        self.server.push_decoder(k, old_task, prev_decoder)
        public = self.env.public[stream.task_at(max(i - 1, 0))]
        size = min(self.cfg.detection.proxy_size, len(public))
        proxy_seed = self.fan.seed(Purpose.PROXY, k, old_task)
        self.server.proxy_pool.add(k, old_task, sample_proxy(public, size, proxy_seed))
        baselines = record_baselines(
            encoder_params(distributed),
            self.server.decoder_pool,
            self.server.proxy_pool,
            distributed,
            keys=[(k, old_task)],
        )
        self.server.baseline_acc.update(baselines)

    def _grow_encoder_pool(self):
        completed = min(c.current_task for c in self.clients)
        while self.server.global_task < completed:
            task = self.server.global_task
            if task not in self.server.flagged_tasks:
                final = encoder_params(self.server.global_model)
                self.server.encoder_pool.append(final)
                for client in self.clients:
                    # the distributed Encoder moves with the pool
                    client.previous_encoder = None
                _logger.info("task %d completed, Encoder pooled", task)
            else:
                _logger.info("task %d completed, flagged adversarial", task)
            self.server.global_task += 1

    def _check_attack(
        self, drifted: List[int], progress: Dict[int, _Progress]
    ) -> Tuple[Optional[float], bool]:
        candidates = [k for k in drifted if k in progress]
        if not (self.sacfl and self.cfg.defense.enabled and candidates):
            return None, False
        if not self.server.decoder_pool:
            return None, False
        shared = self.cfg.stream.client_offsets is None
        groups = [candidates] if shared else [[k] for k in candidates]
        degrades, attacked = [], []
        for group in groups:
            encoders = [encoder_params(progress[k].model) for k in group]
            sizes = [len(progress[k].data) for k in group]
            template = progress[group[0]].model
            report = detect_adversarial(
                spatial_aggregate(encoders, sizes),
                self.server.decoder_pool,
                self.server.proxy_pool,
                self.server.baseline_acc,
                self.clients[group[0]].current_task,
                template,
                self.server.degrade_threshold,
            )
            degrades.append(report.degrade)
            if report.adversarial:
                attacked.extend(drifted if shared else group)
        for k in attacked:
            self.clients[k].attack_mode = True
        if attacked:
            _logger.info("round %d: adversarial task for %s", self.round, attacked)
        return max(degrades), bool(attacked)

    def _aggregate(
        self, updates: List[ParamVector], sizes: List[int], robust: bool
    ) -> str:
        cfg = self.cfg
        if cfg.method in ROBUST_METHODS:
            name = cfg.method
        elif robust:
            name = cfg.defense.aggregator
        else:
            name = "weighted"
        if name == "weighted":
            aggregated = spatial_aggregate(updates, sizes)
        else:
            f, beta = cfg.defense.krum_f, cfg.defense.trim_beta
            aggregated = robust_aggregate(name, updates, f, beta)
        if not np.all(np.isfinite(aggregated.values)):
            raise NumericalError(f"the global model of round {self.round}")
        self.server.global_model = unflatten(self.server.global_model, aggregated)
        return name

    # -- round --

    def step(self) -> RoundMetrics:
        """Run the next round and return its metrics"""
        i = self.round
        started = time.perf_counter()
        participants = self.participants(i)
        if self.sacfl:
            distributed = self.server.distributed_model()
        else:
            distributed = self.server.global_model

        results = self._map(lambda k: self._first_epoch(k, distributed), participants)
        progress = dict(zip(participants, results))

        drifted = self._drifted(progress)
        for k in drifted:
            self._close_task(k, distributed)
        if drifted:
            _logger.info("round %d: drift detected by clients %s", i, drifted)
            self._grow_encoder_pool()

        reopened = set(drifted)
        self._map(
            lambda k: self._remaining_epochs(
                k, progress[k], distributed, k in reopened
            ),
            participants,
        )
        degrade, attack = self._check_attack(drifted, progress)
        updates = [flatten(progress[k].model) for k in participants]
        sizes = [len(progress[k].data) for k in participants]
        robust = any(self._defends(self.clients[k]) for k in participants)
        aggregator = self._aggregate(updates, sizes, robust)

        final_losses = [progress[k].losses[-1] for k in participants]
        train_loss = float(np.mean(final_losses))
        if not math.isfinite(train_loss):
            raise NumericalError(f"the training loss of round {i}")
        task = max(s.task_at(i) for s in self.env.streams)
        tasks = [t for t in self.env.benign_tasks if t <= task]
        accuracies, average = evaluate_historical(
            self.server, self.clients, self.env.tests, tasks,
            use_pools=self.sacfl, strict=False,
        )
        reports = {k: p.report for k, p in progress.items() if p.report is not None}
        metrics = RoundMetrics(
            round=i,
            task=task,
            accuracies=accuracies,
            avg_accuracy=average,
            train_loss=train_loss,
            participants=tuple(participants),
            diffs={k: r.diff for k, r in reports.items()},
            distances={k: dict(r.distances) for k, r in reports.items()},
            drift=bool(drifted),
            drift_clients=tuple(drifted),
            degrade=degrade,
            attack=attack,
            aggregator=aggregator,
            wall_time=time.perf_counter() - started,
        )
        _logger.info(
            "round %d task %d: avg accuracy %.4f, loss %.4f, aggregator %s",
            i, task, average, train_loss, aggregator,
        )
        self.metrics.append(metrics)
        self.round += 1
        return metrics

    def run(self) -> List[RoundMetrics]:
        while self.round < self.env.total_rounds:
            self.step()
        return self.metrics

    def storage(self) -> StorageReport:
        return storage_report(self.server, self.clients, self.server.global_model)

    def summary(self) -> Dict[str, object]:
        """Final accuracies, pool sizes and storage, ready for JSON"""
        last = self.metrics[-1] if self.metrics else None
        final = last.accuracies if last else {}
        times = [m.wall_time for m in self.metrics]
        threshold: Optional[float] = self.drift_threshold
        if not math.isfinite(self.drift_threshold):
            # JSON has no infinity
            threshold = None
        return {
            "method": self.cfg.method,
            "rounds": len(self.metrics),
            "drift_threshold": threshold,
            "final_accuracies": {str(t): a for t, a in final.items()},
            "final_avg_accuracy": last.avg_accuracy if last else None,
            "drift_rounds": [m.round for m in self.metrics if m.drift],
            "attack_rounds": [m.round for m in self.metrics if m.attack],
            "encoder_pool_size": len(self.server.encoder_pool),
            "server_decoder_pool_size": len(self.server.decoder_pool),
            "client_decoder_pool_sizes": [len(c.decoder_pool) for c in self.clients],
            "storage": self.storage().as_dict(),
            "mean_round_seconds": float(np.mean(times)) if times else 0.0,
        }


def run_simulation(
    cfg: ExperimentConfig, env: Optional[Environment] = None
) -> List[RoundMetrics]:
    """Run every round of the experiment described by ``cfg``"""
    return Simulation(cfg, env).run()


# ---- Calibration ----


def separating_threshold(within: Sequence[float], boundary: Sequence[float]) -> float:
    """Geometric mean of the largest within-task and smallest boundary distance.

    When every within-task distance is 0 the midpoint ``boundary / 2`` is used.
    """
    if not boundary:
        raise CalibrationError("no boundary round was observed")
    high = max(within) if within else 0.0
    low = min(boundary)
    if low <= high:
        msg = f"boundary distance {low:.6g} does not exceed within-task {high:.6g}"
        raise CalibrationError(msg)
    if high == 0:
        return low / 2.0
    return math.sqrt(high * low)


def drift_distances(
    metrics: Sequence[RoundMetrics], shared: bool = True
) -> Tuple[List[float], List[float]]:
    """Within-task and boundary drift distances of an oracle run.

    With ``shared`` boundaries one client above the threshold moves everybody, so a
    boundary round contributes only its largest distance. Otherwise every client
    that changed task contributes its own.
    """
    within: List[float] = []
    boundary: List[float] = []
    for m in metrics:
        if not m.drift:
            within.extend(m.diffs.values())
            continue
        movers = [k for k in m.drift_clients if k in m.diffs]
        if not movers or (not shared and len(movers) < len(m.drift_clients)):
            msg = f"round {m.round} changes task without a drift distance"
            raise CalibrationError(msg)
        if shared:
            boundary.append(max(m.diffs.values()))
            continue
        for k, diff in m.diffs.items():
            (boundary if k in m.drift_clients else within).append(diff)
    return within, boundary


def calibrate_drift_threshold(
    cfg: ExperimentConfig,
    calibration_rounds: Optional[int] = None,
    env: Optional[Environment] = None,
) -> float:
    """Drift threshold that reproduces the task boundaries of a clean run.

    A copy of the experiment without attacks runs in oracle mode and records the
    drift distance of every check. The threshold separates the distances of rounds
    that change task from all others. By default every task keeps its configured length,
    and a distance-mode run on the same clean data then switches at exactly the
    oracle's rounds. ``calibration_rounds`` (argument or configuration) cuts every
    task to that many rounds instead.
    """
    rounds = calibration_rounds or cfg.detection.calibration_rounds
    if rounds is not None and rounds < 2:
        raise CalibrationError("calibration needs at least two rounds per task")
    changes: Dict[str, object] = dict(
        method="sacfl", detection__mode="oracle", stream__attacks=[]
    )
    if rounds is not None:
        changes["stream__client_offsets"] = None
    clean_cfg = cfg.replace(**changes)
    if env is None or any(a != "none" for a in env.attacks):
        env = build_environment(clean_cfg)
    if env.num_tasks < 2:
        raise CalibrationError("calibration needs at least two tasks")
    if rounds is not None:
        env = env.truncated(env.num_tasks, rounds)
    sim = Simulation(clean_cfg, env, drift_threshold=math.inf)
    shared = clean_cfg.stream.client_offsets is None
    within, boundary = drift_distances(sim.run(), shared)
    threshold = separating_threshold(within, boundary)
    _logger.info(
        "calibrated drift threshold %.6g (within <= %.6g, boundary >= %.6g)",
        threshold, max(within, default=0.0), min(boundary),
    )
    return threshold


# ---- Layer sensitivity ----


@dataclass
class LayerDiagnosis:
    #: change of every layer against the previous round, one row per round
    per_round: List[np.ndarray]
    #: change of every layer against the model at the end of task 0 (None in task 0)
    since_first_task: List[Optional[np.ndarray]]
    boundaries: List[int]

    @property
    def final_change(self) -> np.ndarray:
        last = [row for row in self.since_first_task if row is not None]
        return last[-1] if last else np.zeros_like(self.per_round[-1])

    @property
    def degenerate(self) -> bool:
        return not any(np.any(row > 0) for row in self.per_round)

    @property
    def passed(self) -> bool:
        """True when the output layer moved the most since the first task"""
        change = self.final_change
        return not self.degenerate and int(np.argmax(change)) == change.size - 1


def diagnose_layers(cfg: ExperimentConfig) -> LayerDiagnosis:
    """Per-layer parameter change of a single client across task switches"""
    if cfg.stream.num_tasks < 2:
        raise ValidationError("the layer diagnostic needs at least two tasks")
    single = cfg.replace(
        num_clients=1,
        clients_per_round=None,
        method="fedavg",
        stream__attacks=[],
        stream__attack_clients=None,
        stream__client_offsets=None,
    )
    sim = Simulation(single, drift_threshold=math.inf)
    stream = sim.env.streams[0]
    first_end = stream.boundaries[0]
    per_round: List[np.ndarray] = []
    since: List[Optional[np.ndarray]] = []
    reference: Optional[Network] = None
    while sim.round < sim.env.total_rounds:
        if sim.round == first_end:
            reference = sim.server.global_model
        before = sim.server.global_model
        sim.step()
        after = sim.server.global_model
        per_round.append(layer_change_profile(before, after))
        if reference is None:
            since.append(None)
        else:
            since.append(layer_change_profile(reference, after))
    return LayerDiagnosis(per_round, since, list(stream.boundaries))
