"""Experiment configuration.

Experiments are described by UTF-8 JSON documents such as::

    {
        "seed": 7,
        "num_clients": 10,
        "method": "sacfl",
        "stream": {"num_tasks": 5, "iterations": 10},
        "detection": {"drift_threshold": "auto"}
    }

Every key is optional, omitted keys take the defaults of the dataclasses below.
:class:`ConfigLoader` reads such documents the same way a parser reads ``.cfg``
files (:meth:`~ConfigLoader.read`, :meth:`~ConfigLoader.read_file`,
:meth:`~ConfigLoader.read_string`), applies ``key.sub=value`` overrides and validates
the result. All problems found are reported together in one :class:`ConfigError`,
each one tagged with the line of the offending key.
"""
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
    cast,
    get_args,
    get_origin,
    get_type_hints,
)

from .data_gen import NoiseKind, NoiseSpec
from .errors import SacFLError

__all__ = [
    "ConfigError",
    "ConfigLoader",
    "ExperimentConfig",
    "StreamConfig",
    "BackdoorConfig",
    "ModelConfig",
    "OptimizerConfig",
    "DetectionConfig",
    "DefenseConfig",
    "METHODS",
    "apply_overrides",
]

PathLike = Union[str, "os.PathLike[str]"]

METHODS = ("sacfl", "fedavg", "fedprox", "krum", "median", "trimmed_mean")
STREAM_KINDS = ("class_incremental", "domain_incremental")
ATTACKS = ("none", "label_flip", "backdoor")
DETECTION_MODES = ("distance", "oracle", "off")
METRICS = ("manhattan", "euclidean", "cosine")
AGGREGATORS = ("krum", "median", "trimmed_mean")


class ConfigError(SacFLError):
    """Invalid experiment configuration {source}"""

    def __init__(self, source: str = "<string>"):
        self.source = source
        self.errors: List[Tuple[int, str]] = []
        Exception.__init__(self, self._message())

    def _message(self) -> str:
        head = f"Invalid experiment configuration {self.source}"
        lines = (f"\n\t[line {n:2d}]: {msg}" for n, msg in self.errors)
        return head + "".join(lines)

    def append(self, lineno: int, msg: str):
        self.errors.append((lineno, msg))
        self.args = (self._message(),)

    def __bool__(self) -> bool:
        return bool(self.errors)


# ---- Configuration tree ----


@dataclass(frozen=True)
class BackdoorConfig:
    dims: Tuple[int, ...] = (0, 1)
    #: value written into the trigger dims, default ``3 * stream.spread``
    value: Optional[float] = None
    target: int = 0
    fraction: float = 0.5


@dataclass(frozen=True)
class StreamConfig:
    kind: str = "class_incremental"
    num_tasks: int = 5
    iterations: Union[int, Tuple[int, ...]] = 10
    num_classes: int = 10
    dim: int = 32
    per_class: int = 200
    test_per_class: int = 50
    public_per_class: int = 40
    separation: float = 6.0
    spread: float = 1.0
    noise: Tuple[NoiseSpec, ...] = ()
    attacks: Tuple[str, ...] = ()
    attack_clients: Optional[Tuple[int, ...]] = None
    client_offsets: Optional[Tuple[int, ...]] = None
    #: "global" draws flipped labels from every class, "task" from the task's own
    flip_space: str = "task"
    backdoor: BackdoorConfig = field(default_factory=BackdoorConfig)
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None

    @property
    def iterations_per_task(self) -> List[int]:
        if isinstance(self.iterations, int):
            return [self.iterations] * self.num_tasks
        return list(self.iterations)

    @property
    def total_rounds(self) -> int:
        return sum(self.iterations_per_task)

    @property
    def attack_schedule(self) -> List[str]:
        return list(self.attacks) if self.attacks else ["none"] * self.num_tasks


@dataclass(frozen=True)
class ModelConfig:
    hidden: Tuple[int, ...] = (64, 32)
    #: first Decoder layer, default: only the output layer
    split_index: Optional[int] = None


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 0.05
    batch_size: int = 32
    local_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class DetectionConfig:
    mode: str = "distance"
    metric: str = "manhattan"
    #: positive number or "auto" to calibrate before the run
    drift_threshold: Union[float, str] = "auto"
    #: Encoder the first epoch is compared with, "previous" or "received"
    reference: str = "previous"
    #: task rounds without a drift check after a task starts
    warmup_rounds: int = 2
    #: rounds per task of the calibration run, default: the configured lengths
    calibration_rounds: Optional[int] = None
    probe_size: int = 32
    degrade_threshold: float = 0.40
    proxy_size: int = 20


@dataclass(frozen=True)
class DefenseConfig:
    enabled: bool = True
    alpha: float = 0.5
    aggregator: str = "krum"
    krum_f: int = 1
    trim_beta: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_clients: int = 10
    #: participants sampled per round, default: every client
    clients_per_round: Optional[int] = None
    method: str = "sacfl"
    prox_mu: float = 0.01
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)

    @property
    def participants(self) -> int:
        if self.clients_per_round is None:
            return self.num_clients
        return self.clients_per_round

    @property
    def widths(self) -> List[int]:
        return [self.stream.dim, *self.model.hidden, self.stream.num_classes]

    @property
    def split_index(self) -> int:
        split = self.model.split_index
        return len(self.model.hidden) if split is None else split

    @classmethod
    def from_dict(
        cls, raw: Dict[str, Any], source: str = "<dict>"
    ) -> "ExperimentConfig":
        return ConfigLoader().load(raw, source)

    def to_dict(self) -> Dict[str, Any]:
        return cast(Dict[str, Any], _plain(self))

    def content_hash(self) -> str:
        """SHA-256 of the canonical JSON snapshot"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level fields or dotted ``section__field`` keys changed"""
        overrides = [
            f"{key.replace('__', '.')}={json.dumps(_plain(value))}"
            for key, value in changes.items()
        ]
        raw = apply_overrides(self.to_dict(), overrides)
        return ConfigLoader().load(raw, "<replace>")

    def problems(self) -> List[Tuple[str, str]]:
        """Every range or consistency problem, as ``(dotted key, message)`` pairs"""
        out: List[Tuple[str, str]] = []

        def check(ok: bool, key: str, msg: str):
            if not ok:
                out.append((key, msg))

        def one_of(value: str, key: str, choices: Sequence[str]):
            check(value in choices, key, f"must be one of {', '.join(choices)}")

        k = self.num_clients
        check(k >= 1, "num_clients", "must be >= 1")
        if self.clients_per_round is not None:
            ok = 1 <= self.clients_per_round <= k
            check(ok, "clients_per_round", f"must lie in [1, {k}]")
        one_of(self.method, "method", METHODS)
        check(self.prox_mu >= 0, "prox_mu", "must be >= 0")

        s = self.stream
        one_of(s.kind, "stream.kind", STREAM_KINDS)
        check(s.num_tasks >= 1, "stream.num_tasks", "must be >= 1")
        its = s.iterations_per_task
        check(len(its) == s.num_tasks, "stream.iterations", "needs one entry per task")
        check(all(i >= 1 for i in its), "stream.iterations", "must be >= 1")
        check(s.num_classes >= 2, "stream.num_classes", "must be >= 2")
        if s.kind == "class_incremental":
            ok = s.num_tasks <= s.num_classes
            check(ok, "stream.num_tasks", "exceeds num_classes")
        else:
            ok = len(s.noise) == s.num_tasks
            check(ok, "stream.noise", "needs one entry per task")
        check(s.dim >= 1, "stream.dim", "must be >= 1")
        check(s.per_class >= k, "stream.per_class", "needs one sample per client")
        check(s.test_per_class >= 1, "stream.test_per_class", "must be >= 1")
        check(s.public_per_class >= 1, "stream.public_per_class", "must be >= 1")
        check(s.separation > 0, "stream.separation", "must be > 0")
        check(s.spread >= 0, "stream.spread", "must be >= 0")
        if s.attacks:
            ok = len(s.attacks) == s.num_tasks
            check(ok, "stream.attacks", "needs one entry per task")
            for attack in s.attacks:
                one_of(attack, "stream.attacks", ATTACKS)
            check(s.attacks[0] == "none", "stream.attacks", "task 0 must be benign")
        if s.attack_clients is not None:
            ok = all(0 <= c < k for c in s.attack_clients)
            check(ok, "stream.attack_clients", f"ids must lie in [0, {k})")
        if s.client_offsets is not None:
            ok = len(s.client_offsets) == k
            check(ok, "stream.client_offsets", "needs one entry per client")
        one_of(s.flip_space, "stream.flip_space", ("global", "task"))
        b = s.backdoor
        check(0 < b.fraction <= 1, "stream.backdoor.fraction", "must lie in (0, 1]")
        ok = 0 <= b.target < s.num_classes
        check(ok, "stream.backdoor.target", "is not a class")
        if s.idx_images is None:
            ok = bool(b.dims) and all(0 <= x < s.dim for x in b.dims)
            check(ok, "stream.backdoor.dims", f"must lie in [0, {s.dim})")
        ok = (s.idx_images is None) == (s.idx_labels is None)
        check(ok, "stream.idx_images", "idx_images and idx_labels go together")

        m = self.model
        ok = bool(m.hidden) and all(h >= 1 for h in m.hidden)
        check(ok, "model.hidden", "needs positive widths")
        ok = 1 <= self.split_index <= len(m.hidden)
        check(ok, "model.split_index", f"must lie in [1, {len(m.hidden)}]")

        o = self.optimizer
        one_of(o.kind, "optimizer.kind", ("sgd", "adam"))
        check(o.learning_rate >= 0, "optimizer.learning_rate", "must be >= 0")
        check(o.batch_size >= 1, "optimizer.batch_size", "must be >= 1")
        check(o.local_epochs >= 1, "optimizer.local_epochs", "must be >= 1")
        check(0 <= o.beta1 < 1, "optimizer.beta1", "must lie in [0, 1)")
        check(0 <= o.beta2 < 1, "optimizer.beta2", "must lie in [0, 1)")
        check(o.eps > 0, "optimizer.eps", "must be > 0")

        d = self.detection
        one_of(d.mode, "detection.mode", DETECTION_MODES)
        one_of(d.metric, "detection.metric", METRICS)
        if isinstance(d.drift_threshold, str):
            ok = d.drift_threshold == "auto"
            check(ok, "detection.drift_threshold", "must be a number or 'auto'")
        else:
            check(d.drift_threshold > 0, "detection.drift_threshold", "must be > 0")
        one_of(d.reference, "detection.reference", ("previous", "received"))
        check(d.warmup_rounds >= 1, "detection.warmup_rounds", "must be >= 1")
        rounds = d.calibration_rounds
        ok = rounds is None or rounds >= 2
        check(ok, "detection.calibration_rounds", "must be >= 2")
        check(d.probe_size >= 1, "detection.probe_size", "must be >= 1")
        check(d.degrade_threshold >= 0, "detection.degrade_threshold", "must be >= 0")
        check(d.proxy_size >= 1, "detection.proxy_size", "must be >= 1")

        f = self.defense
        check(0 <= f.alpha <= 1, "defense.alpha", "must lie in [0, 1]")
        one_of(f.aggregator, "defense.aggregator", AGGREGATORS)
        check(f.krum_f >= 0, "defense.krum_f", "must be >= 0")
        check(0 <= f.trim_beta < 0.5, "defense.trim_beta", "must lie in [0, 0.5)")
        defends = self.method == "sacfl" and f.enabled
        if self.method == "krum" or (defends and f.aggregator == "krum"):
            ok = self.participants >= f.krum_f + 3
            check(ok, "defense.krum_f", "krum needs clients_per_round >= krum_f + 3")
        return out


def _plain(obj: Any) -> Any:
    if isinstance(obj, NoiseSpec):
        return {"kind": obj.kind.value, "sigma": obj.sigma}
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


# ---- Overrides ----


def apply_overrides(raw: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Return a copy of ``raw`` with every ``a.b=value`` override applied.

    ``value`` is parsed as JSON and kept as a plain string when that fails.
    """
    result = json.loads(json.dumps(raw))
    err = ConfigError("<overrides>")
    for n, override in enumerate(overrides, 1):
        key, sep, text = override.partition("=")
        parts = key.strip().split(".")
        if not sep or not all(parts):
            err.append(n, f"malformed override {override!r}, expected key.sub=value")
            continue
        try:
            value = json.loads(text)
        except ValueError:
            value = text
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                err.append(n, f"{'.'.join(parts)}: {part!r} is not a section")
                break
            node = child
        else:
            node[parts[-1]] = value
    if err:
        raise err
    return result


# ---- Loader ----


class _Mismatch(Exception):
    pass


class ConfigLoader:
    """Turn JSON experiment descriptions into validated :class:`ExperimentConfig`

    Args:
        overrides: ``key.sub=value`` strings applied to every document read
    """

    def __init__(self, overrides: Sequence[str] = ()):
        self._overrides = list(overrides)

    def read(self, filename: PathLike, encoding: str = "utf-8") -> ExperimentConfig:
        """Read and validate a configuration file.

        Args:
            filename: path to the JSON file
            encoding: encoding of the file, default UTF-8
        """
        with open(filename, encoding=encoding) as fp:
            return self.read_file(fp, str(filename))

    def read_file(
        self, f: Iterable[str], source: Optional[str] = None
    ) -> ExperimentConfig:
        """Like :meth:`read` but the argument must be a file-like object"""
        if isinstance(f, str):
            raise RuntimeError("f must be a file-like object, not string!")
        if source is None:
            try:
                source = cast(str, cast(io.FileIO, f).name)
            except AttributeError:
                source = "<???>"
        return self.read_string("".join(f), source)

    def read_string(self, string: str, source: str = "<string>") -> ExperimentConfig:
        """Read configuration from a given string"""
        try:
            raw = json.loads(string)
        except json.JSONDecodeError as ex:
            err = ConfigError(source)
            err.append(ex.lineno, ex.msg)
            raise err from None
        if not isinstance(raw, dict):
            err = ConfigError(source)
            err.append(1, "the document must be a JSON object")
            raise err
        return self.load(raw, source, string.splitlines())

    def load(
        self, raw: Dict[str, Any], source: str = "<dict>", lines: Sequence[str] = ()
    ) -> ExperimentConfig:
        """Validate an already decoded document"""
        raw = apply_overrides(raw, self._overrides)
        err = ConfigError(source)
        problems: List[Tuple[str, str]] = []
        cfg = _build(ExperimentConfig, raw, "", problems)
        if not problems:
            problems = cfg.problems()
        for key, msg in problems:
            err.append(_locate(lines, key), f"{key}: {msg}")
        if err:
            raise err
        return cfg


def _build(cls, raw: Any, prefix: str, problems: List[Tuple[str, str]]):
    if not isinstance(raw, dict):
        problems.append((prefix.rstrip("."), "must be a JSON object"))
        return cls()
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            problems.append((prefix + key, "unknown key"))
    values = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        path = prefix + f.name
        try:
            values[f.name] = _coerce(raw[f.name], hints[f.name], path, problems)
        except _Mismatch as ex:
            problems.append((path, str(ex)))
    return cls(**values)


def _coerce(value: Any, tp: Any, path: str, problems: List[Tuple[str, str]]) -> Any:
    if is_dataclass(tp):
        return _build(tp, value, path + ".", problems)
    origin = get_origin(tp)
    if origin is Union:
        args = get_args(tp)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, path, problems)
            except _Mismatch:
                pass
        raise _Mismatch(f"unexpected value {value!r}")
    if origin is tuple:
        if not isinstance(value, list):
            raise _Mismatch(f"expected a list, got {value!r}")
        item = get_args(tp)[0]
        return tuple(_coerce(v, item, path, problems) for v in value)
    if tp is NoiseSpec:
        if not isinstance(value, dict) or set(value) - {"kind", "sigma"}:
            raise _Mismatch(f"expected {{'kind': ..., 'sigma': ...}}, got {value!r}")
        kind = value.get("kind", "identity")
        if kind not in {k.value for k in NoiseKind}:
            raise _Mismatch(f"unknown noise kind {kind!r}")
        sigma = _coerce(value.get("sigma", 0.0), float, path, problems)
        if sigma < 0:
            raise _Mismatch("noise sigma must be >= 0")
        return NoiseSpec(NoiseKind(kind), sigma)
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise _Mismatch(f"expected true or false, got {value!r}")
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise _Mismatch(f"expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise _Mismatch(f"expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise _Mismatch(f"expected a string, got {value!r}")
    raise _Mismatch(f"unsupported value {value!r}")  # pragma: no cover


def _locate(lines: Sequence[str], dotted: str) -> int:
    """1-based line of the (last found part of the) dotted key, 0 when unknown"""
    found, start = 0, 0
    for part in dotted.split("."):
        needle = f'"{part}"'
        for idx in range(start, len(lines)):
            text = lines[idx]
            pos = text.find(needle)
            if pos >= 0 and text[pos + len(needle) :].lstrip().startswith(":"):
                found, start = idx + 1, idx
                break
        else:
            break
    return found

