"""End-to-end runs, deselected by the default tox environment"""
import math

import pytest

from sacfl import cli
from sacfl.config import ExperimentConfig
from sacfl.orchestrator import Simulation


def three_tasks(cfg, **changes):
    return cfg.replace(stream__num_tasks=3, **changes)


def domain_stream(cfg, attacks, **changes):
    """Domain-incremental stream trained hard enough for poisoning to show"""
    noise = [{"kind": "identity"}]
    noise += [{"kind": "gaussian", "sigma": 0.3}] * (len(attacks) - 1)
    return cfg.replace(
        stream__kind="domain_incremental",
        stream__num_tasks=len(attacks),
        stream__noise=noise,
        stream__attacks=attacks,
        optimizer__learning_rate=0.1,
        optimizer__batch_size=4,
        optimizer__local_epochs=1,
        defense__enabled=True,
        **changes,
    )


def clean_degrade(cfg):
    """Degradation the clean version of ``cfg`` shows at its first boundary"""
    metrics = Simulation(cfg.replace(stream__attacks=[])).run()
    return metrics[3].degrade


def test_system_metrics_are_byte_identical(tiny_experiment_path, tmp_path):
    for name in ("first", "second"):
        assert cli.cmd_run(tiny_experiment_path, out_dir=tmp_path / name) == 0
    first = (tmp_path / "first" / "metrics.csv").read_bytes()
    assert first == (tmp_path / "second" / "metrics.csv").read_bytes()


def test_system_threads_do_not_change_metrics(
    tiny_experiment_path, tmp_path, monkeypatch
):
    assert cli.cmd_run(tiny_experiment_path, out_dir=tmp_path / "serial") == 0
    monkeypatch.setenv("SACFL_THREADS", "3")
    assert cli.cmd_run(tiny_experiment_path, out_dir=tmp_path / "threaded") == 0
    serial = (tmp_path / "serial" / "metrics.csv").read_bytes()
    assert serial == (tmp_path / "threaded" / "metrics.csv").read_bytes()


def test_system_pools_grow_with_every_task(tiny_cfg):
    sim = Simulation(three_tasks(tiny_cfg))
    metrics = sim.run()
    assert [m.round for m in metrics if m.drift] == [3, 6]
    assert len(sim.server.encoder_pool) == 2
    assert len(sim.server.decoder_pool) == 3 * 2
    assert all(sorted(c.decoder_pool) == [0, 1] for c in sim.clients)
    assert list(metrics[-1].accuracies) == [0, 1, 2]
    report = sim.storage()
    assert report.decoder_pool_bytes == report.client_pool_bytes
    assert report.ratio < 1.0


def test_system_poisoned_task_never_reaches_the_pools(tiny_cfg):
    cfg = domain_stream(tiny_cfg, ["none", "label_flip", "none"])
    threshold = max(clean_degrade(cfg), 0.0) + 0.05
    sim = Simulation(cfg.replace(detection__degrade_threshold=threshold))
    metrics = sim.run()
    assert len(metrics) == 9
    assert metrics[3].attack
    assert list(metrics[-1].accuracies) == [0, 2]
    assert all(m.degrade is None for m in metrics if not m.drift)
    assert [m.aggregator for m in metrics[:6]] == ["weighted"] * 3 + ["median"] * 3
    flagged = sim.server.flagged_tasks
    assert 1 in flagged and 0 not in flagged
    assert len(sim.server.encoder_pool) == 1
    assert sorted(sim.server.decoder_pool) == [(0, 0), (1, 0), (2, 0)]
    for task in flagged:
        assert all(task not in c.decoder_pool for c in sim.clients)
        assert all(key[1] != task for key in sim.server.proxy_pool.keys())


def test_system_label_flip_degrades_more_than_a_clean_task(tiny_cfg):
    cfg = domain_stream(tiny_cfg, ["none", "label_flip"])
    clean = clean_degrade(cfg)
    threshold = max(clean, 0.0) + 0.05
    metrics = Simulation(cfg.replace(detection__degrade_threshold=threshold)).run()
    assert metrics[3].degrade > threshold > clean
    assert [m.attack for m in metrics] == [False] * 3 + [True] + [False] * 2
    assert [m.aggregator for m in metrics] == ["weighted"] * 3 + ["median"] * 3
    assert list(metrics[-1].accuracies) == [0]


def distance_mode(cfg, **changes):
    return cfg.replace(
        detection__mode="distance", detection__drift_threshold="auto", **changes
    )


@pytest.mark.parametrize("seed", [3, 11])
def test_system_distance_detection_finds_every_boundary(tiny_cfg, seed):
    cfg = distance_mode(three_tasks(tiny_cfg), seed=seed, stream__iterations=5)
    sim = Simulation(cfg)
    metrics = sim.run()
    assert math.isfinite(sim.drift_threshold)
    assert [m.round for m in metrics if m.drift] == [5, 10]
    assert all(m.drift_clients == (0, 1, 2) for m in metrics if m.drift)
    assert len(sim.server.encoder_pool) == 2


def test_system_distance_detection_with_staggered_boundaries(tiny_cfg):
    cfg = distance_mode(
        three_tasks(tiny_cfg), stream__iterations=5, stream__client_offsets=[0, 1, 0]
    )
    sim = Simulation(cfg)
    metrics = sim.run()
    drifts = [(m.round, m.drift_clients) for m in metrics if m.drift]
    assert drifts == [(5, (0, 2)), (6, (1,)), (10, (0, 2)), (11, (1,))]
    assert all(c.current_task == 2 for c in sim.clients)


def test_system_distance_detection_on_the_default_stream():
    cfg = ExperimentConfig.from_dict(
        {"seed": 0, "stream": {"dim": 16}, "model": {"hidden": [32, 32]}}
    )
    sim = Simulation(cfg)
    metrics = sim.run()
    assert math.isfinite(sim.drift_threshold)
    assert [m.round for m in metrics if m.drift] == [10, 20, 30, 40]


def test_system_domain_incremental_run(tiny_cfg):
    cfg = tiny_cfg.replace(
        stream__kind="domain_incremental",
        stream__noise=[{"kind": "identity"}, {"kind": "gaussian", "sigma": 0.5}],
    )
    sim = Simulation(cfg)
    metrics = sim.run()
    assert [m.round for m in metrics if m.drift] == [3]
    assert list(metrics[-1].accuracies) == [0, 1]
    assert all(math.isfinite(m.avg_accuracy) for m in metrics)


def test_system_compare_methods(tiny_experiment_path, tmp_path):
    methods = ["sacfl", "fedavg", "fedprox", "median"]
    code = cli.cmd_compare(tiny_experiment_path, methods, out_dir=tmp_path)
    assert code == 0
    for method in methods:
        assert (tmp_path / method / "summary.json").exists()
    assert (tmp_path / "curves.csv").read_text().splitlines()[0] == ",".join(
        ["round", *methods]
    )
