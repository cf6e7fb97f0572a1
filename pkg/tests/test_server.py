import numpy as np
import pytest

from sacfl.data_gen import Dataset, ProxyPool
from sacfl.errors import (
    ContractViolation,
    PoolLookupError,
    ValidationError,
    ZeroBaselineAccuracy,
)
from sacfl.nn_core import (
    Activation,
    DenseLayer,
    Network,
    ParamVector,
    decoder_params,
    encoder_params,
    init_network,
)
from sacfl.server import (
    AggregationWeights,
    ServerState,
    coordinate_median,
    detect_adversarial,
    evaluate_accuracy,
    krum,
    record_baselines,
    robust_aggregate,
    spatial_aggregate,
    temporal_fuse,
    trimmed_mean,
)

LAYOUT = ((0, "bias", (2,)),)


def vec(*values):
    return ParamVector(np.array(values, dtype=float), LAYOUT)


def scalars(*values):
    return [ParamVector(np.array([v]), ((0, "bias", (1,)),)) for v in values]


@pytest.fixture
def identity_net():
    """Encoder and Decoder are both the 2x2 identity: the model predicts argmax x"""
    return Network(
        [
            DenseLayer(np.eye(2), np.zeros(2)),
            DenseLayer(np.eye(2), np.zeros(2), Activation.IDENTITY),
        ]
    )


@pytest.fixture
def swapped_encoder(identity_net):
    return encoder_params(identity_net).with_values(
        np.array([0.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    )


@pytest.fixture
def pools(identity_net):
    """Two clients with proxy data the identity model classifies perfectly"""
    separable = Dataset(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    tie = Dataset(np.array([[1.0, 1.0]]), np.array([0]), frozenset({0, 1}))
    decoder = decoder_params(identity_net)
    decoder_pool = {(0, 0): decoder, (0, 1): decoder, (1, 0): decoder}
    proxy_pool = ProxyPool()
    proxy_pool.add(0, 0, separable)
    proxy_pool.add(0, 1, tie)
    proxy_pool.add(1, 0, separable)
    return decoder_pool, proxy_pool


def test_aggregation_weights():
    weights = AggregationWeights.from_sizes([1, 3])
    assert weights.weights == (0.25, 0.75)
    with pytest.raises(ValidationError):
        AggregationWeights.from_sizes([1, 0])
    with pytest.raises(ValidationError):
        AggregationWeights((0.5, 0.6))


def test_spatial_aggregate_weights_by_size():
    merged = spatial_aggregate([vec(0, 0), vec(3, 6)], [1, 2])
    np.testing.assert_allclose(merged.values, [2.0, 4.0])
    assert merged.layout == vec(0, 0).layout


def test_spatial_aggregate_of_identical_updates_is_exact():
    same = vec(0.1, 0.7)
    merged = spatial_aggregate([same, same.copy(), same.copy()], [3, 1, 7])
    np.testing.assert_array_equal(merged.values, same.values)


def test_spatial_aggregate_validation():
    with pytest.raises(ValidationError):
        spatial_aggregate([], [])
    with pytest.raises(ValidationError):
        spatial_aggregate([vec(1, 2)], [1, 2])
    with pytest.raises(ValidationError):
        spatial_aggregate([vec(1, 2), scalars(1)[0]], [1, 1])


def test_temporal_fuse():
    spatial = vec(3, 3)
    assert temporal_fuse([], spatial, 0) is spatial
    fused = temporal_fuse([vec(0, 0), vec(0, 3)], spatial, 2)
    np.testing.assert_allclose(fused.values, [1.0, 2.0])
    with pytest.raises(ContractViolation):
        temporal_fuse([vec(0, 0)], spatial, 2)


def test_krum_picks_the_honest_cluster():
    updates = scalars(0.0, 0.1, -0.1, 10.0)
    selected, scores = krum(updates, 1)
    assert selected.values[0] == 0.0
    assert len(scores) == 4
    assert scores[3] == max(scores)
    with pytest.raises(ValidationError):
        krum(updates, 2)


def test_coordinate_median():
    merged = coordinate_median([vec(1, 5), vec(2, -1), vec(100, 0)])
    np.testing.assert_allclose(merged.values, [2.0, 0.0])


def test_trimmed_mean():
    merged = trimmed_mean(scalars(1.0, 2.0, 3.0, 100.0), 0.25)
    assert merged.values[0] == pytest.approx(2.5)
    untrimmed = trimmed_mean(scalars(1.0, 2.0, 3.0), 0.0)
    assert untrimmed.values[0] == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        trimmed_mean(scalars(1.0, 2.0), 0.5)


def random_updates(rng, n, size):
    layout = ((0, "bias", (size,)),)
    return [ParamVector(rng.standard_normal(size), layout) for _ in range(n)]


def random_instances(count=100):
    rng = np.random.default_rng(2024)
    for _ in range(count):
        n, size = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        yield rng, random_updates(rng, n, size)


def columns(updates):
    return [[u.values[j] for u in updates] for j in range(len(updates[0]))]


def test_spatial_aggregate_matches_the_direct_sum():
    for rng, updates in random_instances():
        sizes = [int(s) for s in rng.integers(1, 50, size=len(updates))]
        total = sum(sizes)
        expected = [
            sum(s * value for s, value in zip(sizes, column)) / total
            for column in columns(updates)
        ]
        merged = spatial_aggregate(updates, sizes)
        np.testing.assert_allclose(merged.values, expected, rtol=0, atol=1e-12)


def test_temporal_fuse_matches_the_direct_mean():
    for _, updates in random_instances():
        *pool, spatial = updates
        expected = [sum(column) / len(column) for column in columns(updates)]
        fused = temporal_fuse(pool, spatial, len(pool))
        np.testing.assert_allclose(fused.values, expected, rtol=0, atol=1e-12)
        assert temporal_fuse([], spatial, 0) == spatial


def test_coordinate_median_matches_sorting():
    for _, updates in random_instances():
        expected = []
        for column in columns(updates):
            ordered, mid = sorted(column), len(column) // 2
            if len(column) % 2:
                expected.append(ordered[mid])
            else:
                expected.append((ordered[mid - 1] + ordered[mid]) / 2)
        merged = coordinate_median(updates)
        np.testing.assert_allclose(merged.values, expected, rtol=0, atol=1e-12)


def test_trimmed_mean_matches_sorting():
    for rng, updates in random_instances():
        beta = float(rng.uniform(0.0, 0.5))
        k = int(beta * len(updates))
        expected = []
        for column in columns(updates):
            kept = sorted(column)[k : len(column) - k]
            expected.append(sum(kept) / len(kept))
        merged = trimmed_mean(updates, beta)
        np.testing.assert_allclose(merged.values, expected, rtol=0, atol=1e-12)


def krum_scores(updates, f):
    scores = []
    for i, u in enumerate(updates):
        distances = sorted(
            float(np.sum((u.values - v.values) ** 2))
            for j, v in enumerate(updates)
            if j != i
        )
        scores.append(sum(distances[: len(updates) - f - 2]))
    return scores


def test_krum_matches_the_exhaustive_scores():
    rng = np.random.default_rng(7)
    for _ in range(50):
        updates = random_updates(rng, 7, 5)
        expected = krum_scores(updates, 2)
        selected, scores = krum(updates, 2)
        np.testing.assert_allclose(scores, expected, rtol=1e-12)
        assert selected is updates[int(np.argmin(expected))]


def test_krum_never_selects_planted_outliers():
    rng = np.random.default_rng(8)
    for _ in range(50):
        honest = random_updates(rng, 5, 5)
        outliers = [
            vec.with_values(vec.values + shift)
            for vec, shift in zip(random_updates(rng, 2, 5), (100.0, -100.0))
        ]
        updates = honest + outliers
        order = rng.permutation(len(updates))
        shuffled = [updates[i] for i in order]
        selected, _ = krum(shuffled, 2)
        assert not any(selected is o for o in outliers)


def test_aggregation_ignores_the_order_of_updates():
    rng = np.random.default_rng(9)
    updates = random_updates(rng, 6, 4)
    sizes = [3, 1, 4, 1, 5, 9]
    order = rng.permutation(6)
    shuffled = [updates[i] for i in order]
    shuffled_sizes = [sizes[i] for i in order]
    np.testing.assert_allclose(
        spatial_aggregate(shuffled, shuffled_sizes).values,
        spatial_aggregate(updates, sizes).values,
        rtol=0,
        atol=1e-12,
    )
    assert coordinate_median(shuffled) == coordinate_median(updates)
    assert trimmed_mean(shuffled, 0.2) == trimmed_mean(updates, 0.2)
    assert krum(shuffled, 1)[0] is krum(updates, 1)[0]


def test_robust_aggregate_dispatch():
    updates = scalars(1.0, 2.0, 3.0, 4.0, 100.0)
    assert robust_aggregate("median", updates).values[0] == 3.0
    assert robust_aggregate("trimmed_mean", updates, trim_beta=0.2).values[0] == 3.0
    assert robust_aggregate("krum", updates, krum_f=1).values[0] in (2.0, 3.0)
    with pytest.raises(ValidationError):
        robust_aggregate("mean", updates)


def test_server_state_distributed_model():
    net = init_network([3, 4, 2], rng_seed=0)
    server = ServerState(net)
    assert server.distributed_model() is net
    zeros = encoder_params(net).with_values(np.zeros(len(encoder_params(net))))
    server.encoder_pool.append(zeros)
    fused = encoder_params(server.distributed_model())
    np.testing.assert_allclose(fused.values, encoder_params(net).values / 2)
    assert decoder_params(server.distributed_model()) == decoder_params(net)


def test_server_state_push_decoder():
    net = init_network([3, 4, 2], rng_seed=0)
    server = ServerState(net)
    server.push_decoder(0, 0, decoder_params(net))
    with pytest.raises(ContractViolation):
        server.push_decoder(0, 0, decoder_params(net))


def test_evaluate_accuracy(identity_net, swapped_encoder, pools):
    decoder_pool, proxy_pool = pools
    data = proxy_pool[(0, 0)]
    decoder = decoder_pool[(0, 0)]
    encoder = encoder_params(identity_net)
    assert evaluate_accuracy(encoder, decoder, identity_net, data) == 1.0
    assert evaluate_accuracy(swapped_encoder, decoder, identity_net, data) == 0.0


def test_record_baselines(identity_net, pools):
    decoder_pool, proxy_pool = pools
    encoder = encoder_params(identity_net)
    baselines = record_baselines(encoder, decoder_pool, proxy_pool, identity_net)
    assert baselines == {(0, 0): 1.0, (0, 1): 1.0, (1, 0): 1.0}
    only = record_baselines(
        encoder, decoder_pool, proxy_pool, identity_net, keys=[(1, 0)]
    )
    assert only == {(1, 0): 1.0}
    with pytest.raises(PoolLookupError):
        record_baselines(encoder, decoder_pool, proxy_pool, identity_net, [(2, 0)])


def test_detect_adversarial_benign_encoder(identity_net, pools):
    decoder_pool, proxy_pool = pools
    encoder = encoder_params(identity_net)
    baselines = record_baselines(encoder, decoder_pool, proxy_pool, identity_net)
    report = detect_adversarial(
        encoder, decoder_pool, proxy_pool, baselines, 1, identity_net
    )
    assert report.degrade == 0.0
    assert not report.adversarial
    assert report.threshold == 0.40


def test_detect_adversarial_flags_a_damaging_encoder(
    identity_net, swapped_encoder, pools
):
    decoder_pool, proxy_pool = pools
    baselines = record_baselines(
        encoder_params(identity_net), decoder_pool, proxy_pool, identity_net
    )
    report = detect_adversarial(
        swapped_encoder, decoder_pool, proxy_pool, baselines, 1, identity_net
    )
    assert report.degrade == 1.0
    assert report.adversarial
    assert report.per_client == {0: 1.0, 1: 1.0}


def test_detect_adversarial_averages_per_client_first(
    identity_net, swapped_encoder, pools
):
    decoder_pool, proxy_pool = pools
    baselines = record_baselines(
        encoder_params(identity_net), decoder_pool, proxy_pool, identity_net
    )
    report = detect_adversarial(
        swapped_encoder, decoder_pool, proxy_pool, baselines, 2, identity_net
    )
    # client 0 loses task 0 only, client 1 its single task
    assert report.per_client == {0: 0.5, 1: 1.0}
    assert report.degrade == pytest.approx(0.75)


def test_detect_adversarial_requires_baselines(identity_net, pools):
    decoder_pool, proxy_pool = pools
    encoder = encoder_params(identity_net)
    with pytest.raises(PoolLookupError):
        detect_adversarial(encoder, decoder_pool, proxy_pool, {}, 1, identity_net)
    with pytest.raises(ValidationError):
        detect_adversarial(encoder, decoder_pool, proxy_pool, {}, 0, identity_net)


def test_detect_adversarial_skips_zero_baselines(identity_net, swapped_encoder, pools):
    decoder_pool, proxy_pool = pools
    baselines = {(0, 0): 0.0, (1, 0): 1.0}
    with pytest.warns(ZeroBaselineAccuracy):
        report = detect_adversarial(
            swapped_encoder, decoder_pool, proxy_pool, baselines, 1, identity_net
        )
    assert report.per_client == {1: 1.0}
    assert report.degrade == 1.0


def test_detect_adversarial_without_history(identity_net):
    encoder = encoder_params(identity_net)
    report = detect_adversarial(encoder, {}, ProxyPool(), {}, 3, identity_net)
    assert report.degrade == 0.0
    assert not report.adversarial
