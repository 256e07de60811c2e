from __future__ import annotations

from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsir.datagen import (
    ClientDataset,
    DataGenConfig,
    SampleSet,
    cluster_means,
    designate_clean_clients,
    generate_synthetic,
    inject_symmetric_noise,
    load_features,
    make_federated_data,
    partition_dirichlet,
    save_features,
    split_holdout,
)


def _multiset(rows) -> Counter:
    return Counter((tuple(np.round(x, 12)), int(t)) for x, t in rows)


def _pairs(s: SampleSet):
    return zip(s.inputs, s.true)


# ---------------------------------------------------------------- generate_synthetic


@pytest.mark.oracle
def test_two_well_separated_classes_pairwise_distances():
    cfg = DataGenConfig(
        num_clients=1, clean_client_count=1, num_classes=2, samples_total=4, input_dim=8, class_separation=10.0, rng_seed=3
    )
    s = generate_synthetic(cfg)
    d = np.linalg.norm(s.inputs[:, None] - s.inputs[None, :], axis=2)
    same = [d[i, j] for i in range(4) for j in range(i + 1, 4) if s.true[i] == s.true[j]]
    cross = [d[i, j] for i in range(4) for j in range(i + 1, 4) if s.true[i] != s.true[j]]
    assert len(same) == 2 and len(cross) == 4
    assert max(same) < min(cross)


def test_one_sample_per_class():
    cfg = DataGenConfig(num_classes=7, samples_total=7, num_clients=1, clean_client_count=1)
    s = generate_synthetic(cfg)
    assert np.array_equal(np.sort(s.true), np.arange(7))
    assert np.array_equal(s.observed, s.true)


def test_generation_is_deterministic():
    cfg = DataGenConfig(rng_seed=11, samples_total=200)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.true, b.true)


def test_cluster_means_respect_separation():
    cfg = DataGenConfig(num_classes=6, input_dim=5, class_separation=4.0, rng_seed=2)
    m = cluster_means(cfg)
    d = np.linalg.norm(m[:, None] - m[None, :], axis=2)[~np.eye(6, dtype=bool)]
    assert d.min() == pytest.approx(4.0, abs=1e-12)


def test_rejects_more_classes_than_samples():
    with pytest.raises(ValueError):
        generate_synthetic(DataGenConfig(num_classes=10, samples_total=5, num_clients=1, clean_client_count=0))


def test_rejects_zero_input_dim():
    with pytest.raises(ValueError):
        generate_synthetic(DataGenConfig(input_dim=0))


@pytest.mark.parametrize(
    "field,value",
    [("noise_rate", 1.5), ("noise_rate", -0.1), ("clean_client_count", 11), ("dirichlet_concentration", 0.0)],
)
def test_config_validation(field, value):
    with pytest.raises(ValueError, match=field):
        DataGenConfig(**{field: value})


def test_sample_set_validates_labels():
    with pytest.raises(ValueError):
        SampleSet(np.zeros((2, 3)), np.array([0, -1]), np.array([0, 0]))
    with pytest.raises(ValueError):
        SampleSet(np.array([[np.nan, 0.0]]), np.array([0]), np.array([0]))


# ---------------------------------------------------------------- partition_dirichlet


def test_single_client_holds_everything():
    cfg = DataGenConfig(num_clients=1, clean_client_count=1, samples_total=300)
    s = generate_synthetic(cfg)
    (only,) = partition_dirichlet(s, cfg)
    assert len(only) == 300
    assert _multiset(_pairs(only)) == _multiset(_pairs(s))


def test_empty_clients_are_repaired():
    cfg = DataGenConfig(num_clients=20, num_classes=2, samples_total=25, dirichlet_concentration=0.05, clean_client_count=0)
    clients = partition_dirichlet(generate_synthetic(cfg), cfg)
    assert all(len(c) >= 1 for c in clients)
    assert sum(len(c) for c in clients) == 25


def _entropy_gap(cfg: DataGenConfig, seeds) -> float:
    gaps = []
    for seed in seeds:
        c = replace(cfg, rng_seed=seed)
        for ds in partition_dirichlet(generate_synthetic(c), c):
            p = ds.class_counts(c.num_classes) / len(ds)
            nz = p[p > 0]
            gaps.append(np.log(c.num_classes) + np.sum(nz * np.log(nz)))
    return float(np.mean(gaps))


@pytest.mark.oracle
def test_lower_concentration_gives_more_skewed_clients():
    base = DataGenConfig(num_clients=10, num_classes=10, samples_total=2000, input_dim=4, clean_client_count=0)
    skewed = _entropy_gap(replace(base, dirichlet_concentration=0.1), range(20))
    mild = _entropy_gap(replace(base, dirichlet_concentration=2.0), range(20))
    assert skewed > mild


# ---------------------------------------------------------------- inject_symmetric_noise


def _clients(**kw):
    cfg = DataGenConfig(**{"samples_total": 600, "input_dim": 4, **kw})
    return partition_dirichlet(generate_synthetic(cfg), cfg), cfg


def test_zero_noise_keeps_all_labels():
    clients, cfg = _clients(noise_rate=0.0)
    for ds in inject_symmetric_noise(clients, cfg):
        assert np.array_equal(ds.observed, ds.true)


def test_full_noise_two_classes_flips_every_noisy_label():
    clients, cfg = _clients(noise_rate=1.0, num_classes=2)
    for ds in inject_symmetric_noise(clients, cfg):
        if ds.is_noisy_ground_truth:
            assert np.array_equal(ds.observed, 1 - ds.true)
        else:
            assert np.array_equal(ds.observed, ds.true)


@pytest.mark.oracle
def test_empirical_corruption_rate_concentrates():
    cfg = DataGenConfig(num_clients=1, clean_client_count=0, samples_total=10_000, input_dim=2, noise_rate=0.6, rng_seed=4)
    (ds,) = inject_symmetric_noise(partition_dirichlet(generate_synthetic(cfg), cfg), cfg)
    assert ds.is_noisy_ground_truth
    assert 0.58 <= ds.noise_rate <= 0.62


def test_clean_designation_count_and_independence_from_rate():
    a = designate_clean_clients(DataGenConfig(rng_seed=9, noise_rate=0.2))
    b = designate_clean_clients(DataGenConfig(rng_seed=9, noise_rate=0.8))
    assert len(a) == 3 and np.array_equal(a, b)


def test_per_client_override():
    clients, cfg = _clients(noise_rate=0.0, rng_seed=1)
    noisy = [k for k in range(cfg.num_clients) if k not in set(designate_clean_clients(cfg))]
    cfg = replace(cfg, client_noise_rates={noisy[0]: 1.0})
    out = inject_symmetric_noise(clients, cfg)
    assert out[noisy[0]].noise_rate == 1.0
    assert all(out[k].noise_rate == 0.0 for k in noisy[1:])


def test_make_federated_data_test_split():
    cfg = DataGenConfig(samples_total=500, input_dim=4, rng_seed=5)
    clients, test = make_federated_data(cfg, 0.1)
    assert len(test) == 50 and np.array_equal(test.observed, test.true)
    assert sum(len(c) for c in clients) == 500


# ---------------------------------------------------------------- feature files


def test_feature_file_round_trip(tmp_path):
    cfg = DataGenConfig(samples_total=40, input_dim=3, num_classes=4, rng_seed=8)
    s = generate_synthetic(cfg)
    path = tmp_path / "feat.txt"
    save_features(s, 4, path)
    loaded, c = load_features(path)
    assert c == 4
    assert np.array_equal(loaded.inputs, s.inputs) and np.array_equal(loaded.true, s.true)


def test_feature_file_header_mismatch(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("3 2 2\n0.0 1.0 0\n")
    with pytest.raises(ValueError):
        load_features(path)


def test_split_holdout_partitions():
    s = generate_synthetic(DataGenConfig(samples_total=100, input_dim=2))
    train, test = split_holdout(s, 0.2, seed=1)
    assert len(train) == 80 and len(test) == 20
    assert _multiset(_pairs(train)) + _multiset(_pairs(test)) == _multiset(_pairs(s))


# ---------------------------------------------------------------- invariants

configs = st.builds(
    DataGenConfig,
    num_clients=st.integers(1, 8),
    num_classes=st.integers(2, 6),
    samples_total=st.integers(20, 120),
    input_dim=st.integers(1, 5),
    dirichlet_concentration=st.floats(0.05, 5.0),
    noise_rate=st.floats(0.0, 1.0),
    clean_client_count=st.just(0),
    class_separation=st.floats(0.0, 8.0),
    rng_seed=st.integers(0, 2**31 - 1),
).map(lambda c: replace(c, clean_client_count=min(c.num_clients, c.rng_seed % 3)))


@pytest.mark.invariant
@given(configs)
def test_partition_recovers_generated_multiset(cfg):
    s = generate_synthetic(cfg)
    clients = partition_dirichlet(s, cfg)
    assert len(clients) == cfg.num_clients
    assert all(len(c) >= 1 for c in clients)
    merged = Counter()
    for c in clients:
        merged += _multiset(_pairs(c))
        assert c.class_counts(cfg.num_classes).sum() == len(c)
    assert merged == _multiset(_pairs(s))


@pytest.mark.invariant
@given(configs)
def test_noise_never_touches_inputs_or_true_labels(cfg):
    clients = partition_dirichlet(generate_synthetic(cfg), cfg)
    noisy = inject_symmetric_noise(clients, cfg)
    clean_ids = set(designate_clean_clients(cfg).tolist())
    for before, after in zip(clients, noisy):
        assert np.array_equal(before.inputs, after.inputs)
        assert np.array_equal(before.true, after.true)
        assert after.is_noisy_ground_truth == (after.client_id not in clean_ids)
        if not after.is_noisy_ground_truth:
            assert np.array_equal(after.observed, after.true)
        assert np.all((after.observed >= 0) & (after.observed < cfg.num_classes))


@pytest.mark.invariant
@given(st.floats(0.05, 0.95), st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_corruption_rate_within_three_sigma(rho, num_classes, seed):
    n = 2000
    cfg = DataGenConfig(
        num_clients=1, num_classes=num_classes, samples_total=n, input_dim=1, noise_rate=rho, clean_client_count=0, rng_seed=seed
    )
    (ds,) = inject_symmetric_noise(partition_dirichlet(generate_synthetic(cfg), cfg), cfg)
    sigma = np.sqrt(rho * (1 - rho) / n)
    assert abs(ds.noise_rate - rho) <= 3 * sigma + 1.0 / n


@pytest.mark.invariant
@given(configs)
def test_data_pipeline_is_deterministic(cfg):
    a, ta = make_federated_data(cfg)
    b, tb = make_federated_data(cfg)
    assert np.array_equal(ta.inputs, tb.inputs)
    for x, y in zip(a, b):
        assert isinstance(x, ClientDataset)
        assert np.array_equal(x.inputs, y.inputs)
        assert np.array_equal(x.observed, y.observed)
        assert x.is_noisy_ground_truth == y.is_noisy_ground_truth
