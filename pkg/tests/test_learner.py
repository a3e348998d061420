import gzip
import math
import struct

import numpy as np
import pytest

from byzantine_dsgd.errors import BadMagic, DimensionMismatch, LengthMismatch
from byzantine_dsgd.learner import (
    Dataset,
    LocalDataset,
    Sample,
    batch_grad,
    estimate_M_L,
    evaluate,
    init_params,
    keyed_rng,
    load_idx,
    loss_and_grad,
    partition,
    per_sample_grads,
    sample_indices,
    stack_datasets,
    step_size,
    synth_dataset,
)
from byzantine_dsgd.models import InitSpec, LossSpec, ScheduleSpec

# 0.999 quantile of the chi-square distribution with 9 degrees of freedom
CHI2_9_999 = 27.877


def _random_sample(rng, spec):
    return Sample(features=rng.standard_normal(spec.input_dim), label=int(rng.integers(spec.classes)))


def test_loss_at_zero_is_log_classes():
    """Test that the zero model predicts uniformly."""
    spec = LossSpec(kind="strongly_convex", lam=1.0, input_dim=5, classes=7)
    loss, _ = loss_and_grad(spec, np.zeros(spec.param_count), Sample(features=np.ones(5), label=2))
    assert loss == pytest.approx(math.log(7), abs=1e-12)


def test_gradients_match_finite_differences(loss_spec):
    """Test analytic gradients against central differences."""
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(50):
        x = 0.5 * rng.standard_normal(loss_spec.param_count)
        sample = _random_sample(rng, loss_spec)
        _, g = loss_and_grad(loss_spec, x, sample)
        fd = np.empty_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h
            fd[i] = (
                loss_and_grad(loss_spec, x + e, sample)[0] - loss_and_grad(loss_spec, x - e, sample)[0]
            ) / (2 * h)
        assert np.linalg.norm(fd - g) <= 1e-5 * max(1.0, np.linalg.norm(g))


def test_unregularised_strongly_convex_is_softmax():
    rng = np.random.default_rng(1)
    sc = LossSpec(kind="strongly_convex", lam=0.0, input_dim=3, classes=4)
    sm = LossSpec(kind="softmax", input_dim=3, classes=4)
    x = rng.standard_normal(sc.param_count)
    sample = _random_sample(rng, sc)
    a, ga = loss_and_grad(sc, x, sample)
    b, gb = loss_and_grad(sm, x, sample)
    assert a == b
    assert np.array_equal(ga, gb)


def test_strong_convexity():
    """Test f(y) >= f(x) + <g(x), y - x> + lam/2 ||y - x||^2 on random pairs."""
    rng = np.random.default_rng(2)
    spec = LossSpec(kind="strongly_convex", lam=0.3, input_dim=4, classes=3)
    for _ in range(200):
        x = rng.standard_normal(spec.param_count)
        y = rng.standard_normal(spec.param_count)
        sample = _random_sample(rng, spec)
        fx, gx = loss_and_grad(spec, x, sample)
        fy, _ = loss_and_grad(spec, y, sample)
        assert fy >= fx + gx @ (y - x) + 0.5 * spec.lam * (y - x) @ (y - x) - 1e-12


def test_batch_gradient_is_the_average(loss_spec):
    """Test batch gradients against the per-sample oracle."""
    rng = np.random.default_rng(3)
    x = rng.standard_normal(loss_spec.param_count)
    feats = rng.standard_normal((5, loss_spec.input_dim))
    labels = rng.integers(loss_spec.classes, size=5)
    oracle = np.mean(
        [loss_and_grad(loss_spec, x, Sample(features=f, label=int(y)))[1] for f, y in zip(feats, labels)],
        axis=0,
    )
    assert np.allclose(batch_grad(loss_spec, x, feats, labels), oracle, rtol=0, atol=1e-12)

    _, per_sample = per_sample_grads(loss_spec, x, feats, labels)
    assert per_sample.shape == (5, loss_spec.param_count)
    assert np.allclose(per_sample.mean(axis=0), oracle, rtol=0, atol=1e-12)

    single = batch_grad(loss_spec, x, feats[:1], labels[:1])
    assert np.allclose(single, per_sample[0], rtol=0, atol=1e-12)
    doubled = batch_grad(loss_spec, x, np.repeat(feats[:1], 2, axis=0), np.repeat(labels[:1], 2))
    assert np.allclose(doubled, single, rtol=0, atol=1e-12)


def test_dimension_checks():
    spec = LossSpec(kind="softmax", input_dim=3, classes=2)
    with pytest.raises(DimensionMismatch):
        batch_grad(spec, np.zeros(5), np.zeros((1, 3)), np.zeros(1, dtype=int))
    with pytest.raises(DimensionMismatch):
        batch_grad(spec, np.zeros(spec.param_count), np.zeros((1, 4)), np.zeros(1, dtype=int))
    with pytest.raises(ValueError):
        batch_grad(LossSpec(kind="softmax"), np.zeros(8), np.zeros((1, 3)), np.zeros(1, dtype=int))


def test_evaluate_matches_per_sample_losses(loss_spec):
    rng = np.random.default_rng(4)
    x = rng.standard_normal(loss_spec.param_count)
    data = Dataset(
        features=rng.standard_normal((30, loss_spec.input_dim)),
        labels=rng.integers(loss_spec.classes, size=30),
    )
    losses, _ = per_sample_grads(loss_spec, x, data.features, data.labels)
    loss, acc = evaluate(loss_spec, x, data, chunk=7)
    assert loss == pytest.approx(float(losses.mean()), rel=1e-12)
    assert 0.0 <= acc <= 1.0


def test_step_size_examples():
    assert step_size(ScheduleSpec(kind="cvx", k0=10), 0) == pytest.approx(0.1)
    assert step_size(ScheduleSpec(kind="sc", mu=0.5, k0=2), 0) == pytest.approx(1.0)
    assert step_size(ScheduleSpec(kind="ncvx", a=2, L=4, k0=1), 1) == pytest.approx(0.25)
    assert step_size(ScheduleSpec(kind="paper_exp", s=1), 100) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        step_size(ScheduleSpec(kind="sc"), 0)
    with pytest.raises(ValueError):
        step_size(ScheduleSpec(kind="ncvx"), 0)
    with pytest.raises(ValueError):
        step_size(ScheduleSpec(kind="cvx"), -1)


@pytest.mark.parametrize(
    "schedule",
    [
        ScheduleSpec(kind="sc", mu=0.1),
        ScheduleSpec(kind="cvx"),
        ScheduleSpec(kind="ncvx", L=3.0),
        ScheduleSpec(kind="paper_exp"),
    ],
)
def test_step_sizes_are_positive_and_non_increasing(schedule):
    steps = [step_size(schedule, k) for k in range(1000)]
    assert all(s > 0 for s in steps)
    assert all(b <= a for a, b in zip(steps, steps[1:]))


def test_sampling_is_keyed_by_seed_agent_and_step():
    a = sample_indices(7, 2, 5, 100, 16)
    assert np.array_equal(a, sample_indices(7, 2, 5, 100, 16))
    assert not np.array_equal(a, sample_indices(7, 3, 5, 100, 16))
    assert not np.array_equal(a, sample_indices(7, 2, 6, 100, 16))
    assert a.min() >= 0 and a.max() < 100


def test_sampling_is_uniform():
    """Test sample positions against a chi-square goodness-of-fit bound."""
    draws = np.concatenate([sample_indices(11, 0, k, 10, 1000) for k in range(100)])
    counts = np.bincount(draws, minlength=10)
    expected = draws.size / 10
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < CHI2_9_999


def test_keyed_streams_are_independent_of_call_order():
    first = keyed_rng(1, 2, 3).standard_normal(4)
    keyed_rng(9, 9).standard_normal(100)
    assert np.array_equal(first, keyed_rng(1, 2, 3).standard_normal(4))


def test_synthetic_dataset_layout():
    """Test the synthetic population split."""
    locals_, test, gen = synth_dataset(4, 6, 10, 3, 25, seed=5, agents=[0, 2, 7])
    assert [d.agent for d in locals_] == [0, 2, 7]
    assert all(len(d) == 10 and d.dim == 6 for d in locals_)
    assert len(test) == 25
    assert np.array(gen.means).shape == (4, 6)
    assert np.allclose(np.linalg.norm(gen.means, axis=1), 3.0)

    again, test_again, _ = synth_dataset(4, 6, 10, 3, 25, seed=5, agents=[0, 2, 7])
    assert np.array_equal(locals_[1].features, again[1].features)
    assert np.array_equal(test.labels, test_again.labels)
    with pytest.raises(ValueError):
        synth_dataset(4, 6, 10, 3, 25, seed=5, agents=[0, 1])


def test_synthetic_task_is_learnable():
    """Test that a linear model reaches high accuracy on a well-separated mixture."""
    locals_, test, _ = synth_dataset(2, 20, 100, 2, 1000, seed=1, separation=5.0)
    train = stack_datasets(locals_)
    spec = LossSpec(kind="softmax", input_dim=20, classes=2)
    x = np.zeros(spec.param_count)
    for _ in range(300):
        x -= 0.5 * batch_grad(spec, x, train.features, train.labels)
    _, acc = evaluate(spec, x, test)
    assert acc > 0.95


def test_datasets_are_read_only():
    locals_, _, _ = synth_dataset(2, 3, 5, 1, 5, seed=0)
    with pytest.raises(ValueError):
        locals_[0].features[0, 0] = 1.0


def test_dataset_leaves_the_caller_arrays_writable():
    """Test that building a dataset copies the arrays it is given."""
    features, labels = np.zeros((3, 2)), np.zeros(3, dtype=int)
    data = Dataset(features=features, labels=labels)
    features[0, 0] = 5.0
    labels[1] = 2
    assert data.features[0, 0] == 0.0
    assert data.labels[1] == 0
    assert not data.features.flags.writeable


def test_local_dataset_replace():
    """Test that replacing a sample returns a modified copy."""
    data = LocalDataset(agent=1, features=np.zeros((3, 2)), labels=np.zeros(3, dtype=int))
    changed = data.replace(1, Sample(features=np.ones(2), label=1))
    assert changed.agent == 1
    assert changed.features[1].tolist() == [1.0, 1.0]
    assert changed.labels.tolist() == [0, 1, 0]
    assert data.features[1].tolist() == [0.0, 0.0]
    with pytest.raises(IndexError):
        data.replace(3, Sample(features=np.ones(2), label=1))


def test_dataset_length_mismatch():
    with pytest.raises(LengthMismatch):
        Dataset(features=np.zeros((3, 2)), labels=np.zeros(2, dtype=int))


def test_partition():
    data = Dataset(features=np.arange(20.0).reshape(10, 2), labels=np.arange(10) % 3)
    parts = partition(data, [4, 5], 3, seed=0)
    assert [p.agent for p in parts] == [4, 5]
    assert all(len(p) == 3 for p in parts)
    rows = {tuple(r) for p in parts for r in p.features}
    assert len(rows) == 6
    with pytest.raises(ValueError):
        partition(data, [0, 1, 2], 4, seed=0)


def _write_idx(tmp_path, images, labels, image_magic=0x803, label_magic=0x801, label_count=None, gz=False):
    count, rows, cols = images.shape
    img = struct.pack(">IIII", image_magic, count, rows, cols) + images.astype(np.uint8).tobytes()
    n = count if label_count is None else label_count
    lab = struct.pack(">II", label_magic, n) + labels.astype(np.uint8).tobytes()
    suffix = ".gz" if gz else ""
    img_path = tmp_path / f"images{suffix}"
    lab_path = tmp_path / f"labels{suffix}"
    if gz:
        img_path.write_bytes(gzip.compress(img))
        lab_path.write_bytes(gzip.compress(lab))
    else:
        img_path.write_bytes(img)
        lab_path.write_bytes(lab)
    return img_path, lab_path


def test_load_idx(tmp_path):
    """Test parsing of an IDX image/label pair."""
    images = np.array([[[0, 255], [51, 102]], [[255, 255], [0, 0]], [[1, 2], [3, 4]]])
    img, lab = _write_idx(tmp_path, images, np.array([3, 1, 4]))
    data = load_idx(img, lab)
    assert len(data) == 3
    assert data.dim == 4
    assert data.features[0].tolist() == [0.0, 1.0, 0.2, 0.4]
    assert data.labels.tolist() == [3, 1, 4]


def test_load_idx_gzip(tmp_path):
    images = np.full((2, 3, 3), 255)
    img, lab = _write_idx(tmp_path, images, np.array([0, 9]), gz=True)
    data = load_idx(img, lab)
    assert data.features.shape == (2, 9)
    assert np.all(data.features == 1.0)


def test_load_idx_errors(tmp_path):
    images = np.zeros((2, 2, 2))
    img, lab = _write_idx(tmp_path, images, np.array([0, 1]), image_magic=0x802)
    with pytest.raises(BadMagic):
        load_idx(img, lab)
    img, lab = _write_idx(tmp_path, images, np.array([0, 1]), label_magic=0x803)
    with pytest.raises(BadMagic):
        load_idx(img, lab)
    img, lab = _write_idx(tmp_path, images, np.array([0, 1, 2]), label_count=3)
    with pytest.raises(LengthMismatch):
        load_idx(img, lab)


def test_gradient_bound_on_zero_features():
    """Test that M_hat stays within sqrt(2) + lam * radius when features are zero."""
    data = Dataset(features=np.zeros((20, 3)), labels=np.arange(20) % 2)
    for lam, kind in ((0.0, "softmax"), (0.1, "strongly_convex")):
        spec = LossSpec(kind=kind, lam=lam, input_dim=3, classes=2)
        m_hat, _ = estimate_M_L(spec, data, probes=16, radius=1.0)
        assert 0.0 < m_hat <= math.sqrt(2) + lam * 1.0


def test_constant_loss_has_zero_smoothness():
    data = Dataset(features=np.zeros((10, 3)), labels=np.zeros(10, dtype=int))
    spec = LossSpec(kind="softmax", input_dim=3, classes=1)
    m_hat, l_hat = estimate_M_L(spec, data, probes=4)
    assert m_hat == 0.0
    assert l_hat == 0.0


def test_more_probes_never_lower_the_estimates():
    rng = np.random.default_rng(5)
    spec = LossSpec(kind="mlp", hidden=4, input_dim=3, classes=2)
    data = Dataset(features=rng.standard_normal((40, 3)), labels=rng.integers(2, size=40))
    m4, l4 = estimate_M_L(spec, data, probes=4, seed=2)
    m8, l8 = estimate_M_L(spec, data, probes=8, seed=2)
    assert m8 >= m4 > 0
    assert l8 >= l4 > 0


def test_init_params():
    linear = LossSpec(kind="softmax", input_dim=3, classes=2)
    assert np.array_equal(init_params(linear, InitSpec(), 0), np.zeros(8))
    mlp = LossSpec(kind="mlp", hidden=4, input_dim=3, classes=2)
    x = init_params(mlp, InitSpec(), 0)
    assert x.shape == (mlp.param_count,)
    assert np.any(x != 0)
    assert np.array_equal(x, init_params(mlp, InitSpec(), 0))
    assert np.array_equal(init_params(mlp, InitSpec(kind="zero"), 0), np.zeros(mlp.param_count))
