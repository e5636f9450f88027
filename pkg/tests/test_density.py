import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicesplat.density import DensityConfig, activity, control_epochs, prune_and_respawn
from slicesplat.model import GaussianCloud, sigmoid

from _util import random_cloud


def _cloud(intensities, logits=None, means=None):
    n = len(intensities)
    means = np.arange(3 * n, dtype=float).reshape(n, 3) if means is None else means
    logits = np.ones(n) if logits is None else logits
    return GaussianCloud(means, np.zeros((n, 3)), [[1, 0, 0, 0]] * n, logits, intensities)


def test_activity_examples():
    assert activity(_cloud([0.0], [5.0]))[0] == 0.0
    assert activity(_cloud([0.5], [1.0]))[0] == pytest.approx(0.36552928931500245)
    c = random_cloud(np.random.default_rng(0), 50)
    assert np.allclose(activity(c), np.abs(c.intensities * sigmoid(c.opacity_logits)))


def test_two_gaussian_example():
    logits = np.array([0.0, 0.0])
    cloud = _cloud(np.array([0.4, 0.02]), logits)  # m = (0.2, 0.01)
    new, grace, event = prune_and_respawn(cloud, DensityConfig(), rng=np.random.default_rng(0))
    assert len(new) == 2
    assert event.removed == [1] and event.inserted == [1]
    assert np.array_equal(new.means[0], cloud.means[0])
    assert new.intensities[1] == 0.5 and new.opacity_logits[1] == 1.0
    assert grace[1] == 1


def test_all_active_is_noop():
    cloud = random_cloud(np.random.default_rng(1), 10).replace(intensities=np.full(10, 0.9),
                                                             opacity_logits=np.full(10, 2.0))
    new, _, event = prune_and_respawn(cloud)
    assert new is cloud and event.removed == []


def test_hundred_with_thirty_inactive():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng, 100, spread=5.0).replace(opacity_logits=np.full(100, 2.0), intensities=np.full(100, 0.8))
    dead = rng.choice(100, 30, replace=False)
    inten = cloud.intensities.copy()
    inten[dead] = 1e-4
    cloud = cloud.replace(intensities=inten)
    new, _, event = prune_and_respawn(cloud, rng=np.random.default_rng(3))
    assert sorted(event.removed) == sorted(dead.tolist())
    alive = np.setdiff1d(np.arange(100), dead)
    lo, hi = cloud.means[alive].min(axis=0), cloud.means[alive].max(axis=0)
    assert np.all(new.means[dead] >= lo) and np.all(new.means[dead] <= hi)
    assert np.array_equal(new.means[alive], cloud.means[alive])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60), st.floats(0.01, 0.3))
def test_conservation_containment_and_purity(seed, n, eps):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n, spread=3.0)
    grace = rng.integers(0, 2, n)
    m = activity(cloud)
    active = m >= eps
    new, new_grace, event = prune_and_respawn(cloud, DensityConfig(threshold=eps), grace, rng)
    assert len(new) == n
    idx = np.asarray(event.removed, dtype=int)
    if idx.size and active.any():
        lo, hi = cloud.means[active].min(axis=0), cloud.means[active].max(axis=0)
        assert np.all(new.means[idx] >= lo) and np.all(new.means[idx] <= hi)
    # afterwards: every Gaussian is active, just respawned, or still in grace
    post = activity(new)
    ok = (post >= eps) | np.isin(np.arange(n), idx) | (grace > 0)
    assert ok.all()
    if eps <= 0.3655:
        assert np.all(post[idx] >= eps)


def test_grace_exempts_one_step():
    cloud = _cloud(np.array([0.5, 0.0]))
    cfg = DensityConfig()
    c1, g1, e1 = prune_and_respawn(cloud, cfg, rng=np.random.default_rng(0))
    assert e1.removed == [1] and g1[1] == 1
    c1 = c1.replace(intensities=np.array([0.5, 0.0]))  # dies again straight away
    c2, g2, e2 = prune_and_respawn(c1, cfg, g1, rng=np.random.default_rng(1))
    assert e2.removed == [] and e2.exempt == 1 and g2[1] == 0
    _, _, e3 = prune_and_respawn(c2, cfg, g2, rng=np.random.default_rng(2))
    assert e3.removed == [1]


def test_all_inactive_uses_previous_box(caplog):
    cloud = _cloud(np.zeros(4))
    box = (np.array([10.0, 10, 10]), np.array([11.0, 11, 11]))
    with caplog.at_level(logging.WARNING):
        new, _, event = prune_and_respawn(cloud, fallback_bbox=box, rng=np.random.default_rng(0))
    assert event.warning and "previous bounding box" in caplog.text
    assert len(new) == 4
    assert np.all(new.means >= 10) and np.all(new.means <= 11)


def test_schedule():
    assert control_epochs(DensityConfig(), 60) == [10, 20, 30, 40]
    assert control_epochs(DensityConfig(period=5, first_epoch=3, last_epoch=14), 60) == [3, 8, 13]


def test_validation():
    with pytest.raises(ValueError):
        DensityConfig(threshold=0)
    with pytest.raises(ValueError):
        DensityConfig(period=0)
    with pytest.raises(ValueError):
        DensityConfig(first_epoch=50, last_epoch=40)
    with pytest.raises(ValueError):
        prune_and_respawn(GaussianCloud.empty())


def test_event_serializes():
    cloud = _cloud(np.array([0.5, 0.0]))
    _, _, event = prune_and_respawn(cloud, epoch=10, rng=np.random.default_rng(0))
    d = event.as_dict()
    assert d["epoch"] == 10 and d["removed"] == [1] and len(d["bbox"]) == 2
