import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gan import EpochRecord, ModelSnapshot
from snapshots import (
    LossTrajectory, Regime, SelectionError, SelectionThresholds, classify_epoch, default_thresholds, deltas,
    loss_delta, read_trajectory_csv, regime_table, select_generators, write_regime_table,
    write_trajectory_csv,
)

THR = SelectionThresholds(5.0, 1.0, 0.2)
BAND_ORDER = [Regime.NOISE, Regime.TRANSITIONAL, Regime.BOUNDARY, Regime.INLIER]


def trajectory(losses, window=1):
    return LossTrajectory(records=[EpochRecord(epoch=i + 1, loss_i=float(v), loss_c=-float(v))
                                   for i, v in enumerate(losses)], smoothing_window=window)


def from_deltas(step_sizes, start=1000.0):
    """Trajectory (h=1, no smoothing) whose per-epoch delta is step_sizes[i]."""
    losses = [start]
    for step in step_sizes:
        losses.append(losses[-1] - step)
    return trajectory(losses)


def fake_snapshots(traj):
    return [ModelSnapshot(epoch=e, state={}, loss=0.0, arch={'kind': 'points', 'dim': 2, 'hidden': 4},
                          noise_dim=2) for e in traj.epochs]


class TestLossDelta:
    def test_constant_series(self):
        traj = trajectory([3.0] * 12, window=3)
        assert all(loss_delta(traj, i) == 0.0 for i in range(1, 8))

    def test_linear_series(self):
        traj = trajectory([100 - i for i in range(1, 21)], window=1)
        assert all(loss_delta(traj, i, h=5) == pytest.approx(5.0) for i in range(1, 16))

    def test_handcrafted_series(self):
        traj = trajectory([10, 8, 7, 6.5, 6.2, 6.1, 6.05], window=1)
        assert loss_delta(traj, 1, h=5) == pytest.approx(3.9)

    def test_out_of_range(self):
        traj = trajectory(range(10), window=1)
        with pytest.raises(SelectionError):
            loss_delta(traj, 6, h=5)
        with pytest.raises(SelectionError):
            loss_delta(traj, 0, h=5)

    def test_too_short(self):
        with pytest.raises(SelectionError, match='need at least 6'):
            deltas(trajectory([1, 2, 3]), h=5)

    def test_smoothing_is_centered(self):
        traj = trajectory([0.0, 3.0, 0.0, 3.0], window=3)
        np.testing.assert_allclose(traj.smoothed(), [1.5, 1.0, 2.0, 1.5])


class TestThresholds:
    def test_default_thresholds_formula(self):
        traj = trajectory([100 - i for i in range(1, 21)], window=1)
        thr = default_thresholds(traj, h=5)
        assert (thr.eps1, thr.eps2, thr.eps3) == pytest.approx((2.5, 0.5, 0.1))

    def test_l_max_ten(self):
        traj = from_deltas([10.0, 1.0, 0.5])
        thr = default_thresholds(traj, h=1)
        assert (thr.eps1, thr.eps2, thr.eps3) == pytest.approx((5.0, 1.0, 0.2))

    def test_flat_trajectory(self):
        with pytest.raises(SelectionError, match='flat trajectory'):
            default_thresholds(trajectory([2.0] * 10), h=5)

    def test_ordering_enforced(self):
        with pytest.raises(ValueError):
            SelectionThresholds(1.0, 2.0, 0.1)

    @pytest.mark.parametrize('L, regime', [
        (9, Regime.NOISE), (-9, Regime.NOISE), (5, Regime.NOISE),
        (2, Regime.TRANSITIONAL), (1, Regime.TRANSITIONAL),
        (0.5, Regime.BOUNDARY), (0.2, Regime.BOUNDARY),
        (0.05, Regime.INLIER), (0.0, Regime.INLIER),
    ])
    def test_classify_epoch(self, L, regime):
        assert classify_epoch(L, THR) is regime


@given(st.lists(st.integers(min_value=0, max_value=1000), min_size=2, max_size=60))
def test_bands_are_contiguous_on_monotone_deltas(steps):
    steps = sorted(steps, reverse=True)
    traj = from_deltas(steps)
    assume(max(steps) > 0)
    thr = default_thresholds(traj, h=1)
    labels = [regime for _, _, _, regime in regime_table(traj, thr, h=1) if regime is not None]
    ranks = [BAND_ORDER.index(regime) for regime in labels]
    assert ranks == sorted(ranks)


@settings(max_examples=100)
@given(st.lists(st.floats(min_value=-10, max_value=10), min_size=2, max_size=40),
       st.integers(min_value=1, max_value=8),
       st.sampled_from([0.0, 0.25, 0.5]))
def test_selection_only_returns_boundary_or_noise(steps, k, noise_fraction):
    traj = from_deltas(steps)
    labels = {epoch: regime for epoch, _, _, regime in regime_table(traj, THR, h=1)}
    assume(Regime.BOUNDARY in labels.values())
    chosen = select_generators(traj, fake_snapshots(traj), THR, k=k, include_noise_fraction=noise_fraction, h=1)
    assert len(chosen) == k
    assert {labels[s.epoch] for s in chosen} <= {Regime.BOUNDARY, Regime.NOISE}


class TestSelectGenerators:
    @pytest.fixture
    def banded(self):
        # Noise 1..10, Transitional 11..19, Boundary 20..40, Inlier 41..50
        traj = from_deltas([9.0] * 10 + [2.0] * 9 + [0.5] * 21 + [0.05] * 10)
        return traj, fake_snapshots(traj)

    def test_evenly_spaced_boundary(self, banded):
        traj, snaps = banded
        chosen = select_generators(traj, snaps, THR, k=3, include_noise_fraction=0.0, h=1)
        assert [s.epoch for s in chosen] == [20, 30, 40]

    def test_single_pick_is_median(self, banded):
        traj, snaps = banded
        chosen = select_generators(traj, snaps, THR, k=1, include_noise_fraction=0.0, h=1)
        assert [s.epoch for s in chosen] == [30]

    def test_noise_share(self, banded):
        traj, snaps = banded
        chosen = [s.epoch for s in select_generators(traj, snaps, THR, k=4, include_noise_fraction=0.25, h=1)]
        assert chosen == [5, 20, 30, 40]
        labels = {e: r for e, _, _, r in regime_table(traj, THR, h=1)}
        assert [labels[e] for e in chosen] == [Regime.NOISE] + [Regime.BOUNDARY] * 3

    def test_never_selects_transitional_or_inlier(self, banded):
        traj, snaps = banded
        for k in range(1, 8):
            for epoch in (s.epoch for s in select_generators(traj, snaps, THR, k=k, h=1)):
                assert epoch <= 10 or 20 <= epoch <= 40

    def test_empty_noise_band_falls_back_to_boundary(self):
        traj = from_deltas([0.5] * 9 + [0.05] * 3)
        chosen = select_generators(traj, fake_snapshots(traj), THR, k=2, include_noise_fraction=0.5, h=1)
        assert [s.epoch for s in chosen] == [1, 9]

    def test_all_inlier(self):
        traj = from_deltas([0.01] * 10)
        with pytest.raises(SelectionError, match='Boundary'):
            select_generators(traj, fake_snapshots(traj), THR, k=2, h=1)

    def test_invalid_fraction(self, banded):
        traj, snaps = banded
        with pytest.raises(SelectionError):
            select_generators(traj, snaps, THR, k=2, include_noise_fraction=0.8, h=1)


class TestCsv:
    def test_trajectory_round_trip(self, tmp_path):
        traj = trajectory([1.0 / 3, 0.25, -1e-9, 7.5], window=3)
        path = tmp_path / 'trajectory.csv'
        write_trajectory_csv(traj, path)
        assert read_trajectory_csv(path, smoothing_window=3).same_losses(traj)

    def test_regime_table_leaves_tail_blank(self, tmp_path):
        traj = from_deltas([9.0, 0.5, 0.125])
        path = tmp_path / 'regimes.csv'
        write_regime_table(regime_table(traj, THR, h=1), path)
        lines = path.read_text().splitlines()
        assert lines[0] == 'epoch,loss,delta,regime'
        assert lines[1] == "1,1000.0,9.0,Noise"
        assert lines[-1] == "4,990.375,,"
