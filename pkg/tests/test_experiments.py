"""Optimization and probe sanity on the shared desk-scale runs (default world, 5 seeds)."""
import numpy as np
import pytest

from conftest import ACCEPT_SEEDS

pytestmark = pytest.mark.slow


@pytest.mark.parametrize("variant", ["baseline", "georank"])
def test_loss_falls_between_first_and_last_epochs(desk_experiments, variant):
    for report in desk_experiments.runs(variant, ACCEPT_SEEDS):
        losses = [e.loss_total for e in report.epochs]
        assert np.mean(losses[-5:]) < np.mean(losses[:5]), (variant, report.config.seed, losses)


def test_linear_probe_tracks_knn(desk_experiments):
    for report in desk_experiments.runs("baseline", ACCEPT_SEEDS):
        assert report.linear_acc_macro >= report.knn_acc_macro - 0.10


def test_georank_improves_spatial_alignment_every_seed(desk_experiments):
    base = desk_experiments.runs("baseline", ACCEPT_SEEDS)
    rank = desk_experiments.runs("georank", ACCEPT_SEEDS)
    assert all(r.spearman_geo > b.spearman_geo for r, b in zip(rank, base))
