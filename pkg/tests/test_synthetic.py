import logging

import numpy as np
import pytest

from src.models import RoiBox, SyntheticSpec
from src.utils.cohort import load_cohort, load_scores
from src.utils.synthetic import (
    build_roi_masks,
    envelope_mask,
    generate_synthetic_cohort,
    grow_lesion,
    synthetic_scores,
    write_synthetic_dataset,
)
from tests.conftest import flood_fill_components


def _small_spec(**overrides):
    settings = dict(
        dims=(24, 24, 24),
        n_subjects=50,
        lesion_log_mu=4.0,
        lesion_log_sigma=0.2,
        rois={"anterior": RoiBox(corner=(5, 12, 10), size=(3, 3, 3))},
        seed=11,
    )
    settings.update(overrides)
    return SyntheticSpec(**settings)


class TestLesionGrowth:
    def test_exact_size_and_connected(self):
        rng = np.random.default_rng(0)
        allowed = np.ones((10, 10, 10), dtype=bool)
        region = grow_lesion((5, 5, 5), 60, allowed, rng)
        assert region.sum() == 60
        assert len(flood_fill_components(region, 26)) == 1

    def test_stops_when_room_runs_out(self):
        allowed = np.zeros((5, 5, 5), dtype=bool)
        allowed[1:3, 1:3, 1:3] = True
        region = grow_lesion((1, 1, 1), 100, allowed, np.random.default_rng(1))
        assert region.sum() == 8
        assert not region[~allowed].any()


class TestSyntheticCohort:
    def test_deterministic(self):
        a, _ = generate_synthetic_cohort(_small_spec(n_subjects=10))
        b, _ = generate_synthetic_cohort(_small_spec(n_subjects=10))
        assert np.array_equal(a.lesion_bits, b.lesion_bits)
        c, _ = generate_synthetic_cohort(_small_spec(n_subjects=10, seed=12))
        assert not np.array_equal(a.lesion_bits, c.lesion_bits)

    def test_single_voxel_lesions(self):
        cohort, _ = generate_synthetic_cohort(_small_spec(n_subjects=30, lesion_log_mu=1e-6, lesion_log_sigma=1e-6))
        assert cohort.lesion_bits.sum(axis=1).tolist() == [1] * 30

    def test_lesions_connected_and_inside_envelope(self):
        spec = _small_spec()
        cohort, _ = generate_synthetic_cohort(spec)
        envelope = cohort.grid.flatten(envelope_mask(spec))
        for row in cohort.lesion_bits:
            assert not row[~envelope].any()
            assert len(flood_fill_components(cohort.grid.unflatten(row), 26)) == 1

    def test_mean_lesion_size(self):
        spec = _small_spec()
        cohort, _ = generate_synthetic_cohort(spec)
        expected = np.exp(spec.lesion_log_mu + spec.lesion_log_sigma ** 2 / 2)
        assert cohort.lesion_bits.sum(axis=1).mean() == pytest.approx(expected, rel=0.15)

    def test_subject_ids(self):
        cohort, roi = generate_synthetic_cohort(_small_spec(n_subjects=3))
        assert cohort.subject_ids == ("sub-001", "sub-002", "sub-003")
        assert roi.size == 27

    def test_unreachable_roi_warns(self, caplog):
        spec = _small_spec(n_subjects=2, lesion_log_mu=1.0,
                           rois={"right": RoiBox(corner=(20, 11, 11), size=(2, 2, 2))}, primary_roi="right")
        with caplog.at_level(logging.WARNING):
            generate_synthetic_cohort(spec)
        assert "zero seed-placement probability" in caplog.text


class TestSyntheticScores:
    def test_percent_damage_range(self):
        spec = _small_spec(envelope="grid", gradient_decay=3.0, rois={
            "anterior": RoiBox(corner=(10, 10, 10), size=(3, 3, 3)),
            "posterior": RoiBox(corner=(12, 12, 12), size=(3, 3, 3)),
        })
        cohort, _ = generate_synthetic_cohort(spec)
        scores = synthetic_scores(cohort, spec)
        assert sorted(scores) == ["anterior", "posterior"]
        for vector in scores.values():
            assert len(vector) == spec.n_subjects
            assert np.all((vector.values >= 0) & (vector.values <= 1))

    def test_noise_is_seeded(self):
        spec = _small_spec(envelope="grid", gradient_decay=3.0, noise_sd=0.1,
                           rois={"anterior": RoiBox(corner=(10, 10, 10), size=(3, 3, 3))})
        cohort, _ = generate_synthetic_cohort(spec)
        first = synthetic_scores(cohort, spec)["anterior"].values
        second = synthetic_scores(cohort, spec)["anterior"].values
        assert np.array_equal(first, second)


class TestDatasetFiles:
    def test_written_dataset_reloads(self, tmp_path):
        spec = _small_spec(n_subjects=8, envelope="grid", gradient_decay=2.0,
                           rois={"anterior": RoiBox(corner=(10, 10, 10), size=(4, 4, 4))})
        cohort, _ = generate_synthetic_cohort(spec)
        rois = build_roi_masks(spec)
        scores = synthetic_scores(cohort, spec, rois)
        manifest = write_synthetic_dataset(cohort, scores, rois, tmp_path)

        reloaded = load_cohort(manifest)
        assert reloaded.subject_ids == cohort.subject_ids
        assert np.array_equal(reloaded.lesion_bits, cohort.lesion_bits)
        reloaded_scores = load_scores(tmp_path / "scores_anterior.csv", reloaded.subject_ids)
        assert np.array_equal(reloaded_scores.values, scores["anterior"].values)
        assert (tmp_path / "roi_anterior.nii.gz").exists()
