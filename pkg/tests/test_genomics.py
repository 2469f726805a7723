"""Gene preprocessing: stage oracles, pipeline order, fit/replay semantics."""

import math

import numpy as np
import pytest

from fusilade.genomics import (GeneMatrix, GenePrepConfig, align_and_label,
                               apply_gene_pipeline, apply_zscore,
                               fit_gene_pipeline, impute_missing,
                               iqr_outlier_filter, shift_log_transform,
                               zscore_normalize)


def column_matrix(values, mask=None, prefix="P"):
    values = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    ids = [f"{prefix}{i}" for i in range(values.shape[0])]
    m = None if mask is None else np.asarray(mask, dtype=bool).reshape(-1, 1)
    return GeneMatrix(ids, ["G0"], values, m)


class TestShiftLog:
    def test_negative_minimum_shifts_by_abs_min_plus_one(self):
        m = column_matrix([-4.0, 0.0, 3.0])
        out = shift_log_transform(m)
        assert out.meta["log_shift"] == 5.0
        np.testing.assert_allclose(out.values[:, 0],
                                   [0.0, math.log(5.0), math.log(8.0)], atol=1e-12)

    def test_nonnegative_matrix_shifts_by_one(self):
        out = shift_log_transform(column_matrix([0.0, 1.0]))
        assert out.meta["log_shift"] == 1.0
        np.testing.assert_allclose(out.values[:, 0], [0.0, math.log(2.0)])

    def test_single_negative_value(self):
        out = shift_log_transform(column_matrix([-1.0]))
        assert out.meta["log_shift"] == 2.0
        assert out.values[0, 0] == 0.0

    def test_all_missing_is_error(self):
        with pytest.raises(ValueError, match="no present values"):
            shift_log_transform(column_matrix([1.0, 2.0], mask=[False, False]))

    def test_shift_ignores_missing_values(self):
        m = column_matrix([-100.0, 1.0, 2.0], mask=[False, True, True])
        assert shift_log_transform(m).meta["log_shift"] == 1.0


class TestZscore:
    def test_hand_arithmetic(self):
        out, stats = zscore_normalize(column_matrix([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.values[:, 0], [-1.224745, 0.0, 1.224745],
                                   atol=1e-6)
        assert stats.mean[0] == pytest.approx(2.0)
        assert stats.std[0] == pytest.approx(math.sqrt(2.0 / 3.0))

    def test_constant_column_flagged_and_zeroed(self):
        out, stats = zscore_normalize(column_matrix([5.0, 5.0, 5.0]))
        assert np.array_equal(out.values[:, 0], [0.0, 0.0, 0.0])
        assert stats.constant[0]

    def test_idempotent_on_standardized_column(self):
        x = np.array([-1.0, 0.0, 1.0]) / math.sqrt(2.0 / 3.0)
        once, _ = zscore_normalize(column_matrix(x))
        twice, _ = zscore_normalize(once)
        np.testing.assert_allclose(once.values, twice.values, atol=1e-12)

    def test_single_present_value_reported_not_fatal(self):
        m = column_matrix([7.0, 1.0], mask=[True, False])
        out, stats = zscore_normalize(m)
        assert stats.insufficient == ["G0"]
        assert out.values[0, 0] == 0.0

    def test_fit_rows_have_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        m = GeneMatrix([f"P{i}" for i in range(40)], [f"G{j}" for j in range(15)],
                       rng.normal(2.0, 3.0, size=(40, 15)))
        out, stats = zscore_normalize(m)
        for j in range(15):
            assert not stats.constant[j]
            col = out.values[:, j]
            assert abs(col.mean()) < 1e-9
            assert abs(col.std() - 1.0) < 1e-9

    def test_replay_uses_fitted_statistics(self):
        train = column_matrix([1.0, 2.0, 3.0])
        _, stats = zscore_normalize(train)
        held_out = column_matrix([4.0], prefix="Q")
        replayed = apply_zscore(held_out, stats)
        assert replayed.values[0, 0] == pytest.approx((4.0 - 2.0) / math.sqrt(2.0 / 3.0))


class TestIqrFilter:
    def test_hand_quantiles_mask_the_outlier(self):
        m = column_matrix(list(range(1, 10)) + [100.0])
        out, report = iqr_outlier_filter(m)
        assert report.lo[0] == pytest.approx(-3.5)
        assert report.hi[0] == pytest.approx(14.5)
        assert [e[2] for e in report.entries] == [100.0]
        assert out.mask[:, 0].sum() == 9
        # values untouched, only the mask changes
        np.testing.assert_array_equal(out.values, m.values)

    def test_small_clean_column_untouched(self):
        out, report = iqr_outlier_filter(column_matrix([1.0, 2.0, 3.0]))
        assert report.entries == []
        assert out.mask.all()

    def test_constant_column_nothing_masked(self):
        out, report = iqr_outlier_filter(column_matrix([7.0, 7.0, 7.0, 7.0]))
        assert report.entries == []
        assert out.mask.all()

    def test_mask_only_shrinks(self):
        rng = np.random.default_rng(1)
        m = GeneMatrix(["a", "b", "c", "d", "e"], ["G0", "G1"],
                       rng.normal(size=(5, 2)),
                       rng.uniform(size=(5, 2)) > 0.3)
        out, _ = iqr_outlier_filter(m)
        assert np.all(out.mask <= m.mask)

    def test_per_patient_axis(self):
        values = np.array([[1.0, 2.0, 3.0, 2.0, 100.0],
                           [5.0, 5.0, 5.0, 5.0, 5.0]])
        m = GeneMatrix(["a", "b"], [f"G{j}" for j in range(5)], values)
        out, report = iqr_outlier_filter(m, axis="patient")
        assert [(e[0], e[2]) for e in report.entries] == [("a", 100.0)]
        assert not out.mask[0, 4]


class TestImpute:
    def test_mean_fill(self):
        m = column_matrix([1.0, 0.0, 3.0], mask=[True, False, True])
        out, fill = impute_missing(m, "mean")
        assert out.values[1, 0] == 2.0
        assert fill[0] == 2.0
        assert out.mask.all()

    def test_median_fill_odd_count(self):
        m = column_matrix([1.0, 0.0, 3.0, 10.0], mask=[True, False, True, True])
        out, _ = impute_missing(m, "median")
        assert out.values[1, 0] == 3.0

    def test_no_missing_is_identity(self):
        m = column_matrix([1.5, 2.5])
        out, _ = impute_missing(m)
        np.testing.assert_array_equal(out.values, m.values)

    def test_present_values_bit_identical(self):
        rng = np.random.default_rng(2)
        values = rng.normal(size=(20, 4))
        mask = rng.uniform(size=(20, 4)) > 0.2
        mask[0, :] = True
        m = GeneMatrix([f"P{i}" for i in range(20)], [f"G{j}" for j in range(4)],
                       values, mask)
        out, _ = impute_missing(m)
        assert np.array_equal(out.values[mask], values[mask])

    def test_fully_missing_gene_names_the_gene(self):
        m = column_matrix([1.0, 2.0], mask=[False, False])
        with pytest.raises(ValueError, match="G0"):
            impute_missing(m)


class TestAlign:
    def make(self, ids):
        return GeneMatrix(ids, ["G0"], np.arange(len(ids), dtype=float).reshape(-1, 1))

    def test_three_way_intersection(self):
        m = self.make(["A", "B", "C"])
        out, y, logrec = align_and_label(m, {"B", "C", "D"}, {"B": 0, "C": 1})
        assert out.patient_ids == ["B", "C"]
        assert list(y) == [0, 1]
        assert logrec.dropped_no_image == ["A"]

    def test_disjoint_sets_error(self):
        with pytest.raises(ValueError, match="no aligned patients"):
            align_and_label(self.make(["A"]), {"B"}, {"C": 1})

    def test_single_survivor(self):
        out, y, _ = align_and_label(self.make(["A"]), {"A"}, {"A": 1})
        assert out.patient_ids == ["A"] and list(y) == [1]

    def test_order_invariant_to_input_ordering(self):
        a = self.make(["C", "A", "B"])
        b = self.make(["A", "B", "C"])
        ids = {"A", "B", "C"}
        labels = {"A": 0, "B": 1, "C": 0}
        out_a, ya, _ = align_and_label(a, ids, labels)
        out_b, yb, _ = align_and_label(b, ids, labels)
        assert out_a.patient_ids == out_b.patient_ids == ["A", "B", "C"]
        assert list(ya) == list(yb)

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError, match="0 or 1"):
            align_and_label(self.make(["A"]), {"A"}, {"A": 2})


class TestPipeline:
    def random_matrix(self, seed=0, n=30, g=8, missing=0.1):
        rng = np.random.default_rng(seed)
        values = rng.normal(1.0, 2.0, size=(n, g))
        mask = rng.uniform(size=(n, g)) > missing
        mask[0, :] = True
        return GeneMatrix([f"P{i:02d}" for i in range(n)],
                          [f"G{j}" for j in range(g)], values, mask)

    def test_matches_stage_composition(self):
        m = self.random_matrix()
        piped, stats = fit_gene_pipeline(m)
        staged = shift_log_transform(m)
        staged, zstats = zscore_normalize(staged)
        staged, _ = iqr_outlier_filter(staged)
        staged, _ = impute_missing(staged)
        np.testing.assert_array_equal(piped.values, staged.values)
        assert stats.shift == m_shift(m)
        np.testing.assert_array_equal(stats.zscore.mean, zstats.mean)

    def test_replay_is_deterministic_and_leak_free(self):
        m = self.random_matrix(seed=3)
        train = m.subset(m.patient_ids[:20])
        val = m.subset(m.patient_ids[20:])
        _, stats = fit_gene_pipeline(train)
        # perturbing held-out patients must not change fitted statistics
        val_perturbed = val.copy()
        val_perturbed.values[...] += 100.0
        _, stats_again = fit_gene_pipeline(train)
        assert stats.shift == stats_again.shift
        np.testing.assert_array_equal(stats.zscore.mean, stats_again.zscore.mean)
        np.testing.assert_array_equal(stats.fill, stats_again.fill)
        out1 = apply_gene_pipeline(val, stats)
        out2 = apply_gene_pipeline(val, stats)
        np.testing.assert_array_equal(out1.values, out2.values)
        assert out1.mask.all()

    def test_replay_handles_values_below_fitted_range(self):
        train = column_matrix([1.0, 2.0, 3.0, 4.0, 5.0])
        _, stats = fit_gene_pipeline(train)
        val = column_matrix([-50.0], prefix="Q")  # log argument would be negative
        out = apply_gene_pipeline(val, stats)
        assert np.isfinite(out.values).all()

    def test_config_knobs_flow_through(self):
        m = self.random_matrix(seed=4)
        _, stats = fit_gene_pipeline(m, GenePrepConfig(iqr_k=3.0, impute="median"))
        assert stats.config.iqr_k == 3.0
        assert stats.outliers.k == 3.0


def m_shift(m):
    vmin = m.values[m.mask].min()
    return abs(vmin) + 1.0 if vmin < 0 else 1.0
