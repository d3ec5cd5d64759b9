import math
import warnings
import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbfocal.data import OFFICIAL_TRAIN_POSITIVES, OFFICIAL_TRAIN_TOTAL, official_class_counts
from cbfocal.weights import (ClampWarning, ClassCounts, Scheme, WeightConfig, WeightTable,
                             beta_from_sample_count, beta_grid_presets, build_weight_table,
                             effective_alpha, read_weight_table_csv)


def exact_alpha(beta: float, n: int):
    """50-digit evaluation of (1 - beta) / (1 - beta**n) from the exact binary beta."""
    with mpmath.workdps(50):
        b = mpmath.mpf(beta)
        return (1 - b) / (1 - b ** n)


def two_class_counts():
    return ClassCounts(["A", "B"], [1, 2], [9, 8], 10)


class TestEffectiveAlpha:
    def test_single_sample_is_one(self):
        assert effective_alpha(0.5, 1) == 1.0

    def test_two_samples(self):
        assert effective_alpha(0.5, 2) == pytest.approx(2 / 3, rel=1e-15)

    @pytest.mark.parametrize("beta,n", [(0.9998, 227), (0.9998, 19894), (1 - 2e-6, 1431),
                                        (1 - 2e-3, 5), (0.3, 7), (1 - 1e-12, 227)])
    def test_matches_rational_oracle(self, beta, n):
        ref = exact_alpha(beta, n)
        got = effective_alpha(beta, n)
        assert abs(got - ref) / ref < 1e-12

    def test_beta_zero_gives_one(self):
        for n in (1, 2, 227, 10 ** 6):
            assert effective_alpha(0.0, n) == 1.0

    def test_near_one_does_not_blow_up(self):
        a = effective_alpha(1 - 1e-13, 100)
        assert math.isfinite(a) and a == pytest.approx(1 / 100, rel=1e-9)

    @pytest.mark.parametrize("beta", [-0.1, 1.0, 1.5])
    def test_domain(self, beta):
        with pytest.raises(ValueError):
            effective_alpha(beta, 3)

    def test_no_positives(self):
        with pytest.raises(ValueError, match="no positive samples"):
            effective_alpha(0.9, 0)

    @given(st.floats(0.0, 0.999999), st.integers(1, 5000), st.integers(1, 5000))
    def test_monotone_in_count(self, beta, a, b):
        if a == b or beta == 0.0:
            return
        lo, hi = min(a, b), max(a, b)
        a_lo, a_hi = effective_alpha(beta, lo), effective_alpha(beta, hi)
        # strict only while 1 - beta**n is still resolvable in double precision
        if beta ** lo - beta ** hi > 1e-14:
            assert a_lo > a_hi
        else:
            assert a_lo >= a_hi


class TestBeta:
    def test_from_count(self):
        assert beta_from_sample_count(1) == 0.0
        assert beta_from_sample_count(50000) == pytest.approx(0.99998, abs=1e-15)
        assert beta_from_sample_count(86524) == pytest.approx(86523 / 86524)
        assert beta_from_sample_count(86524) != pytest.approx(1 - 2e-5, abs=1e-7)

    def test_zero(self):
        with pytest.raises(ValueError):
            beta_from_sample_count(0)

    def test_presets(self):
        grid = beta_grid_presets()
        assert grid == [1 - 2.0e-6, 1 - 2.0e-5, 1 - 2.0e-4, 1 - 7.0e-4, 1 - 2.0e-3]
        assert grid[2] == pytest.approx(0.9998, abs=1e-15)
        assert grid[1] == pytest.approx(0.99998, abs=1e-15)
        assert all(a > b for a, b in zip(grid, grid[1:]))


class TestBuildTable:
    def test_hand_example(self):
        with pytest.warns(ClampWarning, match="A"):
            t = build_weight_table(two_class_counts(), WeightConfig(beta=0.5))
        np.testing.assert_allclose(t.alpha_raw, [1, 2 / 3], rtol=1e-15)
        assert t.n_of_beta == pytest.approx(5 / 3, rel=1e-15)
        np.testing.assert_allclose(t.alpha_norm, [1.2, 0.8], rtol=1e-14)
        np.testing.assert_array_equal(t.omega_pos, t.alpha_norm)
        np.testing.assert_allclose(t.omega_neg_raw, [-0.2, 0.2], rtol=1e-13)
        np.testing.assert_allclose(t.omega_neg, [0.0, 0.2], rtol=1e-13)

    def test_uniform(self):
        t = build_weight_table(two_class_counts(), WeightConfig(scheme=Scheme.UNIFORM))
        for arr in (t.omega_pos, t.omega_neg, t.omega_neg_raw):
            np.testing.assert_array_equal(arr, [1.0, 1.0])

    def test_official_counts(self):
        counts = official_class_counts()
        with pytest.warns(ClampWarning):
            t = build_weight_table(counts, WeightConfig(beta=0.9998))
        assert math.fsum(t.alpha_norm) == pytest.approx(14, rel=1e-9)
        assert counts.pattern_names[int(np.argmax(t.omega_pos))] == "Hernia"
        # independent evaluation of the normalized weights from the table counts
        raw = {n: exact_alpha(0.9998, c) for n, c in OFFICIAL_TRAIN_POSITIVES.items()}
        total = sum(raw.values())
        for k, name in enumerate(counts.pattern_names):
            assert t.alpha_norm[k] == pytest.approx(float(14 * raw[name] / total), rel=1e-12)

    def test_prevalence(self):
        t = build_weight_table(official_class_counts(), WeightConfig(scheme="prevalence"))
        k = t.pattern_names.index("Hernia")
        assert t.omega_pos[k] == pytest.approx(OFFICIAL_TRAIN_TOTAL / 227, rel=1e-15)
        assert t.omega_neg[k] == pytest.approx(OFFICIAL_TRAIN_TOTAL / (OFFICIAL_TRAIN_TOTAL - 227), rel=1e-15)
        np.testing.assert_allclose(1 / t.omega_pos + 1 / t.omega_neg, 1.0, atol=1e-12)

    def test_prevalence_needs_negatives(self):
        counts = ClassCounts(["A", "B"], [3, 1], [0, 2], 3)
        with pytest.raises(ValueError, match="no negative samples: A"):
            build_weight_table(counts, WeightConfig(scheme="prevalence"))

    @pytest.mark.parametrize("scheme", ["effective_number", "prevalence"])
    def test_zero_positives_named(self, scheme):
        counts = ClassCounts(["A", "Rare"], [3, 0], [1, 4], 4)
        with pytest.raises(ValueError, match="Rare"):
            build_weight_table(counts, WeightConfig(scheme=scheme))

    def test_floor(self):
        with pytest.warns(ClampWarning):
            t = build_weight_table(two_class_counts(), WeightConfig(beta=0.5, negative_floor=0.25))
        np.testing.assert_allclose(t.omega_neg, [0.25, 0.25])

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            WeightConfig(beta=1.0)
        with pytest.raises(ValueError):
            WeightConfig(negative_floor=1.5)

    def test_counts_invariant(self):
        with pytest.raises(ValueError, match="total_samples"):
            ClassCounts(["A", "B"], [1, 2], [3, 3], 4)

    def test_csv_round_trip(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            t = build_weight_table(official_class_counts(), WeightConfig(beta=0.9998))
        text = t.to_csv()
        assert text.splitlines()[0] == ("pattern,positives,negatives,alpha_raw,alpha_norm,"
                                        "omega_pos,omega_neg_raw,omega_neg")
        assert [ln.split(",")[0] for ln in text.splitlines()[1:]] == list(t.pattern_names)
        back = read_weight_table_csv(text)
        np.testing.assert_array_equal(back.omega_neg, t.omega_neg)
        np.testing.assert_array_equal(back.alpha_raw, t.alpha_raw)
        assert back.to_csv() == text

    def test_tables_are_immutable(self):
        t = WeightTable.uniform(3)
        with pytest.raises(ValueError):
            t.omega_pos[0] = 2.0


counts_strategy = st.lists(st.integers(1, 200000), min_size=1, max_size=20)


@settings(max_examples=200, deadline=None)
@given(counts_strategy, st.floats(0.0, 1 - 1e-9), st.floats(0.0, 1.0))
def test_properties(pos, beta, floor):
    total = max(pos) + 10
    counts = ClassCounts.from_positives([f"c{i}" for i in range(len(pos))], pos, total)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t = build_weight_table(counts, WeightConfig(beta=beta, negative_floor=floor))
    assert math.fsum(t.alpha_norm) == pytest.approx(len(pos), rel=1e-9)
    assert (t.alpha_raw > 0).all()
    np.testing.assert_array_equal(t.omega_pos, t.alpha_norm)
    keep = t.omega_neg_raw >= floor
    np.testing.assert_array_equal(t.omega_neg[keep], t.omega_neg_raw[keep])
    np.testing.assert_array_equal(t.omega_neg[~keep], floor)


def test_uniform_limit_at_beta_zero():
    counts = official_class_counts()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t = build_weight_table(counts, WeightConfig(beta=0.0))
    np.testing.assert_array_equal(t.alpha_raw, 1.0)


def test_inverse_frequency_limit():
    # alpha * n = 1 + (n - 1)(1 - beta)/2 + O((n(1 - beta))^2), so the spread
    # across counts shrinks linearly as beta -> 1.
    counts = official_class_counts()
    n = counts.positives.astype(float)
    for d in (1e-9, 1e-12):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            t = build_weight_table(counts, WeightConfig(beta=1 - d))
        prod = t.alpha_raw * n
        np.testing.assert_allclose(prod, 1 + (n - 1) * d / 2, rtol=1e-9)
    assert prod.max() / prod.min() - 1 < 1e-6
