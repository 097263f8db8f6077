import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afttest.data import BINARY
from afttest.errors import BinaryCovariateForCovform, IndexOutOfRange, UnknownCovariate
from afttest.estimation import fit, residual_times
from afttest.gof import (
    TestType,
    anchor_order,
    build_design,
    exponential_multipliers,
    mammen_multipliers,
    poisson_multipliers,
    multiplier_term,
    observed_process,
    path_rng,
    resolve_multipliers,
    perturbed_process,
    resample_many,
    resample_paths,
    run_afttest,
    standardize,
    supremum_pvalues,
)

from conftest import random_dataset
from oracles import brute_observed


def ones(rng, n):
    return np.ones(n)


def brute_multiplier_term(design, xi):
    """sum_i psi_i sum_{s <= t} (pi_i(z) - pibar(z, s)) dM_i(s), loop form."""
    n = design.n
    psi = xi - 1
    dm = np.diff(design.mhat, axis=1, prepend=0.0)
    out = np.zeros((n, n))
    for j in range(n):
        for k in range(n):
            out[j, k] = sum(psi[i] * (design.pi[j, i] - design.pibar[j, s]) * dm[i, s]
                            for i in range(n) for s in range(k + 1))
    return out / np.sqrt(n)


class TestObservedProcess:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 3), st.integers(0, 2**32 - 1),
           st.sampled_from(["omnibus", "link", "covform"]))
    def test_matches_brute_force(self, n, p, seed, kind):
        rng = np.random.default_rng(seed)
        d = random_dataset(rng, n, p)
        # coarse values force ties in both covariates and residuals
        d = d.with_covariates(np.round(d.covariates, 1))
        beta = rng.normal(size=p)
        test = TestType(kind, 1 if kind == "covform" else None)
        got = observed_process(test, beta, d)
        np.testing.assert_allclose(got, brute_observed(kind, beta, d), rtol=0, atol=1e-12)

    def test_shapes(self):
        d = random_dataset(np.random.default_rng(0), 15, 2)
        beta = np.zeros(2)
        assert observed_process(TestType("omnibus"), beta, d).shape == (15, 15)
        assert observed_process(TestType("link"), beta, d).shape == (15,)
        assert observed_process(TestType("covform", 2), beta, d).shape == (15,)

    def test_identities(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            d = random_dataset(rng, 25, 3)
            beta = rng.normal(size=3)
            omni = observed_process(TestType("omnibus"), beta, d)
            link = observed_process(TestType("link"), beta, d)
            np.testing.assert_allclose(omni[:, -1], link, rtol=0, atol=1e-12)
            # the last anchor in canonical order need not dominate every point,
            # but the componentwise maximum covers all subjects
            zmax_rows = np.flatnonzero(np.all(d.covariates[anchor_order(d.covariates)]
                                              >= d.covariates.max(axis=0), axis=1))
            for j in zmax_rows:
                assert abs(link[j]) <= 1e-10
            cov = observed_process(TestType("covform", 2), beta, d)
            assert abs(cov[-1]) <= 1e-10

    def test_covform_equals_link_for_one_covariate(self):
        rng = np.random.default_rng(2)
        d = random_dataset(rng, 30, 1)
        beta = np.array([0.7])
        np.testing.assert_allclose(observed_process(TestType("covform", 1), beta, d),
                                   observed_process(TestType("link"), beta, d),
                                   rtol=0, atol=1e-12)

    def test_smallest_anchor_is_small(self):
        rng = np.random.default_rng(4)
        d = random_dataset(rng, 200, 1)
        link = observed_process(TestType("link"), np.array([1.0]), d)
        assert abs(link[0]) < 0.1 * np.max(np.abs(link))

    def test_binary_covform_rejected(self):
        d = random_dataset(np.random.default_rng(5), 20, 2, binary_last=True)
        assert d.kinds[-1] == BINARY
        with pytest.raises(BinaryCovariateForCovform):
            observed_process(TestType("covform", 2), np.zeros(2), d)

    def test_index_out_of_range(self):
        d = random_dataset(np.random.default_rng(5), 20, 2)
        with pytest.raises(IndexOutOfRange):
            observed_process(TestType("covform", 3), np.zeros(2), d)

    def test_unknown_test_type(self):
        with pytest.raises(ValueError):
            TestType("bogus")


@pytest.fixture(scope="module")
def small():
    d = random_dataset(np.random.default_rng(11), 40, 2)
    return d, fit(d, "rr", "ns")


@pytest.fixture(scope="module")
def d40():
    return random_dataset(np.random.default_rng(21), 40, 2)


class TestResampling:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 2**32 - 1))
    def test_multiplier_term_brute_force(self, n, seed):
        rng = np.random.default_rng(seed)
        d = random_dataset(rng, n, 2)
        design = build_design(TestType("omnibus"), rng.normal(size=2), d)
        xi = rng.exponential(size=n)
        np.testing.assert_allclose(multiplier_term(design, xi),
                                   brute_multiplier_term(design, xi), rtol=0, atol=1e-12)
        link = build_design(TestType("link"), design.beta, d)
        np.testing.assert_allclose(multiplier_term(link, xi),
                                   multiplier_term(design, xi)[:, -1], rtol=0, atol=1e-12)

    def test_unit_multipliers_give_zero_paths(self, small):
        d, f = small
        for plugin in ("regression", "recompute"):
            res = resample_paths(TestType("omnibus"), f, d, npath=10, multipliers=ones,
                                 plugin=plugin)
            np.testing.assert_array_equal(res.betas, np.tile(f.beta, (10, 1)))
            np.testing.assert_allclose(res.paths, 0.0, atol=1e-12)

    def test_recompute_is_sum_of_terms(self, small):
        d, f = small
        test = TestType("link")
        res = resample_paths(test, f, d, npath=10, seed=3, plugin="recompute")
        design = build_design(test, f.beta, d)
        xi = poisson_multipliers(path_rng(3, 0), d.n)
        np.testing.assert_allclose(res.paths[0],
                                   perturbed_process(design, xi, res.betas[0], d), atol=1e-12)

    def test_regression_tracks_recompute(self, small):
        d, f = small
        test = TestType("link")
        reg = resample_paths(test, f, d, npath=60, seed=5)
        rec = resample_paths(test, f, d, npath=60, seed=5, plugin="recompute")
        np.testing.assert_array_equal(reg.betas, rec.betas)
        # the linear part explains most of the path-to-path variation
        resid = np.sum((reg.paths - rec.paths) ** 2)
        total = np.sum((rec.paths - rec.paths.mean(axis=0)) ** 2)
        assert resid < 0.5 * total
        assert reg.slope.shape == (2, d.n)

    def test_seed_streams(self, small):
        d, f = small
        a = resample_paths(TestType("link"), f, d, npath=12, seed=1)
        b = resample_paths(TestType("link"), f, d, npath=12, seed=1)
        c = resample_paths(TestType("link"), f, d, npath=12, seed=2)
        np.testing.assert_array_equal(a.paths, b.paths)
        assert not np.array_equal(a.betas, c.betas)
        np.testing.assert_array_equal(a.path_index, np.arange(12))

    def test_worker_count_does_not_change_paths(self, small):
        d, f = small
        designs = [build_design(TestType(k), f.beta, d) for k in ("omnibus", "covform")]
        one = resample_many(designs, f, d, npath=12, seed=9, workers=1)
        two = resample_many(designs, f, d, npath=12, seed=9, workers=2)
        for a, b in zip(one, two):
            np.testing.assert_array_equal(a.paths, b.paths)
            np.testing.assert_array_equal(a.betas, b.betas)

    def test_many_matches_single(self, small):
        d, f = small
        tests = [TestType("link"), TestType("covform", 1)]
        many = resample_many([build_design(t, f.beta, d) for t in tests], f, d, npath=10, seed=4)
        for t, m in zip(tests, many):
            single = resample_paths(t, f, d, npath=10, seed=4)
            np.testing.assert_array_equal(single.paths, m.paths)

    def test_bad_plugin(self, small):
        d, f = small
        with pytest.raises(ValueError):
            resample_paths(TestType("link"), f, d, npath=10, plugin="bogus")


class TestMultipliers:
    @pytest.mark.parametrize("draw, third", [(mammen_multipliers, 1.0),
                                             (exponential_multipliers, 2.0),
                                             (poisson_multipliers, 1.0)])
    def test_moments(self, draw, third):
        xi = draw(np.random.default_rng(0), 400_000)
        psi = xi - 1
        assert np.all(xi >= 0)
        assert abs(psi.mean()) < 0.01 and abs(psi.var() - 1) < 0.02
        assert abs(np.mean(psi ** 3) - third) < 0.1

    def test_mammen_support(self):
        xi = mammen_multipliers(np.random.default_rng(1), 1000)
        np.testing.assert_allclose(np.unique(xi), [(3 - np.sqrt(5)) / 2, (3 + np.sqrt(5)) / 2])

    def test_poisson_support(self):
        xi = poisson_multipliers(np.random.default_rng(1), 1000)
        np.testing.assert_array_equal(xi, np.round(xi))
        assert xi.min() == 0

    def test_resolve(self):
        assert resolve_multipliers(None) is poisson_multipliers
        assert resolve_multipliers("mammen") is mammen_multipliers
        assert resolve_multipliers("exponential") is exponential_multipliers
        assert resolve_multipliers(ones) is ones
        with pytest.raises(ValueError):
            resolve_multipliers("normal")

    def test_named_law_changes_paths(self, small):
        d, f = small
        a = resample_paths(TestType("link"), f, d, npath=10, seed=1)
        b = resample_paths(TestType("link"), f, d, npath=10, seed=1, multipliers="exponential")
        c = resample_paths(TestType("link"), f, d, npath=10, seed=1, multipliers="poisson")
        np.testing.assert_array_equal(a.paths, c.paths)
        assert not np.array_equal(a.paths, b.paths)


class TestStandardize:
    def test_two_paths(self):
        a = 1.7
        obs_std, paths_std, se = standardize(np.array([a]), np.array([[a], [-a]]))
        assert se[0] == pytest.approx(a * np.sqrt(2))
        assert obs_std[0] == pytest.approx(a / (a * np.sqrt(2)))
        np.testing.assert_allclose(paths_std[:, 0], [1 / np.sqrt(2), -1 / np.sqrt(2)])

    def test_degenerate_se(self):
        obs_std, paths_std, se = standardize(np.array([3.0, 1.0]),
                                             np.array([[0.0, 1.0], [0.0, -1.0]]))
        assert se[0] == 0 and obs_std[0] == 0
        np.testing.assert_array_equal(paths_std[:, 0], 0.0)
        assert np.all(se >= 0)


class TestPvalues:
    def test_counting(self):
        obs = np.array([2.0, -1.0])
        paths = np.array([[1.0, 0.0], [0.0, -2.5], [3.0, 0.0], [1.5, 1.0]])
        assert supremum_pvalues(obs, paths, obs, paths) == (0.5, 0.5)

    def test_observed_beyond_all_paths(self):
        paths = np.ones((200, 3))
        p, _ = supremum_pvalues(np.full(3, 5.0), paths, np.zeros(3), paths)
        assert p == 0.0

    def test_zero_observed(self):
        paths = np.random.default_rng(0).normal(size=(10, 4))
        assert supremum_pvalues(np.zeros(4), paths, np.zeros(4), paths) == (1.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        obs, paths = rng.normal(size=6), rng.normal(size=(20, 6))
        o1, p1, _ = standardize(obs, paths)
        o2, p2, _ = standardize(c * obs, c * paths)
        assert supremum_pvalues(obs, paths, o1, p1) == supremum_pvalues(c * obs, c * paths, o2, p2)


class TestRunAfttest:
    @pytest.fixture
    def d(self, d40):
        return d40

    def test_npath_raised_to_ten(self, d):
        r = run_afttest(d, "link", npath=5, npathsave=50)
        assert r.npath == 10 and r.npath_effective == 10
        assert r.apprx_process.shape == (10, 40)
        assert r.p_value * 10 == pytest.approx(round(r.p_value * 10))

    def test_stored_paths_and_shapes(self, d):
        r = run_afttest(d, "omnibus", npath=12, npathsave=3, seed=2)
        assert r.apprx_process.shape == (3, 40, 40)
        assert r.apprx_std_process.shape == (3, 40, 40)
        assert r.SE_process.shape == r.obs_process.shape == (40, 40)
        assert 0 <= r.p_value <= 1 and 0 <= r.p_std_value <= 1

    def test_cov_tested_by_name(self, d):
        r = run_afttest(d, "covform", cov_tested="z2", npath=10)
        assert r.cov_tested == 2 and r.cov_name == "z2"
        with pytest.raises(UnknownCovariate):
            run_afttest(d, "covform", cov_tested="nope", npath=10)

    def test_precomputed_fit(self, d):
        f = fit(d, "rr", "ns")
        a = run_afttest(d, "link", npath=10, seed=3, fit_result=f)
        b = run_afttest(d, "link", npath=10, seed=3)
        assert (a.p_value, a.p_std_value) == (b.p_value, b.p_std_value)

    def test_ls_and_is(self, d):
        for est, eq in (("ls", "ns"), ("rr", "is")):
            r = run_afttest(d, "link", est_method=est, eq_type=eq, npath=10)
            assert r.eq_type == (eq if est == "rr" else None)
            assert r.npath_effective == 10

    def test_invalid_method(self, d):
        with pytest.raises(ValueError):
            run_afttest(d, "link", est_method="xx")
        with pytest.raises(ValueError):
            run_afttest(d, "link", eq_type="xx")

    def test_anchor_order(self):
        z = np.array([[1.0, 2.0], [0.0, 5.0], [1.0, 1.0], [0.0, 5.0]])
        np.testing.assert_array_equal(anchor_order(z), [1, 3, 2, 0])

    def test_residual_grid_matches_fit(self, d):
        f = fit(d, "rr", "ns")
        design = build_design(TestType("omnibus"), f.beta, d)
        e = residual_times(f.beta, d)
        np.testing.assert_array_equal(design.grid[:-1], np.sort(e)[:-1])
        assert design.grid[-1] == np.inf
