import numpy as np
import pytest

from hstrees import densities as dens
from hstrees import dynamics as dyn
from hstrees import mc

BOX = dyn.Box((1.0, 1.0, 1.0), 0.1)


def measure_perturbed(N=3, lam=0.3, variant="perturbed"):
    return dens.InitialMeasure(variant=variant, beta=1.0, N=N, lam=lam,
                               wavevector=(1, 0, 0))


def admissible_config(rng, n, box, beta=1.0):
    while True:
        q = rng.uniform(box.a / 2, box.L - box.a / 2, size=(n, 3))
        z = dyn.Configuration(q, rng.normal(scale=beta ** -0.5, size=(n, 3)))
        if dyn.is_admissible(z, box):
            return z


class TestDensity:
    def test_h_beta_normalized(self):
        # grid check of unit mass in one momentum component triple
        rng = np.random.default_rng(0)
        p = rng.normal(size=(200000, 3))
        # importance check: E[h_beta(p)/gauss(p)] = 1 with gauss = h_1
        vals = dens.h_beta(p, 2.0) / dens.h_beta(p, 1.0)
        assert abs(vals.mean() - 1) < 3 * vals.std() / np.sqrt(len(vals))

    def test_inadmissible_zero(self):
        m = measure_perturbed(N=2)
        z = dyn.Configuration([[0.5, 0.5, 0.5], [0.55, 0.5, 0.5]],
                              np.zeros((2, 3)))
        assert m.density_f0(z, BOX) == 0.0

    def test_equilibrium_position_independent(self):
        m = dens.InitialMeasure(variant="equilibrium", beta=1.0, N=2)
        rng = np.random.default_rng(1)
        p = rng.normal(size=(2, 3))
        z1 = dyn.Configuration([[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]], p)
        z2 = dyn.Configuration([[0.3, 0.6, 0.4], [0.7, 0.2, 0.6]], p)
        assert m.density_f0(z1, BOX) == pytest.approx(m.density_f0(z2, BOX))

    def test_lambda_zero_matches_equilibrium(self):
        m0 = dens.InitialMeasure(variant="equilibrium", beta=1.0, N=2)
        m1 = measure_perturbed(N=2, lam=0.0)
        rng = np.random.default_rng(2)
        for _ in range(10):
            z = admissible_config(rng, 2, BOX)
            assert m1.density_f0(z, BOX) == pytest.approx(
                m0.density_f0(z, BOX))

    def test_permutation_symmetry_exact(self):
        m = measure_perturbed(N=3)
        rng = np.random.default_rng(3)
        for _ in range(10):
            z = admissible_config(rng, 3, BOX)
            perm = rng.permutation(3)
            zp = dyn.Configuration(z.q[perm], z.p[perm])
            assert m.density_f0(z, BOX) == pytest.approx(
                m.density_f0(zp, BOX), rel=1e-12)

    def test_envelope(self):
        m = measure_perturbed(N=3, lam=0.3)
        rng = np.random.default_rng(4)
        bound = (1 + 0.3) ** 3
        for _ in range(50):
            z = admissible_config(rng, 3, BOX)
            f = m.density_f0(z, BOX)
            assert f <= bound * np.prod(dens.h_beta(z.p, 1.0)) * (1 + 1e-12)

    def test_rough_variant_bounded(self):
        m = measure_perturbed(N=2, variant="perturbed_rough")
        rng = np.random.default_rng(5)
        for _ in range(20):
            z = admissible_config(rng, 2, BOX)
            f = m.density_f0(z, BOX) / np.prod(dens.h_beta(z.p, 1.0))
            assert 0 < f <= (1 + 0.3) ** 2 + 1e-12


class TestCalibration:
    def test_deterministic(self):
        m1 = measure_perturbed(N=2)
        m2 = measure_perturbed(N=2)
        e1 = m1.calibrate(BOX, n_samples=20000, seed=5)
        e2 = m2.calibrate(BOX, n_samples=20000, seed=5)
        assert e1.value == e2.value

    def test_equilibrium_norm_is_free_volume(self):
        # lam = 0: Z equals the admissible-position volume; for N=1
        # there is no exclusion so the estimate is exact
        m = dens.InitialMeasure(variant="equilibrium", beta=1.0, N=1)
        est = m.calibrate(BOX, n_samples=1000, seed=6)
        assert est.value == pytest.approx((1 - 0.1) ** 3)
        assert est.stderr == pytest.approx(0.0, abs=1e-12)


class TestRho0:
    def test_n_equals_N_deterministic(self):
        m = measure_perturbed(N=2)
        m.calibrate(BOX, n_samples=20000, seed=7)
        rng = np.random.default_rng(8)
        z = admissible_config(rng, 2, BOX)
        est = dens.rho0_oracle(m, z, BOX, seed=9)
        expect = (2 * m.density_f0(z, BOX) / m.norm.value)
        assert est.value == pytest.approx(expect)

    def test_n_above_N_zero(self):
        m = measure_perturbed(N=2)
        rng = np.random.default_rng(10)
        z = admissible_config(rng, 3, BOX)
        est = dens.rho0_oracle(m, z, BOX, seed=11)
        assert est.value == 0.0 and est.stderr == 0.0

    def test_ideal_gas_limit(self):
        # tiny spheres: rho_1^0 ~ (N/|box|) h_beta(p)
        box = dyn.Box((1.0, 1.0, 1.0), 0.02)
        m = dens.InitialMeasure(variant="equilibrium", beta=1.0, N=3)
        m.calibrate(box, n_samples=40000, seed=12)
        z = dyn.Configuration([[0.5, 0.5, 0.5]], [[0.3, -0.2, 0.1]])
        est = dens.rho0_oracle(m, z, box, n_samples=40000, seed=13)
        # centers live in the margin-shrunk box of volume (L - a)^3
        ideal = 3.0 / (1 - 0.02) ** 3 * dens.h_beta(z.p[0], 1.0)
        assert abs(est.value - ideal) < 3 * est.stderr + 0.01 * ideal

    def test_normalization_self_consistency(self):
        # E over z_1 of rho_1^0 / N equals 1
        m = measure_perturbed(N=3)
        m.calibrate(BOX, n_samples=50000, seed=14)
        vol = float(np.prod(BOX.L - BOX.a))

        def one(rng, idx):
            q1 = rng.uniform(BOX.a / 2, BOX.L - BOX.a / 2,
                             size=(1, 3))
            v, rej = dens.rho0_point_sample(m, rng, q1, 1.0, BOX)
            return vol * v / 3.0, rej

        est = mc.run_samples(one, 40000, seed=15, tag="selfnorm")
        assert abs(est.value - 1.0) < 3 * np.hypot(
            est.stderr, m.norm.stderr / m.norm.value)

    def test_grand_canonical_uniform(self):
        m = dens.InitialMeasure(variant="grand_canonical", beta=1.0,
                                activity=2.0, n_max=4)
        m.calibrate(BOX, n_samples=20000, seed=16)
        p = np.array([[0.1, 0.2, -0.3]])
        z1 = dyn.Configuration([[0.3, 0.4, 0.5]], p)
        z2 = dyn.Configuration([[0.7, 0.5, 0.6]], p)
        e1 = dens.rho0_oracle(m, z1, BOX, n_samples=40000, seed=17)
        e2 = dens.rho0_oracle(m, z2, BOX, n_samples=40000, seed=18)
        assert abs(e1.value - e2.value) < 3 * np.hypot(e1.stderr, e2.stderr)


class TestConditional:
    def test_equilibrium_weights_unit(self):
        m = dens.InitialMeasure(variant="equilibrium", beta=1.0, N=3)
        rng = np.random.default_rng(19)
        z = admissible_config(rng, 1, BOX)
        for _ in range(20):
            qy, py, w, tries = dens.sample_conditional(m, z, 2, BOX, rng)
            assert w == 1.0
            assert dens._completion_admissible(qy, z.q, BOX)

    def test_packing_too_tight(self):
        box = dyn.Box((1.0, 1.0, 1.0), 0.45)
        m = dens.InitialMeasure(variant="equilibrium", beta=1.0, N=4)
        rng = np.random.default_rng(20)
        z = dyn.Configuration([[0.5, 0.5, 0.5]], [[0, 0, 0]])
        with pytest.raises(dens.PackingTooTight):
            for _ in range(50):
                dens.sample_conditional(m, z, 3, box, rng, max_tries=20)
