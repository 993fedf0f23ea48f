import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochctm.flux import CBParams, ChanutBuissonFlux, DaganzoFlux, DaganzoParams
from stochctm.model import (
    SegmentConfig,
    StateSpaceError,
    assemble_rates,
    boundary_from_index,
    boundary_index,
    cell_from_index,
    cell_index,
    check_state,
    drift,
    drift_jacobian,
    drift_matrix_form,
    kink_distance,
    rate_jacobian,
    structure_matrices,
)

VAL = DaganzoFlux(DaganzoParams(v_f=100.0, w=20.0, q_max=1800.0, rho_jam=105.0))
CB = ChanutBuissonFlux(CBParams(v_f1=108.0, v_f2=79.2, v_c=61.2, L1=0.0065, L2=0.0165, N=3, beta=0.25))


def validation_config(rho=(70.0, 90.0, 40.0), lam=0.0, nu=900.0, ell=1.0):
    return SegmentConfig((ell,) * 3, (VAL,), (lam,), (nu,), list(rho), ("car",))


def cb_config(d=4, rho=None, lam=(1000.0, 200.0), nu=(3000.0, 600.0)):
    if rho is None:
        rho = np.tile([40.0, 10.0], d)
    return SegmentConfig((0.6,) * d, (CB,), lam, nu, rho, ("car", "truck"))


def random_cb_cells(rng, d, hi=0.95):
    out = []
    for _ in range(d):
        occ = rng.uniform(0, hi) * 3
        share = rng.uniform()
        out += [occ * (1 - share) / 0.0065, occ * share / 0.0165]
    return np.array(out)


class TestSegmentConfig:
    def test_shared_model_broadcast(self):
        cfg = validation_config()
        assert len(cfg.models) == 4 and cfg.d == 3 and cfg.m == 1

    def test_jam_counts_floor(self):
        cfg = validation_config(ell=0.7)
        np.testing.assert_array_equal(cfg.jam_counts, [73, 73, 73])  # floor(105 * 0.7)
        assert cb_config().jam_counts.tolist() == [276, 109] * 4  # floor(3/L_j * 0.6)

    def test_initial_counts(self):
        assert validation_config(ell=10.0).initial_counts.tolist() == [700, 900, 400]

    @pytest.mark.parametrize(
        "kw",
        [
            dict(lengths=()), dict(lengths=(1.0, 0.0, 1.0)), dict(arrival_rates=(-1.0,)),
            dict(initial_density=[1.0, 2.0]), dict(initial_density=[70.0, 200.0, 0.0]),
            dict(models=(VAL, VAL)),
        ],
    )
    def test_invalid(self, kw):
        base = dict(lengths=(1.0,) * 3, models=(VAL,), arrival_rates=(0.0,), departure_rates=(900.0,),
                    initial_density=[70.0, 90.0, 40.0])
        with pytest.raises(ValueError):
            SegmentConfig(**{**base, **kw})

    def test_equality(self):
        assert validation_config() == validation_config()
        assert validation_config() != validation_config(nu=800.0)
        assert validation_config() != validation_config(rho=(70.0, 90.0, 41.0))

    def test_frozen_density(self):
        cfg = validation_config()
        with pytest.raises(ValueError):
            cfg.initial_density[0] = 1.0

    def test_cfl(self):
        assert validation_config(ell=2.0).cfl_bound() == pytest.approx(0.02)


class TestIndexMaps:
    def test_examples(self):
        assert cell_index(1, 1, 2) == 0
        assert cell_index(2, 1, 2) == 2
        assert boundary_index(0, 1, 2) == 0
        assert boundary_index(3, 2, 2) == 7

    @pytest.mark.parametrize("m,d", [(1, 3), (2, 5), (3, 2)])
    def test_round_trip(self, m, d):
        cells = [cell_index(i, j, m, d) for i in range(1, d + 1) for j in range(1, m + 1)]
        assert cells == list(range(d * m))
        assert all(cell_index(*cell_from_index(k, m, d), m, d) == k for k in cells)
        bounds = [boundary_index(i, j, m, d) for i in range(d + 1) for j in range(1, m + 1)]
        assert bounds == list(range((d + 1) * m))
        assert all(boundary_index(*boundary_from_index(k, m, d), m, d) == k for k in bounds)

    @pytest.mark.parametrize(
        "call",
        [lambda: cell_index(0, 1, 1), lambda: cell_index(4, 1, 1, 3), lambda: cell_index(1, 3, 2),
         lambda: boundary_index(-1, 1, 1), lambda: boundary_index(4, 1, 1, 3),
         lambda: cell_from_index(6, 2, 3), lambda: boundary_from_index(-1, 1)],
    )
    def test_out_of_range(self, call):
        with pytest.raises(IndexError):
            call()


class TestRates:
    def test_validation_scenario(self):
        q = assemble_rates(validation_config(), np.array([70.0, 90.0, 40.0]))
        # hand evaluation: S(70)=1800, R(90)=300, S(90)=1800, R(40)=1300, S(40)=1800
        np.testing.assert_allclose(q, [0.0, 300.0, 1300.0, 900.0], rtol=1e-15)

    def test_empty_segment(self):
        cfg = validation_config(rho=(0.0, 0.0, 0.0))
        np.testing.assert_array_equal(assemble_rates(cfg, np.zeros(3)), np.zeros(4))

    def test_jammed_first_cell_blocks_arrivals(self):
        cfg = validation_config(rho=(105.0, 0.0, 0.0), lam=1500.0)
        assert assemble_rates(cfg, cfg.initial_density)[0] == 0.0
        cfgcb = cb_config(rho=[3 / 0.0065, 0.0] + [0.0] * 6)
        np.testing.assert_allclose(assemble_rates(cfgcb, cfgcb.initial_density)[:2], 0.0, atol=1e-9)

    def test_state_space_violation(self):
        with pytest.raises(StateSpaceError):
            assemble_rates(validation_config(), np.array([70.0, 106.0, 40.0]))
        with pytest.raises(StateSpaceError):
            check_state(cb_config(), np.array([450.0, 20.0] + [0.0] * 6))  # occupancy 3.255 > 3

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_zero_cases_cb(self, seed):
        rng = np.random.default_rng(seed)
        d = 4
        rho = random_cb_cells(rng, d, 1.0)
        empty = rng.integers(d)
        rho[2 * empty : 2 * empty + 2] = 0.0
        cfg = cb_config(d, rho)
        q = assemble_rates(cfg, rho).reshape(d + 1, 2)
        assert np.all(q >= 0)
        np.testing.assert_array_equal(q[empty + 1], 0.0)  # empty sender

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 105), min_size=3, max_size=3), st.integers(0, 2))
    def test_zero_cases_daganzo(self, rho, full):
        rho = np.array(rho)
        rho[full] = 105.0
        cfg = validation_config(rho=rho, lam=1500.0)
        q = assemble_rates(cfg, rho)
        assert np.all(q >= 0) and q[full] == 0.0  # full receiver

    def test_boundary_dependent_models(self):
        slow = DaganzoFlux(DaganzoParams(v_f=50.0, w=20.0, q_max=900.0, rho_jam=105.0))
        cfg = SegmentConfig((1.0,) * 3, (VAL, VAL, slow, VAL), (0.0,), (900.0,), [10.0, 10.0, 10.0])
        q = assemble_rates(cfg, cfg.initial_density)
        np.testing.assert_allclose(q, [0.0, 1000.0, 500.0, 900.0])


class TestDrift:
    def test_matrix_form_bit_identical(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            rho = random_cb_cells(rng, 5)
            cfg = cb_config(5, rho)
            np.testing.assert_array_equal(drift(cfg, rho), drift_matrix_form(cfg, rho))
        cfg = validation_config()
        np.testing.assert_array_equal(drift(cfg, cfg.initial_density), drift_matrix_form(cfg, cfg.initial_density))

    def test_componentwise(self):
        cfg = validation_config(ell=2.0)
        q = assemble_rates(cfg, cfg.initial_density)
        np.testing.assert_array_equal(drift(cfg, cfg.initial_density), [(q[i] - q[i + 1]) / 2.0 for i in range(3)])

    def test_steady_flow(self):
        cfg = validation_config(rho=(9.0, 9.0, 9.0), lam=900.0, nu=1800.0)
        np.testing.assert_array_equal(drift(cfg, cfg.initial_density), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_mass_balance(self, seed):
        rng = np.random.default_rng(seed)
        d = 5
        rho = random_cb_cells(rng, d)
        cfg = SegmentConfig(tuple(rng.uniform(0.2, 2.0, d)), (CB,), (900.0, 100.0), (2000.0, 500.0), rho)
        q = assemble_rates(cfg, rho).reshape(d + 1, 2)
        mass = (np.repeat(cfg.lengths, 2) * drift(cfg, rho)).reshape(d, 2).sum(axis=0)
        np.testing.assert_allclose(mass, q[0] - q[d], atol=1e-9 * max(1.0, np.abs(q).max()))

    def test_structure_matrices(self):
        cfg = cb_config(3)
        H, L = structure_matrices(cfg)
        assert H.shape == (6, 8) and L.shape == (6, 6)
        assert np.all((H == 1).sum(axis=0) <= 1) and np.all((H == -1).sum(axis=0) <= 1)
        np.testing.assert_array_equal(np.diag(L), np.full(6, 1 / 0.6))


def fd_jacobian(f, x, h=1e-4):
    cols = []
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        cols.append((f(xp) - f(xm)) / (2 * h))
    return np.array(cols).T


class TestJacobians:
    def test_rate_and_drift_jacobian_cb(self):
        rng = np.random.default_rng(8)
        done = 0
        while done < 30:
            rho = random_cb_cells(rng, 4, 0.9)
            cfg = cb_config(4, rho)
            if rho.min() < 1e-2 or kink_distance(cfg, rho) < 1e-2:
                continue
            np.testing.assert_allclose(
                rate_jacobian(cfg, rho), fd_jacobian(lambda x: assemble_rates(cfg, x, check=False), rho),
                rtol=1e-5, atol=1e-6,
            )
            np.testing.assert_allclose(
                drift_jacobian(cfg, rho), fd_jacobian(lambda x: drift(cfg, x, check=False), rho),
                rtol=1e-5, atol=1e-6,
            )
            done += 1

    def test_drift_jacobian_daganzo(self):
        cfg = validation_config()
        rho = np.array([70.0, 90.0, 40.0])
        expect = fd_jacobian(lambda x: drift(cfg, x, check=False), rho)
        np.testing.assert_allclose(drift_jacobian(cfg, rho), expect, rtol=1e-5, atol=1e-9)

    def test_kink_distance(self):
        cfg = validation_config()
        # nearest kink: the receiving corner rho_jam - q_max / w = 15 seen from cell 3 at 40
        assert kink_distance(cfg, np.array([70.0, 90.0, 40.0])) == pytest.approx(25.0)
        # outflow cap S(rho) meets nu = 900 at rho = 9
        assert kink_distance(cfg, np.array([0.0, 0.0, 9.0])) == pytest.approx(0.0)
