import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochctm.flux import (
    CBParams,
    ChanutBuissonFlux,
    DaganzoFlux,
    DaganzoParams,
    DegenerateInputError,
    DomainError,
    Regime,
    cb_class_flows,
    cb_flux,
    cb_jam_density,
    cb_regime,
    cb_shock_speed,
    daganzo_flux,
    daganzo_receiving,
    daganzo_sending,
    flux_gradient,
    inflow_cap,
    model_from_dict,
    model_to_dict,
    outflow_cap,
)

FIG1 = DaganzoParams(v_f=60.0, w=12.0, q_max=1800.0, rho_jam=180.0)
VAL = DaganzoParams(v_f=100.0, w=20.0, q_max=1800.0, rho_jam=105.0)
CB = CBParams(v_f1=108.0, v_f2=79.2, v_c=61.2, L1=0.0065, L2=0.0165, N=3, beta=0.25)


# --------------------------------------------------------------------------
# Independent transcription of the two-class MFD using the jam-density form
# (the library works with occupancies instead).
# --------------------------------------------------------------------------

def oracle_jam(r1, r2, p=CB):
    return p.N / (r1 * p.L1 + r2 * p.L2) * (r1 + r2)


def oracle_state(r1, r2, p=CB):
    """(free?, q1, q2, v1, v2, Delta1, Delta2, Omega)."""
    e = p.L2 / p.L1
    C = p.v_c * p.beta * oracle_jam(1.0, 0.0, p)
    if r1 + r2 == 0:
        return True, 0.0, 0.0, p.v_f1, p.v_f2, 0.0, 0.0, C
    jam = oracle_jam(r1, r2, p)
    crit = p.beta * jam
    if r1 + r2 <= crit:
        v1 = p.v_f1 - (p.v_f1 - p.v_c) * (r1 + r2) / crit
        v2 = p.v_f2 - (p.v_f2 - p.v_c) * (r1 + r2) / crit
        return True, r1 * v1, r2 * v2, v1, v2, r1 * v1, r2 * v2, C
    qpce = C * (jam - (r1 + r2)) / (jam - crit)
    v = qpce / (r1 + e * r2)
    pce = r1 + e * r2
    return False, r1 * v, r2 * v, v, v, r1 / pce * C, r2 / pce * C, pce * v


def oracle_flux(up, dn, p=CB):
    e = p.L2 / p.L1
    fu, fd = oracle_state(*up, p), oracle_state(*dn, p)
    if fu[0] and not fd[0]:
        den = (up[0] + e * up[1]) - (dn[0] + e * dn[1])
        s = ((fu[1] + e * fu[2]) - (fd[1] + e * fd[2])) / den if den != 0 else 0.0
        if s < 0:
            v = fd[3]
            return np.array([v * (fu[1] - s * up[0]) / (v - s), v * (fu[2] - s * up[1]) / (v - s)])
    delta_u = fu[5] + e * fu[6]
    if delta_u <= fd[7]:
        return np.array([fu[5], fu[6]])
    pce = up[0] + e * up[1]
    return np.array([up[0] / pce * fd[7], up[1] / pce * fd[7]])


def cb_states(max_occ=1.0):
    @st.composite
    def draw(draw_):
        occ = draw_(st.floats(0.0, max_occ)) * CB.N
        share = draw_(st.floats(0.0, 1.0))
        # split the occupancy between cars and trucks
        return (occ * (1 - share) / CB.L1, occ * share / CB.L2)

    return draw()


def random_cb_state(rng, occ_hi=1.0):
    occ = rng.uniform(0, occ_hi) * CB.N
    share = rng.uniform()
    return np.array([occ * (1 - share) / CB.L1, occ * share / CB.L2])


class TestDaganzoScalar:
    def test_sending(self):
        assert daganzo_sending(0.0, VAL) == 0.0
        assert daganzo_sending(30.0, FIG1) == 1800.0
        assert daganzo_sending(70.0, VAL) == 1800.0

    def test_receiving(self):
        assert daganzo_receiving(VAL.rho_jam, VAL) == 0.0
        assert daganzo_receiving(180.0, FIG1) == 0.0
        assert daganzo_receiving(90.0, VAL) == pytest.approx(300.0, rel=1e-15)

    def test_flux(self):
        assert daganzo_flux(0.0, 50.0, VAL)[0] == 0.0
        assert daganzo_flux(30.0, 170.0, FIG1)[0] == pytest.approx(120.0, rel=1e-15)
        assert daganzo_flux(70.0, 90.0, VAL)[0] == pytest.approx(300.0, rel=1e-15)

    @pytest.mark.parametrize("rho", [-1e-9, 105.0 + 1e-6])
    def test_domain(self, rho):
        with pytest.raises(DomainError):
            daganzo_sending(rho, VAL)
        with pytest.raises(DomainError):
            daganzo_receiving(rho, VAL)

    @pytest.mark.parametrize(
        "kw",
        [dict(v_f=0.0), dict(w=-1.0), dict(w=120.0), dict(q_max=20000.0), dict(rho_jam=0.0)],
    )
    def test_parameter_invariants(self, kw):
        base = dict(v_f=100.0, w=20.0, q_max=1800.0, rho_jam=105.0)
        with pytest.raises(ValueError):
            DaganzoParams(**{**base, **kw})


class TestDaganzoModel:
    model = DaganzoFlux(VAL)

    def test_caps(self):
        assert inflow_cap(self.model, [70.0])[0] == pytest.approx(700.0)
        assert inflow_cap(self.model, [VAL.rho_jam])[0] == 0.0
        assert outflow_cap(self.model, [0.0])[0] == 0.0
        assert outflow_cap(self.model, [40.0])[0] == 1800.0

    def test_gradient_linear_branches(self):
        np.testing.assert_array_equal(flux_gradient(self.model, [5.0], [10.0]), [[VAL.v_f, 0.0]])
        np.testing.assert_array_equal(flux_gradient(self.model, [70.0], [100.0]), [[0.0, -VAL.w]])
        # capacity plateau on both sides
        np.testing.assert_array_equal(flux_gradient(self.model, [50.0], [10.0]), [[0.0, 0.0]])

    def test_gradient_kink_convention(self):
        # S = R = 300 at (3, 90): raising rho_up keeps R active, raising rho_dn lowers R
        g = flux_gradient(self.model, [3.0], [90.0])
        np.testing.assert_array_equal(g, [[0.0, -VAL.w]])
        assert np.abs(g).max() <= self.model.lipschitz_bound

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 105), st.floats(0, 105))
    def test_bounds_and_zero_cases(self, a, b):
        q = self.model.flux([a], [b])[0]
        assert 0.0 <= q <= VAL.q_max
        assert self.model.flux([0.0], [b])[0] == 0.0
        assert self.model.flux([a], [VAL.rho_jam])[0] == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 105), st.floats(0, 105), st.floats(0, 105), st.floats(0, 105))
    def test_lipschitz(self, a, b, c, d):
        dq = abs(self.model.flux([a], [b])[0] - self.model.flux([c], [d])[0])
        assert dq <= self.model.lipschitz_bound * math.hypot(a - c, b - d) * (1 + 1e-12) + 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 105), st.floats(0, 105), st.floats(0, 20))
    def test_monotone(self, a, b, step):
        f = lambda x, y: self.model.flux([x], [y])[0]
        assert f(min(a + step, 105), b) >= f(a, b)
        assert f(a, min(b + step, 105)) <= f(a, b)


class TestCBScalar:
    def test_jam_density(self):
        assert cb_jam_density(10.0, 0.0, CB) == pytest.approx(3 / 0.0065, rel=1e-14)
        assert cb_jam_density(10.0, 10.0, CB) == pytest.approx(60 / 0.23, rel=1e-14)
        assert 3 / 0.0065 == pytest.approx(461.54, abs=5e-3)

    def test_jam_density_degenerate(self):
        with pytest.raises(DegenerateInputError):
            cb_jam_density(0.0, 0.0, CB)

    @settings(max_examples=100, deadline=None)
    @given(cb_states(max_occ=0.9), st.floats(0.05, 1.1))
    def test_jam_density_homogeneous(self, rho, c):
        if sum(rho) <= 1e-6:
            return
        a = cb_jam_density(*rho, CB)
        assert cb_jam_density(c * rho[0], c * rho[1], CB) == pytest.approx(a, rel=1e-12)

    def test_regime(self):
        assert cb_regime(0.0, 0.0, CB) is Regime.FREE_FLOW
        assert cb_regime(60.0, 0.0, CB) is Regime.FREE_FLOW
        assert cb_regime(300.0, 30.0, CB) is Regime.CONGESTED
        assert 0.25 * 3 / 0.0065 == pytest.approx(115.38, abs=5e-3)

    def test_class_flows_free(self):
        f = cb_class_flows(60.0, 0.0, CB)
        assert f.v1 == pytest.approx(108 - 46.8 * 60 / (0.25 * 3 / 0.0065), rel=1e-13)
        assert f.v1 == pytest.approx(83.66, abs=5e-3)
        assert f.q1 == pytest.approx(5019.8, abs=5e-2)

    def test_class_flows_empty(self):
        f = cb_class_flows(0.0, 0.0, CB)
        assert (f.q1, f.q2, f.v1, f.v2) == (0.0, 0.0, CB.v_f1, CB.v_f2)

    def test_class_flows_congested(self):
        f = cb_class_flows(300.0, 30.0, CB)
        assert f.v1 == f.v2
        assert f.q1 / f.q2 == pytest.approx(10.0, rel=1e-14)

    @settings(max_examples=200, deadline=None)
    @given(cb_states())
    def test_class_flows_match_oracle(self, rho):
        f = cb_class_flows(*rho, CB)
        o = oracle_state(*rho)
        np.testing.assert_allclose([f.q1, f.q2, f.v1, f.v2], o[1:5], rtol=1e-10, atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(cb_states())
    def test_speed_properties(self, rho):
        f = cb_class_flows(*rho, CB)
        if cb_regime(*rho, CB) is Regime.FREE_FLOW:
            assert CB.v_c - 1e-9 <= f.v1 <= CB.v_f1 + 1e-9
            assert CB.v_c - 1e-9 <= f.v2 <= CB.v_f2 + 1e-9
        else:
            assert f.v1 == f.v2
            assert f.q1 * rho[1] == pytest.approx(f.q2 * rho[0], rel=1e-12, abs=1e-9)

    def test_shock_speed_zero_numerator(self):
        assert cb_shock_speed((10.0, 0.0, 500.0, 0.0), (20.0, 0.0, 500.0, 0.0), CB) == 0.0

    def test_shock_speed_brute_force(self):
        fu, fd = cb_class_flows(60.0, 0.0, CB), cb_class_flows(300.0, 30.0, CB)
        e = CB.L2 / CB.L1
        expect = ((fu.q1 + e * fu.q2) - (fd.q1 + e * fd.q2)) / ((60 + 0) - (300 + e * 30))
        s = cb_shock_speed((60.0, 0.0, fu.q1, fu.q2), (300.0, 30.0, fd.q1, fd.q2), CB)
        assert s == pytest.approx(expect, rel=1e-14)

    def test_shock_speed_sign(self):
        assert cb_shock_speed((10.0, 0.0, 900.0, 0.0), (20.0, 0.0, 500.0, 0.0), CB) < 0
        assert cb_shock_speed((10.0, 0.0, 900.0, 0.0), (5.0, 0.0, 500.0, 0.0), CB) > 0

    def test_shock_speed_degenerate(self):
        with pytest.raises(DegenerateInputError):
            cb_shock_speed((10.0, 0.0, 1.0, 0.0), (10.0, 0.0, 2.0, 0.0), CB)

    def test_domain(self):
        with pytest.raises(DomainError):
            cb_regime(-1.0, 0.0, CB)
        with pytest.raises(DomainError):
            cb_flux((500.0, 0.0), (0.0, 0.0), CB)

    @pytest.mark.parametrize(
        "kw", [dict(v_c=90.0), dict(v_f2=110.0), dict(L2=0.001), dict(beta=0.1), dict(N=0)],
    )
    def test_parameter_invariants(self, kw):
        base = dict(v_f1=108.0, v_f2=79.2, v_c=61.2, L1=0.0065, L2=0.0165, N=3, beta=0.25)
        with pytest.raises(ValueError):
            CBParams(**{**base, **kw})


class TestCBFlux:
    model = ChanutBuissonFlux(CB)

    def test_zero_sender(self):
        np.testing.assert_array_equal(cb_flux((0.0, 0.0), (300.0, 30.0), CB), [0.0, 0.0])

    def test_jam_receiver(self):
        jam = (CB.N / CB.L1 * 0.5, CB.N / CB.L2 * 0.5)
        np.testing.assert_allclose(cb_flux((60.0, 10.0), jam, CB), [0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(cb_flux((200.0, 30.0), jam, CB), [0.0, 0.0], atol=1e-9)

    def test_worked_case(self):
        q = cb_flux((60.0, 0.0), (300.0, 30.0), CB)
        np.testing.assert_allclose(q, oracle_flux((60.0, 0.0), (300.0, 30.0)), rtol=1e-12)

    def test_oracle_random(self):
        rng = np.random.default_rng(1)
        for _ in range(3000):
            up, dn = random_cb_state(rng), random_cb_state(rng)
            np.testing.assert_allclose(cb_flux(up, dn, CB), oracle_flux(up, dn), rtol=1e-10, atol=1e-8)

    @settings(max_examples=300, deadline=None)
    @given(cb_states(), cb_states())
    def test_bounds(self, up, dn):
        q = cb_flux(up, dn, CB)
        qmax = np.array(self.model.jam_densities()) * 0 + CB.v_f1 * CB.N / CB.L1
        assert np.all(q >= -1e-12) and np.all(q <= qmax)
        if up[0] == 0:
            assert q[0] == 0.0
        if up[1] == 0:
            assert q[1] == 0.0

    def test_continuity_across_zero_shock_speed(self):
        """Fix the downstream state and move along upstream states through s = 0."""
        dn = np.array([150.0, 40.0])
        fd = cb_class_flows(*dn, CB)
        e = CB.e
        target = fd.q1 + e * fd.q2  # upstream PCE flow making s vanish
        # cars only upstream: find rho with q(rho) = target by bisection on the free branch
        lo, hi = 0.0, CB.critical_occupancy / CB.L1
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if cb_class_flows(mid, 0.0, CB).q1 < target else (lo, mid)
        r = 0.5 * (lo + hi)
        below = cb_flux((r * (1 - 1e-10), 0.0), dn, CB)
        above = cb_flux((r * (1 + 1e-10), 0.0), dn, CB)
        np.testing.assert_allclose(below, above, rtol=1e-8)
        assert np.abs(below - above).max() <= 1e-9 * max(1.0, np.abs(above).max()) * 10

    def test_intermediate_formula_limit(self):
        # intermediate formula tends to the sending branch as s -> 0-
        dn = np.array([150.0, 40.0])
        sweep = np.linspace(0.5, 1.5, 401) * 40.0
        q = np.array([cb_flux((r, 0.0), dn, CB)[0] for r in sweep])
        jumps = np.abs(np.diff(q))
        assert jumps.max() < 0.05 * np.abs(q).max()

    def test_caps(self):
        jam = (CB.N / CB.L1, 0.0)
        np.testing.assert_allclose(inflow_cap(self.model, jam), [0.0, 0.0], atol=1e-9)
        np.testing.assert_array_equal(outflow_cap(self.model, (0.0, 0.0)), [0.0, 0.0])
        # free cell receives capacity; trucks count e car equivalents
        cap = inflow_cap(self.model, (10.0, 0.0))
        assert cap[0] == pytest.approx(CB.capacity) and cap[1] == pytest.approx(CB.capacity / CB.e)
        np.testing.assert_allclose(outflow_cap(self.model, (60.0, 10.0)), cb_class_flows(60.0, 10.0, CB)[:2])

    def test_inflow_cap_is_supremum(self):
        rng = np.random.default_rng(2)
        first = np.array([120.0, 30.0])
        cap = inflow_cap(self.model, first)
        best = np.zeros(2)
        for _ in range(4000):
            best = np.maximum(best, cb_flux(random_cb_state(rng), first, CB))
        assert np.all(best <= cap * (1 + 1e-12))
        assert np.all(best >= 0.9 * cap)


def fd_gradient(model, up, dn, h=1e-4):
    x = np.concatenate([up, dn]).astype(float)
    m = len(up)
    g = np.empty((m, 2 * m))
    for k in range(2 * m):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        g[:, k] = (np.array(model.flux(xp[:m], xp[m:])) - np.array(model.flux(xm[:m], xm[m:]))) / (2 * h)
    return g


class TestGradient:
    def test_daganzo_fd(self):
        model = DaganzoFlux(VAL)
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 300:
            up, dn = rng.uniform(0.01, 104.9, 1), rng.uniform(0.01, 104.9, 1)
            if model.kink_distance(up, dn) < 1e-2:
                continue
            g = flux_gradient(model, up, dn)
            np.testing.assert_allclose(g, fd_gradient(model, up, dn), rtol=1e-5, atol=1e-7)
            checked += 1

    def test_cb_fd(self):
        model = ChanutBuissonFlux(CB)
        rng = np.random.default_rng(4)
        checked = 0
        while checked < 500:
            up, dn = random_cb_state(rng, 0.98), random_cb_state(rng, 0.98)
            if min(up.min(), dn.min()) < 1e-2 or model.kink_distance(up, dn) < 1e-2:
                continue
            g = flux_gradient(model, up, dn)
            np.testing.assert_allclose(g, fd_gradient(model, up, dn), rtol=1e-5, atol=1e-6)
            checked += 1

    def test_cb_bounded_at_kinks(self):
        model = ChanutBuissonFlux(CB)
        crit = (CB.critical_occupancy / CB.L1, 0.0)
        g = flux_gradient(model, crit, crit)
        assert np.all(np.isfinite(g)) and np.abs(g).max() <= model.lipschitz_bound

    def test_cb_lipschitz_empirical(self):
        model = ChanutBuissonFlux(CB)
        rng = np.random.default_rng(5)
        K = model.lipschitz_bound
        for _ in range(2000):
            x = np.concatenate([random_cb_state(rng), random_cb_state(rng)])
            y = np.concatenate([random_cb_state(rng), random_cb_state(rng)])
            dq = np.linalg.norm(np.subtract(model.flux(x[:2], x[2:]), model.flux(y[:2], y[2:])))
            assert dq <= K * np.linalg.norm(x - y) + 1e-9

    def test_cap_gradient_fd(self):
        model = ChanutBuissonFlux(CB)
        x = np.array([40.0, 10.0])
        h = 1e-4
        for side, fn in (("in", model.inflow_cap), ("out", model.outflow_cap)):
            g = model.cap_gradient(x, side)
            for k in range(2):
                xp, xm = x.copy(), x.copy()
                xp[k] += h
                xm[k] -= h
                fd = (np.array(fn(xp)) - np.array(fn(xm))) / (2 * h)
                np.testing.assert_allclose(g[:, k], fd, rtol=1e-5, atol=1e-7)


class TestBatch:
    def test_daganzo_batch_matches_scalar(self):
        model = DaganzoFlux(VAL)
        rng = np.random.default_rng(6)
        up, dn = rng.uniform(0, 105, (500, 1)), rng.uniform(0, 105, (500, 1))
        np.testing.assert_array_equal(
            model.flux_batch(up, dn), np.array([model.flux(a, b) for a, b in zip(up, dn)])
        )
        np.testing.assert_array_equal(
            model.gradient_batch(up, dn), np.array([model.gradient(a, b) for a, b in zip(up, dn)])
        )

    def test_cb_batch_matches_scalar(self):
        model = ChanutBuissonFlux(CB)
        rng = np.random.default_rng(7)
        up = np.array([random_cb_state(rng) for _ in range(2000)])
        dn = np.array([random_cb_state(rng) for _ in range(2000)])
        up[:100] = 0.0
        dn[100:200] = 0.0
        np.testing.assert_allclose(
            model.flux_batch(up, dn), np.array([model.flux(a, b) for a, b in zip(up, dn)]),
            rtol=1e-12, atol=1e-9,
        )
        np.testing.assert_allclose(
            model.gradient_batch(up, dn), np.array([model.gradient(a, b) for a, b in zip(up, dn)]),
            rtol=1e-10, atol=1e-9,
        )

    def test_project_batch(self):
        model = ChanutBuissonFlux(CB)
        rho = np.array([[-1.0, 5.0], [500.0, 0.0], [100.0, 20.0]])
        np.testing.assert_allclose(model.project_batch(rho), np.array([model.project(r) for r in rho]))


class TestSerialisation:
    @pytest.mark.parametrize("model", [DaganzoFlux(VAL), ChanutBuissonFlux(CB)])
    def test_round_trip(self, model):
        assert model_from_dict(model_to_dict(model)) == model

    def test_rejects_unknown(self):
        with pytest.raises(ValueError):
            model_from_dict({"type": "greenshields"})
        with pytest.raises(ValueError):
            model_from_dict({"type": "daganzo", "v_f": 1.0})
