import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.stats import poisson

from metaq import ctmc
from metaq.ctmc import (
    CapacityError,
    chebyshev_failure_bound,
    compile_ctmc,
    embedded_dtmc,
    failure_probability,
    retry_fraction,
    single_server_rates,
    validate_generator,
)

from support import make_program, random_program


# ---------------------------------------------------------------------------
# timeout probability


@pytest.mark.parametrize("u", [1, 2, 5, 17, 60])
@pytest.mark.parametrize("mu,tau", [(10.0, 9.0), (0.3, 2.0), (2.0, 0.1)])
def test_failure_probability_matches_poisson_cdf(u, mu, tau):
    expected = poisson.cdf(u, mu * tau) - poisson.pmf(0, mu * tau)
    assert failure_probability(u, mu, tau) == pytest.approx(expected, rel=1e-12)


def test_failure_probability_empty_queue_is_zero():
    assert failure_probability(0, 10.0, 9.0) == 0.0


def test_failure_probability_large_rate_no_underflow():
    # exp(-mu*tau) underflows in double precision here
    r = failure_probability(900, 100.0, 10.0)
    assert 0.0 < r < 0.5
    assert failure_probability(2000, 100.0, 10.0) > 0.99


@given(
    u=st.integers(0, 200),
    mu=st.floats(0.1, 50.0),
    tau=st.floats(0.1, 50.0),
)
def test_failure_probability_in_unit_interval_and_monotone(u, mu, tau):
    r = failure_probability(u, mu, tau)
    assert 0.0 <= r <= 1.0
    assert failure_probability(u + 1, mu, tau) >= r


def test_failure_probability_rejects_bad_rates():
    with pytest.raises(ValueError):
        failure_probability(3, 0.0, 1.0)
    with pytest.raises(ValueError):
        failure_probability(3, 1.0, -2.0)


# ---------------------------------------------------------------------------
# latency tail bound


def test_chebyshev_bound_hand_computed():
    p = make_program(mu=2.0, queue_bound=20, orbit_bound=0)
    # 4 jobs at rate 2: mean wait 2, one-job variance terms (4/2)^2 = 4
    tau = 6.0
    zeta = (tau - 2.0) / 2.0
    assert chebyshev_failure_bound(p, 0, (4,), tau) == pytest.approx(1.0 / zeta**2)


def test_chebyshev_bound_conventions():
    p = make_program(mu=2.0)
    assert chebyshev_failure_bound(p, 0, (0,), 5.0) == 0.0  # nothing queued
    assert chebyshev_failure_bound(p, 0, (40,), 5.0) == 1.0  # mean wait >= timeout


@given(u=st.integers(0, 100), mu=st.floats(0.5, 20.0), tau=st.floats(0.1, 20.0))
def test_chebyshev_bound_dominates_exact_probability(u, mu, tau):
    p = make_program(mu=mu, queue_bound=120, orbit_bound=0)
    bound = chebyshev_failure_bound(p, 0, (u,), tau)
    assert 0.0 <= bound <= 1.0
    assert bound >= failure_probability(u, mu, tau) - 1e-12


def test_retry_fraction():
    assert retry_fraction(0) == 0.0
    assert retry_fraction(3) == pytest.approx(0.75)
    assert retry_fraction(1) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# local transition rates


def test_single_server_rates_interior_state():
    p = make_program(lam=9.5, mu=10.0, tau=9.0, retries=3, queue_bound=100, orbit_bound=20)
    u, v = 5, 4
    r = failure_probability(u, 10.0, 9.0)
    alpha = 0.75
    rates = dict(single_server_rates(u, v, p))
    assert rates[(u + 1, v + 1)] == pytest.approx(9.5 * r)
    assert rates[(u - 1, v)] == pytest.approx(10.0)
    assert rates[(u + 1, v)] == pytest.approx(9.5 * (1 - r) + alpha * v * r / 9.0)
    assert rates[(u + 1, v - 1)] == pytest.approx(alpha * v * (1 - r) / 9.0)
    assert rates[(u, v - 1)] == pytest.approx((1 - alpha) * v / 9.0)
    assert len(rates) == 5


def test_single_server_rates_full_queue_rejects():
    p = make_program(queue_bound=10, orbit_bound=3)
    rates = dict(single_server_rates(10, 2, p))
    assert all(uu <= 10 for uu, _ in rates)
    # only completion and orbit drop remain
    assert set(rates) == {(9, 2), (10, 1)}


def test_single_server_rates_orbit_saturates():
    p = make_program(lam=9.5, mu=10.0, tau=9.0, queue_bound=100, orbit_bound=20)
    u, v = 30, 20
    r = failure_probability(u, 10.0, 9.0)
    rates = dict(single_server_rates(u, v, p))
    # arrival-with-timeout lands on the clamped orbit, merged with plain arrival
    assert rates[(u + 1, v)] == pytest.approx(9.5 + 0.75 * v * r / 9.0)
    assert all(vv <= 20 for _, vv in rates)


def test_single_server_rates_empty_state():
    p = make_program(lam=4.0, mu=10.0, tau=9.0)
    rates = dict(single_server_rates(0, 0, p))
    assert rates == {(1, 0): pytest.approx(4.0)}


def test_thread_pool_service_rate_scales_with_busy_threads():
    p = make_program(mu=3.0, threads=4, queue_bound=10, orbit_bound=0)
    assert dict(single_server_rates(2, 0, p))[(1, 0)] == pytest.approx(6.0)
    assert dict(single_server_rates(8, 0, p))[(7, 0)] == pytest.approx(12.0)


# ---------------------------------------------------------------------------
# compiled generator


def test_compile_state_count_and_validity(small_program):
    m = compile_ctmc(small_program)
    assert m.num_states == (8 + 1) * (3 + 1)
    validate_generator(m)


def test_compile_respects_state_cap():
    p = make_program(queue_bound=100, orbit_bound=20)
    with pytest.raises(CapacityError):
        compile_ctmc(p, state_cap=1000)


@given(u=st.integers(0, 8), v=st.integers(0, 3))
def test_index_coords_round_trip(u, v):
    m = compile_ctmc(
        make_program(lam=3.0, mu=5.0, tau=2.0, queue_bound=8, orbit_bound=3)
    )
    idx = m.index_of(((u, v),))
    assert m.coords_of(idx) == ((u, v),)


def test_index_of_rejects_out_of_range(small_program):
    m = compile_ctmc(small_program)
    with pytest.raises(ValueError):
        m.index_of(((9, 0),))


def test_low_and_high_states(small_program):
    m = compile_ctmc(small_program)
    assert m.coords_of(m.low_state()) == ((0, 0),)
    assert m.coords_of(m.high_state()) == ((8, 3),)


def test_generator_rows_match_local_rates(small_program):
    m = compile_ctmc(small_program)
    state = m.index_of(((4, 2),))
    row = m.Q.getrow(state).toarray().ravel()
    expected = dict(single_server_rates(4, 2, small_program))
    for (uu, vv), rate in expected.items():
        assert row[m.index_of(((uu, vv),))] == pytest.approx(rate)
    assert row[state] == pytest.approx(-sum(expected.values()))


def test_embedded_dtmc_rows_are_distributions(small_program):
    m = compile_ctmc(small_program)
    P = embedded_dtmc(m)
    sums = np.asarray(P.sum(axis=1)).ravel()
    assert np.allclose(sums, 1.0, atol=1e-12)
    assert P.diagonal().max() == 0.0


def test_chebyshev_generator_differs_but_stays_valid(small_program):
    m_exact = compile_ctmc(small_program)
    m_cheb = compile_ctmc(small_program, force_chebyshev=True)
    validate_generator(m_cheb)
    assert (m_exact.Q - m_cheb.Q).nnz > 0


def test_random_programs_compile_to_valid_generators():
    rng = np.random.default_rng(5)
    for i in range(10):
        p = random_program(rng, i)
        m = compile_ctmc(p, check_irreducible=False)
        validate_generator(m)
        expected = 1
        for n, v in m.bounds:
            expected *= (n + 1) * (v + 1)
        assert m.num_states == expected


def test_pipeline_is_reducible_at_empty_downstream():
    # an empty downstream server has zero effective rate, which stalls the
    # upstream server's completions; the irreducibility check flags this
    doc = {
        "version": 1,
        "name": "pipeline",
        "servers": [
            {"id": "a", "mu": 5.0, "threads": 1, "queue_bound": 4, "orbit_bound": 2,
             "downstream": "b"},
            {"id": "b", "mu": 4.0, "threads": 1, "queue_bound": 4, "orbit_bound": 0},
        ],
        "clients": [{"server": "a", "lambda": 3.0, "timeout": 2.0, "retries": 1}],
    }
    import json

    from metaq.model import parse_program

    p = parse_program(json.dumps(doc))
    with pytest.raises(ctmc.GeneratorError):
        compile_ctmc(p, check_irreducible=True)
    m = compile_ctmc(p, check_irreducible=False)
    validate_generator(m)


def test_export_matrix_market_round_trip(tmp_path, small_program):
    from scipy.io import mmread

    m = compile_ctmc(small_program)
    mtx = tmp_path / "gen.mtx"
    legend = tmp_path / "states.csv"
    ctmc.export_matrix_market(m, mtx, legend)
    Q2 = sp.csr_matrix(mmread(str(mtx)))
    assert (abs(Q2 - m.Q)).max() < 1e-12
    lines = legend.read_text().strip().splitlines()
    assert lines[0] == "index,u1,v1"
    assert len(lines) == m.num_states + 1
