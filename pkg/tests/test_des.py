import json
import math

import numpy as np
import pytest

from metaq import des
from metaq.des import Schedule, SimulationError, check_ledger, ensemble_average, simulate

from support import make_program, random_program


def mm1_program(lam=5.0, mu=10.0, N=30):
    # orbit bound 0 and a huge timeout: plain bounded M/M/1
    return make_program(
        lam=lam, mu=mu, tau=1000.0, retries=0, queue_bound=N, orbit_bound=0, name="mm1"
    )


def test_mm1_mean_queue_matches_theory():
    # rho = 0.5 -> E[u] = rho / (1 - rho) = 1 for the (effectively) unbounded queue
    mean, _ = ensemble_average(mm1_program(), 30, 300.0, 1.0, seed=7)
    est = float(np.mean(mean.u["s1"][100:]))  # discard warm-up
    assert est == pytest.approx(1.0, abs=0.15)


def test_same_seed_reproduces_trajectory():
    p = make_program(lam=6.0, queue_bound=20, orbit_bound=5, tau=2.0)
    a = simulate(p, 50.0, 0.5, seed=123)
    b = simulate(p, 50.0, 0.5, seed=123)
    for sid in a.servers:
        assert np.array_equal(a.u[sid], b.u[sid])
        assert np.array_equal(a.v_hat[sid], b.v_hat[sid])
        assert np.array_equal(a.goodput[sid], b.goodput[sid])
        assert np.array_equal(a.drops[sid], b.drops[sid])
    assert a.ledger == b.ledger


def test_different_seeds_differ():
    p = make_program(lam=6.0, queue_bound=20, orbit_bound=5, tau=2.0)
    a = simulate(p, 50.0, 0.5, seed=1)
    b = simulate(p, 50.0, 0.5, seed=2)
    assert not np.array_equal(a.u["s1"], b.u["s1"])


def test_ensemble_average_is_mean_of_runs():
    p = mm1_program()
    mean, runs = ensemble_average(p, 5, 20.0, 1.0, seed=11)
    assert len(runs) == 5
    stacked = np.vstack([r.u["s1"] for r in runs])
    assert np.allclose(mean.u["s1"], stacked.mean(axis=0))


def test_ledger_balances_on_random_programs():
    rng = np.random.default_rng(99)
    for i in range(20):
        p = random_program(rng, i)
        traj = simulate(p, 40.0, 2.0, seed=1000 + i)
        check_ledger(traj.ledger)  # exact integer identities
        req = traj.ledger["requests"]
        assert req["arrivals"] == (
            req["successes"] + req["abandoned"] + req["dropped"] + req["in_flight"]
        )


def test_check_ledger_detects_imbalance():
    p = make_program(queue_bound=5, orbit_bound=2)
    traj = simulate(p, 10.0, 1.0, seed=0)
    bad = json.loads(json.dumps(traj.ledger))
    bad["requests"]["successes"] += 1
    with pytest.raises(SimulationError):
        check_ledger(bad)


def test_initial_state_is_respected_at_time_zero():
    p = make_program(lam=0.5, mu=10.0, tau=5.0, retries=3, queue_bound=20, orbit_bound=8)
    traj = simulate(p, 5.0, 0.5, seed=3, init={"s1": (7, 4)})
    assert traj.u["s1"][0] == 7
    assert traj.v_hat["s1"][0] == 4


def test_seeding_requires_a_client():
    p = make_program(lam=0.0, queue_bound=20, orbit_bound=8)
    with pytest.raises(SimulationError):
        simulate(p, 5.0, 0.5, seed=3, init={"s1": (7, 0)})


def test_schedule_cuts_arrivals():
    p = mm1_program(lam=8.0)
    sched = Schedule(((10.0, {"lambda_1": 0.0}),))
    traj = simulate(p, 60.0, 1.0, seed=5, schedule=sched)
    assert traj.u["s1"][-1] == 0
    # goodput eventually stops once the system drains
    assert traj.goodput["s1"][-1] == 0.0


def test_schedule_validation():
    with pytest.raises(SimulationError):
        Schedule(((5.0, {"retries_1": 2}),))  # structural, not overridable
    with pytest.raises(SimulationError):
        Schedule(((5.0, {"mu_1": 0.0}),))
    with pytest.raises(SimulationError):
        Schedule(((5.0, {"lambda_1": 1.0}), (2.0, {"lambda_1": 2.0})))  # unsorted


def test_schedule_json_round_trip():
    sched = Schedule(((3.0, {"lambda_1": 2.5}), (10.0, {"mu_1": 4.0})))
    assert Schedule.from_json(sched.to_json()) == sched


def test_trajectory_csv_round_trip(tmp_path):
    p = make_program(lam=6.0, queue_bound=20, orbit_bound=5, tau=2.0)
    traj = simulate(p, 20.0, 0.5, seed=42)
    path = tmp_path / "run.csv"
    traj.to_csv(path)
    back = des.Trajectory.from_csv(path)
    assert np.allclose(back.times, traj.times)
    assert np.array_equal(back.u["s1"], traj.u["s1"])
    assert np.array_equal(back.v_hat["s1"], traj.v_hat["s1"])
    a, b = back.latency_mean["s1"], traj.latency_mean["s1"]
    mask = ~np.isnan(b)
    assert np.allclose(a[mask], b[mask])
    assert np.isnan(a[~mask]).all()


def test_simulate_argument_validation():
    p = mm1_program()
    with pytest.raises(SimulationError):
        simulate(p, -1.0, 0.5)
    with pytest.raises(SimulationError):
        simulate(p, 10.0, 0.0)
    with pytest.raises(SimulationError):
        simulate(p, 10.0, 0.5, retry_backoff=-1.0)
    with pytest.raises(SimulationError):
        ensemble_average(p, 0, 10.0, 0.5)


def test_retry_traffic_reaches_the_orbit():
    # timeouts shorter than typical service: retries must show up in v_hat
    p = make_program(lam=5.0, mu=1.0, tau=0.5, retries=3, queue_bound=30, orbit_bound=10)
    traj = simulate(p, 50.0, 1.0, seed=8)
    assert traj.v_hat["s1"].max() > 0
    assert traj.ledger["requests"]["abandoned"] > 0
