"""Shared builders: program documents and hand-assembled chains."""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp

from metaq.ctmc import CtmcModel
from metaq.model import ProgramSpec, ServerSpec, parse_program


def program_doc(
    lam=9.5,
    mu=10.0,
    tau=9.0,
    retries=3,
    queue_bound=100,
    orbit_bound=20,
    threads=1,
    name="single",
):
    return {
        "version": 1,
        "name": name,
        "servers": [
            {
                "id": "s1",
                "mu": mu,
                "threads": threads,
                "queue_bound": queue_bound,
                "orbit_bound": orbit_bound,
            }
        ],
        "clients": [
            {"server": "s1", "lambda": lam, "timeout": tau, "retries": retries}
        ],
    }


def make_program(**kwargs) -> ProgramSpec:
    return parse_program(json.dumps(program_doc(**kwargs)))


def raw_chain(Q) -> CtmcModel:
    """Wrap a hand-built generator so the analysis functions accept it.

    The placeholder program is never consulted by solvers; only Q and the
    state count matter for hand-assembled chains.
    """
    Q = sp.csr_matrix(np.asarray(Q, dtype=float))
    n = Q.shape[0]
    placeholder = ProgramSpec(
        servers=(
            ServerSpec(
                id="s",
                service_rate=1.0,
                threads=1,
                queue_bound=max(n - 1, 1),
                orbit_bound=0,
            ),
        ),
        clients=(),
    )
    return CtmcModel(program=placeholder, Q=Q, bounds=((n - 1, 0),))


def two_well_chain(bridge_rate, shallow_pull=3.0, deep_pull=30.0) -> CtmcModel:
    """Birth-death chain on 0..9 with wells at 2 (shallow) and 7 (deep).

    The only slow transitions are 4<->5 at ``bridge_rate``; everything else
    relaxes quickly into the nearest well bottom.  The deep well dominates,
    so the slowest eigenvalue tracks the escape rate of the shallow well.
    """
    n = 10

    def rate(i, j):
        if (i, j) in ((4, 5), (5, 4)):
            return bridge_rate
        well, pull = (2, shallow_pull) if max(i, j) <= 4 else (7, deep_pull)
        return pull if abs(j - well) < abs(i - well) else 1.0

    Q = np.zeros((n, n))
    for i in range(n - 1):
        Q[i, i + 1] = rate(i, i + 1)
        Q[i + 1, i] = rate(i + 1, i)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return raw_chain(Q)


def random_generator(rng: np.random.Generator, n: int) -> np.ndarray:
    """Dense-ish random irreducible generator (a cycle keeps it connected)."""
    Q = rng.uniform(0.1, 5.0, size=(n, n))
    Q *= rng.random((n, n)) < 0.5
    for i in range(n):
        Q[i, (i + 1) % n] = max(Q[i, (i + 1) % n], 0.2)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def random_program(rng: np.random.Generator, idx: int) -> ProgramSpec:
    """Random small valid program; roughly one in five is a two-server pipeline."""
    two = rng.random() < 0.2
    servers = [
        {
            "id": "a",
            "mu": float(rng.uniform(1.0, 12.0)),
            "threads": int(rng.integers(1, 3)),
            "queue_bound": int(rng.integers(3, 9)),
            "orbit_bound": int(rng.integers(0, 5)),
        }
    ]
    clients = [
        {
            "server": "a",
            "lambda": float(rng.uniform(0.5, 10.0)),
            "timeout": float(rng.uniform(0.5, 5.0)),
            "retries": int(rng.integers(0, 4)),
        }
    ]
    if two:
        servers[0]["downstream"] = "b"
        servers.append(
            {
                "id": "b",
                "mu": float(rng.uniform(1.0, 12.0)),
                "threads": int(rng.integers(1, 3)),
                "queue_bound": int(rng.integers(3, 7)),
                # no client on the inner server, so its orbit never fills
                "orbit_bound": 0,
            }
        )
    doc = {"version": 1, "name": f"random_{idx}", "servers": servers, "clients": clients}
    return parse_program(json.dumps(doc))
