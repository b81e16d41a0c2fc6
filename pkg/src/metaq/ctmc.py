"""Compile a program into a finite sparse-generator CTMC.

The chain tracks, per server, the number of jobs in the system ``u`` and the
retry orbit size ``v``.  Single-server models use the exact Poisson timeout
probability; pipelines use effective arrival/service rates and a Chebyshev
upper bound on the timeout probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.stats import poisson

from metaq.model import ProgramSpec

DEFAULT_STATE_CAP = 5_000_000

ROW_SUM_TOL = 1e-12  # relative to the largest rate in the row


class CapacityError(RuntimeError):
    """State space exceeds the configured build cap."""


class GeneratorError(ValueError):
    """Structurally invalid generator (e.g. absorbing state)."""


def failure_probability(u: int, mu: float, timeout: float) -> float:
    """Probability that a request arriving behind ``u`` jobs times out.

    Sum of Poisson(mu * timeout) point masses for counts 1..u, accumulated
    incrementally so no factorials are ever formed.
    """
    if u <= 0:
        return 0.0
    if mu <= 0 or timeout <= 0:
        raise ValueError("mu and timeout must be positive")
    m = mu * timeout
    if m > 700.0:  # exp(-m) underflows; regularized gamma form instead
        return float(poisson.cdf(u, m) - poisson.pmf(0, m))
    term = math.exp(-m)  # Poisson pmf at 0
    total = 0.0
    for i in range(1, u + 1):
        term *= m / i
        total += term
    return min(total, 1.0)


def effective_service_rates(p: ProgramSpec, u: tuple[int, ...]) -> list[float]:
    """Pipeline-aware service rates, computed leaf-first."""
    K = p.num_servers
    out = [0.0] * K
    for i in range(K - 1, -1, -1):
        s = p.servers[i]
        local = min(s.threads, u[i]) * s.service_rate
        if i < K - 1 and s.downstream is not None:
            out[i] = min(local, out[i + 1])
        else:
            out[i] = local
    return out


def effective_arrival_rates(p: ProgramSpec, u: tuple[int, ...]) -> list[float]:
    """Pipeline-aware arrival rates, computed root-first."""
    K = p.num_servers
    mu_bar = effective_service_rates(p, u)
    out = [0.0] * K
    for i in range(K):
        c = p.client_for(p.servers[i].id)
        lam = c.arrival_rate if c is not None else 0.0
        if i == 0 or p.servers[i - 1].downstream is None:
            out[i] = lam
        else:
            out[i] = lam + min(out[i - 1], mu_bar[i - 1])
    return out


def chebyshev_failure_bound(
    p: ProgramSpec, i: int, u: tuple[int, ...], timeout: float
) -> float:
    """Upper bound on the timeout probability of a request entering server i.

    Uses the Chebyshev tail bound on the total service latency across server
    i and its downstream chain.  Conventions: with no queued work the bound
    is 0; if some occupied server downstream has zero effective rate the
    latency is unbounded and the bound is 1.
    """
    mu_bar = effective_service_rates(p, u)
    mt = 0.0
    var = 0.0
    occupied = False
    for l in range(i, p.num_servers):
        if u[l] == 0:
            continue
        occupied = True
        if mu_bar[l] <= 0.0:
            return 1.0
        w = u[l] / mu_bar[l]
        mt += w
        var += w * w
    if not occupied:
        return 0.0
    if mt >= timeout:
        return 1.0  # Chebyshev gives no information; pessimistic clamp
    zeta = max(1.0, (timeout - mt) / math.sqrt(var))
    return 1.0 / (zeta * zeta)


def retry_fraction(max_retries: int) -> float:
    """Fraction of orbit departures that are retries rather than drops."""
    return max_retries / (max_retries + 1)


def single_server_rates(
    u: int, v: int, p: ProgramSpec, exact: bool = True
) -> list[tuple[tuple[int, int], float]]:
    """Outgoing transitions from state (u, v) of a one-server program.

    Six families: arrival with/without predicted timeout, completion, retry
    enqueue predicted to fail/succeed, and orbit drop.  Transitions that
    would exceed the queue bound are disabled (a full queue rejects work);
    the orbit coordinate saturates at its bound, since the orbit is a finite
    truncation of an unbounded population and the request itself still
    enters the queue.
    """
    if p.num_servers != 1:
        raise ValueError("single_server_rates needs a one-server program")
    server = p.servers[0]
    client = p.client_for(server.id)
    lam = client.arrival_rate if client is not None else 0.0
    tau = client.timeout if client is not None else None
    R = client.max_retries if client is not None else 0
    N, V = server.queue_bound, server.orbit_bound
    if exact and tau is not None:
        r = failure_probability(u, server.service_rate, tau)
    elif tau is not None:
        r = chebyshev_failure_bound(p, 0, (u,), tau)
    else:
        r = 0.0
    alpha = retry_fraction(R)

    acc: dict[tuple[int, int], float] = {}

    def add(uu: int, vv: int, rate: float) -> None:
        if rate <= 0.0 or not 0 <= uu <= N:
            return
        vv = min(max(vv, 0), V)
        if (uu, vv) == (u, v):
            return
        acc[(uu, vv)] = acc.get((uu, vv), 0.0) + rate

    add(u + 1, v + 1, lam * r)
    add(u + 1, v, lam * (1.0 - r))
    add(u - 1, v, min(server.threads, u) * server.service_rate if u >= 1 else 0.0)
    if v >= 1 and tau is not None:
        add(u + 1, v, alpha * v * r / tau)
        add(u + 1, v - 1, alpha * v * (1.0 - r) / tau)
        add(u, v - 1, (1.0 - alpha) * v / tau)
    return list(acc.items())


@dataclass(frozen=True)
class CtmcModel:
    """Enumerated state space plus sparse generator for a program.

    States are per-server (u, v) pairs enumerated in mixed radix with u of
    server 1 varying fastest: index = u1 + (N1+1)*(v1 + (V1+1)*(u2 + ...)).
    """

    program: ProgramSpec
    Q: sp.csr_matrix
    bounds: tuple[tuple[int, int], ...]  # (N_i, V_i) per server

    @property
    def num_states(self) -> int:
        return self.Q.shape[0]

    @property
    def radices(self) -> list[int]:
        out = []
        for n, v in self.bounds:
            out.append(n + 1)
            out.append(v + 1)
        return out

    def index_of(self, coords) -> int:
        """Map per-server (u1, v1, ..., uK, vK) coordinates to a state index."""
        flat = []
        for pair in coords:
            flat.extend(pair) if isinstance(pair, (tuple, list)) else flat.append(pair)
        radices = self.radices
        if len(flat) != len(radices):
            raise ValueError(f"expected {len(radices)} coordinates, got {len(flat)}")
        idx = 0
        stride = 1
        for x, radix in zip(flat, radices):
            if not (0 <= x < radix):
                raise ValueError(f"coordinate {x} out of range [0, {radix})")
            idx += x * stride
            stride *= radix
        return idx

    def coords_of(self, index: int) -> tuple[tuple[int, int], ...]:
        flat = []
        for radix in self.radices:
            flat.append(index % radix)
            index //= radix
        return tuple((flat[2 * i], flat[2 * i + 1]) for i in range(len(self.bounds)))

    def low_state(self) -> int:
        return 0

    def high_state(self) -> int:
        return self.num_states - 1

    def alpha(self, server_index: int) -> float:
        c = self.program.client_for(self.program.servers[server_index].id)
        return retry_fraction(c.max_retries) if c is not None else 0.0

    def exit_rates(self) -> np.ndarray:
        return -self.Q.diagonal()

    def states_where(self, predicate) -> list[int]:
        """Indices of states whose coordinate tuple satisfies ``predicate``."""
        return [i for i in range(self.num_states) if predicate(self.coords_of(i))]


def local_transitions(
    p: ProgramSpec,
    coords: tuple[tuple[int, int], ...],
    bounds: tuple[tuple[int, int], ...],
    force_chebyshev: bool = False,
    _rate_cache: dict | None = None,
) -> list[tuple[tuple[tuple[int, int], ...], float]]:
    """Outgoing transitions from a multi-server state.

    Each server contributes up to six transition families; only one server's
    (u, v) pair changes per transition, each coordinate by at most 1.
    Queue-overflowing transitions are disabled; the orbit coordinate
    saturates at its bound (rates into a saturated orbit merge).
    """
    K = p.num_servers
    u_vec = tuple(c[0] for c in coords)
    exact = K == 1 and not force_chebyshev

    if _rate_cache is not None and u_vec in _rate_cache:
        lam_bar, mu_bar, r_vals = _rate_cache[u_vec]
    else:
        lam_bar = effective_arrival_rates(p, u_vec)
        mu_bar = effective_service_rates(p, u_vec)
        r_vals = []
        for i in range(K):
            c = p.client_for(p.servers[i].id)
            tau = c.timeout if c is not None else None
            if tau is None:
                r_vals.append(0.0)
            elif exact:
                r_vals.append(failure_probability(u_vec[i], p.servers[i].service_rate, tau))
            else:
                r_vals.append(chebyshev_failure_bound(p, i, u_vec, tau))
        if _rate_cache is not None:
            _rate_cache[u_vec] = (lam_bar, mu_bar, r_vals)

    acc: dict[tuple[tuple[int, int], ...], float] = {}
    for i in range(K):
        u_i, v_i = coords[i]
        N_i, V_i = bounds[i]
        c = p.client_for(p.servers[i].id)
        tau = c.timeout if c is not None else None
        alpha = retry_fraction(c.max_retries) if c is not None else 0.0
        r = r_vals[i]

        def add(du: int, dv: int, rate: float) -> None:
            uu, vv = u_i + du, v_i + dv
            if rate <= 0.0 or not 0 <= uu <= N_i:
                return
            vv = min(max(vv, 0), V_i)
            if (uu, vv) == (u_i, v_i):
                return
            target = coords[:i] + ((uu, vv),) + coords[i + 1 :]
            acc[target] = acc.get(target, 0.0) + rate

        add(+1, +1, lam_bar[i] * r)
        add(+1, 0, lam_bar[i] * (1.0 - r))
        if u_i >= 1:
            add(-1, 0, mu_bar[i])
        if v_i >= 1 and tau is not None:
            add(+1, 0, alpha * v_i * r / tau)
            add(+1, -1, alpha * v_i * (1.0 - r) / tau)
            add(0, -1, (1.0 - alpha) * v_i / tau)
    return list(acc.items())


def compile_ctmc(
    p: ProgramSpec,
    state_cap: int = DEFAULT_STATE_CAP,
    force_chebyshev: bool = False,
    check_irreducible: bool | None = None,
) -> CtmcModel:
    """Build the sparse generator over all per-server (queue, orbit) states."""
    bounds = tuple((s.queue_bound, s.orbit_bound) for s in p.servers)
    n_states = 1
    for n, v in bounds:
        n_states *= (n + 1) * (v + 1)
    if n_states > state_cap:
        raise CapacityError(
            f"state space has {n_states} states, above the cap of {state_cap}; "
            "reduce queue/orbit bounds or raise the cap"
        )

    radices: list[int] = []
    for n, v in bounds:
        radices.extend((n + 1, v + 1))
    strides = np.cumprod([1] + radices[:-1])

    def coords_of(index: int) -> tuple[tuple[int, int], ...]:
        flat = []
        for radix in radices:
            flat.append(index % radix)
            index //= radix
        return tuple((flat[2 * i], flat[2 * i + 1]) for i in range(len(bounds)))

    def index_of(coords: tuple[tuple[int, int], ...]) -> int:
        idx = 0
        pos = 0
        for (uu, vv) in coords:
            idx += uu * strides[pos] + vv * strides[pos + 1]
            pos += 2
        return idx

    rate_cache: dict = {}
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for s_idx in range(n_states):
        coords = coords_of(s_idx)
        total = 0.0
        for target, rate in local_transitions(
            p, coords, bounds, force_chebyshev=force_chebyshev, _rate_cache=rate_cache
        ):
            rows.append(s_idx)
            cols.append(index_of(target))
            vals.append(rate)
            total += rate
        if total > 0.0:
            rows.append(s_idx)
            cols.append(s_idx)
            vals.append(-total)

    Q = sp.csr_matrix(
        (np.asarray(vals), (np.asarray(rows), np.asarray(cols))),
        shape=(n_states, n_states),
    )
    model = CtmcModel(program=p, Q=Q, bounds=bounds)
    validate_generator(model)
    if check_irreducible is None:
        check_irreducible = n_states <= 100_000
    if check_irreducible:
        n_comp, _ = sp.csgraph.connected_components(Q, directed=True, connection="strong")
        if n_comp != 1:
            raise GeneratorError(
                f"generator is reducible ({n_comp} strongly connected components)"
            )
    return model


def validate_generator(m: CtmcModel) -> None:
    """Assert zero row sums, nonnegative off-diagonals, and 6K-sparsity."""
    Q = m.Q
    row_sums = np.asarray(Q.sum(axis=1)).ravel()
    max_rate = max(float(np.abs(Q.data).max()), 1.0) if Q.nnz else 1.0
    if np.abs(row_sums).max() > ROW_SUM_TOL * max_rate:
        raise GeneratorError(
            f"row sums deviate from zero by {np.abs(row_sums).max():.3e}"
        )
    diag = Q.diagonal()
    off_min = 0.0
    coo = Q.tocoo()
    off_mask = coo.row != coo.col
    if off_mask.any():
        off_min = float(coo.data[off_mask].min())
    if off_min < 0.0:
        raise GeneratorError(f"negative off-diagonal entry {off_min:.3e}")
    neighbor_counts = Q.indptr[1:] - Q.indptr[:-1] - (diag != 0)
    max_neighbors = 6 * m.program.num_servers
    if neighbor_counts.max() > max_neighbors:
        raise GeneratorError(
            f"state has {int(neighbor_counts.max())} neighbors, above 6K={max_neighbors}"
        )


def embedded_dtmc(m: CtmcModel) -> sp.csr_matrix:
    """Jump-chain transition matrix P(s,s') = Q(s,s')/|Q(s,s)|, s' != s."""
    Q = m.Q.tocoo()
    exit_rates = m.exit_rates()
    dead = np.where(exit_rates <= 0.0)[0]
    if dead.size:
        raise GeneratorError(
            f"state {int(dead[0])} {m.coords_of(int(dead[0]))} has no outgoing transition"
        )
    mask = Q.row != Q.col
    rows = Q.row[mask]
    P = sp.csr_matrix(
        (Q.data[mask] / exit_rates[rows], (rows, Q.col[mask])),
        shape=Q.shape,
    )
    return P


def export_matrix_market(m: CtmcModel, matrix_path, legend_path=None) -> None:
    """Write Q in MatrixMarket coordinate format plus a state-index legend CSV."""
    from scipy.io import mmwrite

    mmwrite(str(matrix_path), m.Q.tocoo())
    if legend_path is not None:
        header = "index," + ",".join(
            f"u{i+1},v{i+1}" for i in range(m.program.num_servers)
        )
        with open(legend_path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for idx in range(m.num_states):
                flat = [str(x) for pair in m.coords_of(idx) for x in pair]
                fh.write(f"{idx}," + ",".join(flat) + "\n")
