"""Declarative descriptions of request-response systems.

A program is a pipeline of servers, each with an optional client attached.
Programs are loaded from a versioned JSON document, validated, and can be
re-parameterized by named parameter vectors (``lambda_i``, ``mu_i``,
``timeout_i`` for the 1-based server index ``i``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

SCHEMA_VERSION = 1

# Parameters that may be overridden at runtime.  Retry budgets and the
# queue/orbit bounds are structural and stay fixed.
CALIBRATABLE_PREFIXES = ("lambda_", "mu_", "timeout_")


class ProgramError(ValueError):
    """Invalid program document or parameter assignment."""


class ProgramSyntaxError(ProgramError):
    """Document is not well-formed JSON or misses required fields."""


class ProgramSemanticError(ProgramError):
    """Document parses but violates a model invariant."""


@dataclass(frozen=True)
class ClientSpec:
    """A request source attached to one server."""

    server: str
    arrival_rate: float  # requests/second
    timeout: float  # seconds
    max_retries: int

    def validate(self) -> None:
        if self.arrival_rate < 0:
            raise ProgramSemanticError(
                f"client of {self.server!r}: arrival rate must be >= 0, got {self.arrival_rate}"
            )
        if self.timeout <= 0:
            raise ProgramSemanticError(
                f"client of {self.server!r}: timeout must be positive, got {self.timeout}"
            )
        if self.max_retries < 0 or int(self.max_retries) != self.max_retries:
            raise ProgramSemanticError(
                f"client of {self.server!r}: retries must be a nonnegative integer"
            )


@dataclass(frozen=True)
class ServerSpec:
    """A FIFO server with a thread pool and bounded queue/orbit."""

    id: str
    service_rate: float  # requests/second
    threads: int
    queue_bound: int  # max jobs in system (in service + waiting)
    orbit_bound: int
    downstream: str | None = None

    def validate(self) -> None:
        if self.service_rate <= 0:
            raise ProgramSemanticError(
                f"server {self.id!r}: service rate must be positive, got {self.service_rate}"
            )
        if self.threads < 1:
            raise ProgramSemanticError(f"server {self.id!r}: threads must be >= 1")
        if self.queue_bound < 1:
            raise ProgramSemanticError(f"server {self.id!r}: queue bound must be >= 1")
        if self.orbit_bound < 0:
            raise ProgramSemanticError(f"server {self.id!r}: orbit bound must be >= 0")


@dataclass(frozen=True)
class ProgramSpec:
    """A pipeline of servers with at most one (averaged) client per server."""

    servers: tuple[ServerSpec, ...]
    clients: tuple[ClientSpec, ...]
    name: str = "program"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.servers:
            raise ProgramSemanticError("program needs at least one server")
        ids = [s.id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ProgramSemanticError(f"duplicate server ids: {ids}")
        for s in self.servers:
            s.validate()
        # Pipeline shape: server i may only feed server i+1.
        for i, s in enumerate(self.servers):
            if s.downstream is None:
                continue
            if s.downstream not in ids:
                raise ProgramSemanticError(
                    f"server {s.id!r}: unknown downstream {s.downstream!r}"
                )
            if ids.index(s.downstream) != i + 1:
                raise ProgramSemanticError(
                    f"server {s.id!r}: downstream must be the next server in pipeline "
                    f"order (got {s.downstream!r}); cycles and skips are not supported"
                )
        seen = set()
        for c in self.clients:
            c.validate()
            if c.server not in ids:
                raise ProgramSemanticError(f"client targets unknown server {c.server!r}")
            if c.server in seen:
                raise ProgramSemanticError(
                    f"server {c.server!r} has multiple clients; average them first"
                )
            seen.add(c.server)

    @property
    def num_servers(self) -> int:
        return len(self.servers)

    def server_index(self, server_id: str) -> int:
        for i, s in enumerate(self.servers):
            if s.id == server_id:
                return i
        raise KeyError(server_id)

    def client_for(self, server_id: str) -> ClientSpec | None:
        for c in self.clients:
            if c.server == server_id:
                return c
        return None

    def nominal_params(self) -> "ParamVector":
        """Parameter vector θ₀ holding every calibratable constant."""
        entries = {}
        for i, s in enumerate(self.servers, start=1):
            entries[f"mu_{i}"] = s.service_rate
            c = self.client_for(s.id)
            if c is not None:
                entries[f"lambda_{i}"] = c.arrival_rate
                entries[f"timeout_{i}"] = c.timeout
        return ParamVector(entries)


@dataclass(frozen=True)
class ParamVector:
    """Named real-valued parameters with an optional feasibility box."""

    entries: dict[str, float]
    box: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, (lo, hi) in self.box.items():
            if name in self.entries:
                v = self.entries[name]
                if not (lo <= v <= hi):
                    raise ProgramSemanticError(
                        f"parameter {name}={v} outside box [{lo}, {hi}]"
                    )

    def __getitem__(self, name: str) -> float:
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, names) -> "ParamVector":
        return ParamVector(
            {n: self.entries[n] for n in names},
            {n: self.box[n] for n in names if n in self.box},
        )


def average_clients(clients: list[ClientSpec]) -> ClientSpec:
    """Merge the clients of one server into a single averaged client.

    Arrival rates sum; timeout and retry budget become arrival-rate-weighted
    means.  The retry budget is rounded to the nearest integer, ties up, so
    it stays integral.
    """
    if not clients:
        raise ProgramSemanticError("cannot average an empty client list")
    targets = {c.server for c in clients}
    if len(targets) > 1:
        raise ProgramSemanticError(f"clients target different servers: {sorted(targets)}")
    if len(clients) == 1:
        return clients[0]
    total = sum(c.arrival_rate for c in clients)
    if total <= 0:
        raise ProgramSemanticError("cannot average clients with zero total arrival rate")
    timeout = sum(c.arrival_rate * c.timeout for c in clients) / total
    retries_mean = sum(c.arrival_rate * c.max_retries for c in clients) / total
    retries = int(math.floor(retries_mean + 0.5))  # ties round up
    return ClientSpec(
        server=clients[0].server,
        arrival_rate=total,
        timeout=timeout,
        max_retries=retries,
    )


def parse_program(text: str) -> ProgramSpec:
    """Parse and validate a JSON program document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProgramSyntaxError(f"line {e.lineno}, column {e.colno}: {e.msg}") from e
    return program_from_dict(doc)


def program_from_dict(doc: dict) -> ProgramSpec:
    if not isinstance(doc, dict):
        raise ProgramSyntaxError("top-level document must be a JSON object")
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        raise ProgramSyntaxError(
            f"unsupported or missing schema version: {version!r} (expected {SCHEMA_VERSION})"
        )
    try:
        servers = tuple(
            ServerSpec(
                id=str(s["id"]),
                service_rate=float(s["mu"]),
                threads=int(s.get("threads", 1)),
                queue_bound=int(s["queue_bound"]),
                orbit_bound=int(s.get("orbit_bound", 0)),
                downstream=s.get("downstream"),
            )
            for s in doc.get("servers", [])
        )
        raw_clients = [
            ClientSpec(
                server=str(c["server"]),
                arrival_rate=float(c["lambda"]),
                timeout=float(c["timeout"]),
                max_retries=int(c.get("retries", 0)),
            )
            for c in doc.get("clients", [])
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise ProgramSyntaxError(f"malformed field: {e}") from e

    # Pre-average multiple clients per server.
    by_server: dict[str, list[ClientSpec]] = {}
    for c in raw_clients:
        by_server.setdefault(c.server, []).append(c)
    clients = tuple(average_clients(v) for v in by_server.values())
    return ProgramSpec(servers=servers, clients=clients, name=str(doc.get("name", "program")))


def render_program(p: ProgramSpec) -> str:
    """Serialize a ProgramSpec back to its JSON document form."""
    doc = {
        "version": SCHEMA_VERSION,
        "name": p.name,
        "servers": [
            {
                "id": s.id,
                "mu": s.service_rate,
                "threads": s.threads,
                "queue_bound": s.queue_bound,
                "orbit_bound": s.orbit_bound,
                **({"downstream": s.downstream} if s.downstream else {}),
            }
            for s in p.servers
        ],
        "clients": [
            {
                "server": c.server,
                "lambda": c.arrival_rate,
                "timeout": c.timeout,
                "retries": c.max_retries,
            }
            for c in p.clients
        ],
    }
    return json.dumps(doc, indent=2)


def substitute_params(p: ProgramSpec, theta: ParamVector | dict[str, float]) -> ProgramSpec:
    """Return a copy of ``p`` with the named constants replaced.

    Accepted names are ``lambda_i``, ``mu_i`` and ``timeout_i`` where ``i``
    is the 1-based pipeline index of the server.  All invariants are
    re-checked on the substituted program.
    """
    entries = theta.entries if isinstance(theta, ParamVector) else dict(theta)
    servers = list(p.servers)
    clients = {c.server: c for c in p.clients}
    for name, value in entries.items():
        kind, _, idx_s = name.partition("_")
        prefix = kind + "_"
        if prefix not in CALIBRATABLE_PREFIXES or not idx_s.isdigit():
            raise ProgramSemanticError(f"unknown parameter name {name!r}")
        idx = int(idx_s)
        if not (1 <= idx <= len(servers)):
            raise ProgramSemanticError(f"parameter {name!r}: no server with index {idx}")
        server = servers[idx - 1]
        if kind == "mu":
            servers[idx - 1] = replace(server, service_rate=float(value))
        else:
            client = clients.get(server.id)
            if client is None:
                raise ProgramSemanticError(
                    f"parameter {name!r}: server {server.id!r} has no client"
                )
            if kind == "lambda":
                clients[server.id] = replace(client, arrival_rate=float(value))
            else:
                clients[server.id] = replace(client, timeout=float(value))
    return ProgramSpec(
        servers=tuple(servers),
        clients=tuple(clients[c.server] for c in p.clients),
        name=p.name,
    )
