"""Discrete-event simulation of retry/timeout client-server programs.

Single-threaded event-heap engine.  Timed-out attempts are deliberately left
in the queue (the server cannot tell they were abandoned), which is the
wasted-work mechanism that sustains congestion under retries.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from metaq.model import CALIBRATABLE_PREFIXES, ProgramSpec

# event kind priorities at equal timestamps: apply rate changes first, then
# completions, then timeouts, then (re)arrivals
_PRIO_CHANGE, _PRIO_COMPLETE, _PRIO_TIMEOUT, _PRIO_ARRIVAL = 0, 1, 2, 3


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Timed parameter overrides: [(t, {"lambda_1": 20.0, ...}), ...]."""

    changes: tuple = ()

    def __post_init__(self):
        last = -math.inf
        for t, overrides in self.changes:
            if t < 0 or t < last:
                raise SimulationError("schedule times must be nonnegative and sorted")
            last = t
            for name, value in overrides.items():
                prefix = name.rsplit("_", 1)[0] + "_"
                if prefix not in CALIBRATABLE_PREFIXES:
                    raise SimulationError(f"schedule cannot set {name!r}")
                if value < 0 or (prefix != "lambda_" and value <= 0):
                    raise SimulationError(f"schedule value for {name!r} out of range")

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        doc = json.loads(text)
        if not isinstance(doc, list):
            raise SimulationError("schedule JSON must be a list of change records")
        changes = []
        for rec in doc:
            try:
                changes.append((float(rec["t"]), dict(rec["set"])))
            except (KeyError, TypeError) as e:
                raise SimulationError(f"bad schedule record {rec!r}") from e
        return cls(tuple(changes))

    def to_json(self) -> str:
        return json.dumps(
            [{"t": t, "set": overrides} for t, overrides in self.changes], indent=2
        )


@dataclass
class Trajectory:
    """Sampled per-server time series plus the conservation ledger."""

    program: str
    sample_period: float
    times: np.ndarray
    servers: list[str]
    u: dict[str, np.ndarray]
    v_hat: dict[str, np.ndarray]
    latency_mean: dict[str, np.ndarray]
    goodput: dict[str, np.ndarray]
    drops: dict[str, np.ndarray]
    ledger: dict = field(default_factory=dict)
    seed: int | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "server_id", "u", "v_hat", "latency_mean", "goodput", "drops"])
            for sid in self.servers:
                for j, t in enumerate(self.times):
                    lat = self.latency_mean[sid][j]
                    w.writerow(
                        [
                            f"{t:.10g}",
                            sid,
                            int(self.u[sid][j]),
                            int(self.v_hat[sid][j]),
                            "" if math.isnan(lat) else f"{lat:.10g}",
                            f"{self.goodput[sid][j]:.10g}",
                            int(self.drops[sid][j]),
                        ]
                    )

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        cols: dict[str, dict[str, list]] = {}
        times_by_server: dict[str, list[float]] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                sid = row["server_id"]
                c = cols.setdefault(
                    sid, {"u": [], "v_hat": [], "latency_mean": [], "goodput": [], "drops": []}
                )
                times_by_server.setdefault(sid, []).append(float(row["t"]))
                c["u"].append(float(row["u"]))
                c["v_hat"].append(float(row["v_hat"]))
                c["latency_mean"].append(
                    float(row["latency_mean"]) if row["latency_mean"] else math.nan
                )
                c["goodput"].append(float(row["goodput"]))
                c["drops"].append(float(row["drops"]))
        if not cols:
            raise SimulationError(f"no samples in {path}")
        servers = list(cols)
        times = np.asarray(times_by_server[servers[0]])
        period = float(times[1] - times[0]) if len(times) > 1 else 0.0
        return cls(
            program="",
            sample_period=period,
            times=times,
            servers=servers,
            u={s: np.asarray(c["u"]) for s, c in cols.items()},
            v_hat={s: np.asarray(c["v_hat"]) for s, c in cols.items()},
            latency_mean={s: np.asarray(c["latency_mean"]) for s, c in cols.items()},
            goodput={s: np.asarray(c["goodput"]) for s, c in cols.items()},
            drops={s: np.asarray(c["drops"]) for s, c in cols.items()},
        )


class _Request:
    __slots__ = ("client_idx", "retries_left", "ever_timed_out", "birth", "settled")

    def __init__(self, client_idx, retries_left, birth):
        self.client_idx = client_idx
        self.retries_left = retries_left
        self.ever_timed_out = False
        self.birth = birth
        self.settled = False


class _Job:
    """One unit of queued work: a client attempt or a forwarded internal job."""

    __slots__ = ("server", "request", "parent", "abandoned", "done", "token")

    def __init__(self, server, request=None, parent=None):
        self.server = server
        self.request = request  # set for client attempts only
        self.parent = parent  # upstream _Job blocked on this one
        self.abandoned = False
        self.done = False
        self.token = 0  # completion-event validity (bumped on rate redraw)


class _Engine:
    def __init__(self, program: ProgramSpec, seed, init, schedule, retry_backoff):
        self.p = program
        self.K = program.num_servers
        if isinstance(seed, np.random.SeedSequence):
            ss = seed
        else:
            ss = np.random.SeedSequence(seed)
        kids = ss.spawn(2 * self.K)
        self.rng_arrival = [np.random.default_rng(kids[i]) for i in range(self.K)]
        self.rng_service = [np.random.default_rng(kids[self.K + i]) for i in range(self.K)]
        self.backoff = retry_backoff

        self.lam = [0.0] * self.K
        self.tau = [math.inf] * self.K
        self.budget = [0] * self.K
        for i, s in enumerate(program.servers):
            c = program.client_for(s.id)
            if c is not None:
                self.lam[i] = c.arrival_rate
                self.tau[i] = c.timeout
                self.budget[i] = c.max_retries
        self.mu = [s.service_rate for s in program.servers]
        self.threads = [s.threads for s in program.servers]
        self.cap = [s.queue_bound for s in program.servers]
        self.down = [
            program.server_index(s.downstream) if s.downstream else None
            for s in program.servers
        ]

        self.now = 0.0
        self.heap: list = []
        self.seq = 0
        self.waiting = [[] for _ in range(self.K)]  # FIFO of _Job (index 0 = head)
        self.in_service: list[dict] = [{} for _ in range(self.K)]  # job -> deadline
        self.busy = [0] * self.K
        self.u = [0] * self.K
        self.vhat = [0] * self.K
        self.arrival_token = [0] * self.K

        # ledger counters
        self.req_arrivals = [0] * self.K
        self.req_success = [0] * self.K
        self.req_abandoned = [0] * self.K
        self.req_dropped = [0] * self.K
        self.att_enqueued = [0] * self.K
        self.att_completed = [0] * self.K
        self.att_rejected = [0] * self.K  # turned away at a full queue

        # per-sample-interval accumulators
        self.int_latencies = [[] for _ in range(self.K)]
        self.int_success = [0] * self.K
        self.int_drops = [0] * self.K

        for t, overrides in (schedule.changes if schedule else ()):
            self._push(t, _PRIO_CHANGE, ("change", overrides))
        self._seed_initial_state(init or {})
        for i in range(self.K):
            if self.lam[i] > 0:
                self._schedule_arrival(i)

    # -- event plumbing -----------------------------------------------------

    def _push(self, t, prio, payload):
        self.seq += 1
        heapq.heappush(self.heap, (t, prio, self.seq, payload))

    def _schedule_arrival(self, i):
        self.arrival_token[i] += 1
        t = self.now + self.rng_arrival[i].exponential(1.0 / self.lam[i])
        self._push(t, _PRIO_ARRIVAL, ("arrival", i, self.arrival_token[i]))

    def _seed_initial_state(self, init):
        for sid, (u0, v0) in init.items():
            i = self.p.server_index(sid)
            if self.lam[i] == 0.0 and (u0 > 0 or v0 > 0):
                raise SimulationError(f"server {sid!r} has no client; cannot seed jobs")
            if u0 > self.cap[i]:
                raise SimulationError(f"initial queue {u0} exceeds bound {self.cap[i]}")
            for _ in range(int(u0)):
                r = _Request(i, self.budget[i], 0.0)
                self.req_arrivals[i] += 1
                self._enqueue_attempt(r)
            # seeded orbit: requests that already timed out once, each due to
            # retry after an exponential residual delay with mean timeout
            for _ in range(int(v0)):
                r = _Request(i, self.budget[i], 0.0)
                self.req_arrivals[i] += 1
                r.ever_timed_out = True
                self.vhat[i] += 1
                if r.retries_left > 0:
                    r.retries_left -= 1
                    delay = self.rng_arrival[i].exponential(self.tau[i])
                    self._push(delay, _PRIO_ARRIVAL, ("retry", r))
                else:
                    self._settle(r, "abandoned")

    # -- queue mechanics ----------------------------------------------------

    def _enqueue_attempt(self, r: _Request):
        """Place a client attempt on its server's queue, or drop the request."""
        i = r.client_idx
        if self.u[i] >= self.cap[i]:
            self.att_rejected[i] += 1
            self._settle(r, "dropped")
            self.int_drops[i] += 1
            return
        job = _Job(i, request=r)
        self.waiting[i].append(job)
        self.u[i] += 1
        self.att_enqueued[i] += 1
        self._push(self.now + self.tau[i], _PRIO_TIMEOUT, ("timeout", job, r))
        self._try_start(i)

    def _enqueue_internal(self, i: int, parent: _Job):
        """Forward work from a blocked upstream worker; no timeout of its own."""
        if self.u[i] >= self.cap[i]:
            # rejected at the door: never entered the queue, unblock upstream
            self.att_rejected[i] += 1
            self.int_drops[i] += 1
            self._resolve(parent, success=False)
            return
        job = _Job(i, parent=parent)
        self.waiting[i].append(job)
        self.u[i] += 1
        self.att_enqueued[i] += 1
        self._try_start(i)

    def _try_start(self, i):
        while self.busy[i] < self.threads[i] and self.waiting[i]:
            job = self.waiting[i].pop(0)
            self.busy[i] += 1
            self._draw_completion(job)

    def _draw_completion(self, job):
        i = job.server
        job.token += 1
        t = self.now + self.rng_service[i].exponential(1.0 / self.mu[i])
        self.in_service[i][job] = t
        self._push(t, _PRIO_COMPLETE, ("complete", job, job.token))

    def _resolve(self, job: _Job, success: bool):
        """Local work (and any downstream chain) finished for this job."""
        i = job.server
        self.u[i] -= 1
        self.att_completed[i] += 1
        self.busy[i] -= 1
        if job.parent is not None:
            self._resolve(job.parent, success)
        elif job.request is not None:
            r = job.request
            if not job.abandoned:
                outcome = "success" if success else "dropped"
                self._settle(r, outcome)
        job.done = True
        self._try_start(i)

    def _settle(self, r: _Request, outcome: str):
        if r.settled:
            return
        r.settled = True
        i = r.client_idx
        if r.ever_timed_out:
            self.vhat[i] -= 1
        if outcome == "success":
            self.req_success[i] += 1
            self.int_success[i] += 1
            self.int_latencies[i].append(self.now - r.birth)
        elif outcome == "abandoned":
            self.req_abandoned[i] += 1
        else:
            self.req_dropped[i] += 1

    # -- event handlers -----------------------------------------------------

    def _on_arrival(self, i, token):
        if token != self.arrival_token[i] or self.lam[i] == 0.0:
            return
        r = _Request(i, self.budget[i], self.now)
        self.req_arrivals[i] += 1
        self._enqueue_attempt(r)
        self._schedule_arrival(i)

    def _on_timeout(self, job: _Job, r: _Request):
        if job.done or job.abandoned or r.settled:
            return  # attempt finished (or request dropped) before the clock fired
        job.abandoned = True  # wasted work: the server will still process it
        if not r.ever_timed_out:
            r.ever_timed_out = True
            self.vhat[r.client_idx] += 1
        if r.retries_left > 0:
            r.retries_left -= 1
            if self.backoff > 0:
                self._push(self.now + self.backoff, _PRIO_ARRIVAL, ("retry", r))
            else:
                self._enqueue_attempt(r)
        else:
            self._settle(r, "abandoned")

    def _on_complete(self, job: _Job, token):
        if job.token != token or job.done:
            return  # superseded by a service-rate redraw
        i = job.server
        self.in_service[i].pop(job, None)
        d = self.down[i]
        if d is not None:
            # worker blocks (thread stays busy) until the downstream chain ends
            self._enqueue_internal(d, job)
        else:
            self._resolve(job, success=True)

    def _on_change(self, overrides):
        for name, value in overrides.items():
            prefix, idx = name.rsplit("_", 1)
            i = int(idx) - 1
            if not (0 <= i < self.K):
                raise SimulationError(f"schedule names unknown server in {name!r}")
            if prefix == "lambda":
                self.lam[i] = float(value)
                self.arrival_token[i] += 1  # cancel the pending draw
                if self.lam[i] > 0:
                    self._schedule_arrival(i)
            elif prefix == "mu":
                self.mu[i] = float(value)
                # memoryless: redraw every remaining service time at the new rate
                for job in list(self.in_service[i]):
                    self._draw_completion(job)
            elif prefix == "timeout":
                self.tau[i] = float(value)  # applies to attempts enqueued from now on
            else:
                raise SimulationError(f"schedule cannot set {name!r}")

    # -- main loop ----------------------------------------------------------

    def run(self, horizon: float, sample_period: float):
        n_samples = int(math.floor(horizon / sample_period + 1e-9)) + 1
        times = np.arange(n_samples) * sample_period
        sids = [s.id for s in self.p.servers]
        rec = {
            key: {sid: np.zeros(n_samples) for sid in sids}
            for key in ("u", "v_hat", "latency_mean", "goodput", "drops")
        }
        for k, t_k in enumerate(times):
            # left-continuous sampling: state just before t_k
            while self.heap and self.heap[0][0] < t_k:
                t, _, _, payload = heapq.heappop(self.heap)
                self.now = t
                kind = payload[0]
                if kind == "arrival":
                    self._on_arrival(payload[1], payload[2])
                elif kind == "timeout":
                    self._on_timeout(payload[1], payload[2])
                elif kind == "complete":
                    self._on_complete(payload[1], payload[2])
                elif kind == "retry":
                    if not payload[1].settled:
                        self._enqueue_attempt(payload[1])
                elif kind == "change":
                    self._on_change(payload[1])
            self.now = float(t_k)
            for i, sid in enumerate(sids):
                rec["u"][sid][k] = self.u[i]
                rec["v_hat"][sid][k] = self.vhat[i]
                lats = self.int_latencies[i]
                rec["latency_mean"][sid][k] = float(np.mean(lats)) if lats else math.nan
                rec["goodput"][sid][k] = self.int_success[i] / sample_period
                rec["drops"][sid][k] = self.int_drops[i]
                self.int_latencies[i] = []
                self.int_success[i] = 0
                self.int_drops[i] = 0
        return times, sids, rec

    def ledger(self) -> dict:
        sids = [s.id for s in self.p.servers]
        requests = {
            "arrivals": sum(self.req_arrivals),
            "successes": sum(self.req_success),
            "abandoned": sum(self.req_abandoned),
            "dropped": sum(self.req_dropped),
        }
        requests["in_flight"] = (
            requests["arrivals"]
            - requests["successes"]
            - requests["abandoned"]
            - requests["dropped"]
        )
        servers = {}
        for i, sid in enumerate(sids):
            servers[sid] = {
                "enqueued": self.att_enqueued[i],
                "completed": self.att_completed[i],
                "rejected": self.att_rejected[i],
                "residual": self.att_enqueued[i] - self.att_completed[i],
                "jobs_in_system": self.u[i],
            }
        return {"requests": requests, "servers": servers}


def check_ledger(ledger: dict) -> None:
    """Raise unless every conservation identity balances exactly."""
    req = ledger["requests"]
    if req["arrivals"] != req["successes"] + req["abandoned"] + req["dropped"] + req["in_flight"]:
        raise SimulationError(f"request ledger out of balance: {req}")
    if req["in_flight"] < 0:
        raise SimulationError(f"negative in-flight count: {req}")
    for sid, s in ledger["servers"].items():
        if s["residual"] != s["jobs_in_system"]:
            raise SimulationError(f"server {sid!r} attempt ledger out of balance: {s}")
        if s["residual"] < 0:
            raise SimulationError(f"server {sid!r} negative residual: {s}")


def simulate(
    program: ProgramSpec,
    horizon: float,
    sample_period: float,
    seed=None,
    init: dict[str, tuple[int, int]] | None = None,
    schedule: Schedule | None = None,
    retry_backoff: float = 0.0,
) -> Trajectory:
    """Run one simulation and return the sampled trajectory.

    ``init`` maps server ids to (jobs in system, retrying requests) at t=0;
    retries fire ``retry_backoff`` seconds after a timeout (0 = immediately).
    """
    if horizon <= 0 or sample_period <= 0:
        raise SimulationError("horizon and sample period must be positive")
    if retry_backoff < 0:
        raise SimulationError("retry backoff must be >= 0")
    eng = _Engine(program, seed, init, schedule, retry_backoff)
    times, sids, rec = eng.run(horizon, sample_period)
    ledger = eng.ledger()
    check_ledger(ledger)
    return Trajectory(
        program=program.name,
        sample_period=sample_period,
        times=times,
        servers=sids,
        u=rec["u"],
        v_hat=rec["v_hat"],
        latency_mean=rec["latency_mean"],
        goodput=rec["goodput"],
        drops=rec["drops"],
        ledger=ledger,
        seed=seed,
    )


def ensemble_average(
    program: ProgramSpec,
    runs: int,
    horizon: float,
    sample_period: float,
    seed=None,
    **kwargs,
) -> tuple[Trajectory, list[Trajectory]]:
    """Average ``runs`` independent trajectories (spawned seed streams)."""
    if runs < 1:
        raise SimulationError("need at least one run")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(runs)
    trajectories = [
        simulate(program, horizon, sample_period, seed=child, **kwargs)
        for child in children
    ]
    first = trajectories[0]
    mean = {
        key: {
            sid: np.mean([getattr(tr, key)[sid] for tr in trajectories], axis=0)
            for sid in first.servers
        }
        for key in ("u", "v_hat", "goodput", "drops")
    }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN sample slots
        lat = {
            sid: np.nanmean(
                np.vstack([tr.latency_mean[sid] for tr in trajectories]), axis=0
            )
            for sid in first.servers
        }
    avg = Trajectory(
        program=program.name,
        sample_period=sample_period,
        times=first.times.copy(),
        servers=list(first.servers),
        u=mean["u"],
        v_hat=mean["v_hat"],
        latency_mean=lat,
        goodput=mean["goodput"],
        drops=mean["drops"],
        ledger={"runs": runs},
        seed=seed,
    )
    return avg, trajectories
