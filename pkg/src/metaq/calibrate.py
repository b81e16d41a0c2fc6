"""Fit model parameters so CTMC queue trajectories track simulation means.

The loss is a proximity penalty on the parameter vector plus the summed L2
distance between the model's expected queue-length curves and ensemble-mean
simulated curves, evaluated from several initial conditions (typically an
empty system and a fully congested one).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import poisson

from metaq.analysis import _poisson_window, _uniformized, observable_jobs, observable_orbit
from metaq.cmaes import CmaEs
from metaq.ctmc import compile_ctmc
from metaq.des import ensemble_average
from metaq.model import ParamVector, ProgramSpec, substitute_params

SERIES_TOL = 1e-8  # per-point truncation for the fitted transient curves


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingSet:
    """Ensemble-mean queue curves from one initial condition."""

    label: str
    init: dict  # server id -> (u0, v0)
    times: np.ndarray
    u: dict  # server id -> mean jobs-in-system series
    v: dict | None = None  # server id -> mean retrying-requests series


@dataclass
class CalibrationResult:
    theta0: dict
    theta_star: dict
    best_loss: float
    history: list  # best loss per generation
    generations: int
    popsize: int
    evaluations: int
    seed: object = None
    box: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "theta0": self.theta0,
            "theta_star": self.theta_star,
            "best_loss": self.best_loss,
            "history": self.history,
            "generations": self.generations,
            "popsize": self.popsize,
            "evaluations": self.evaluations,
            "seed": repr(self.seed) if self.seed is not None else None,
            "box": {k: list(v) for k, v in self.box.items()},
        }
        return json.dumps(doc, indent=2)


def standard_inits(program: ProgramSpec) -> dict[str, dict]:
    """The two canonical starting conditions: idle, and saturated."""
    empty = {s.id: (0, 0) for s in program.servers}
    full = {s.id: (s.queue_bound, s.orbit_bound) for s in program.servers}
    return {"empty": empty, "full": full}


def collect_training_data(
    program: ProgramSpec,
    runs: int,
    horizon: float,
    sample_period: float,
    seed=None,
    inits: dict[str, dict] | None = None,
) -> list[TrainingSet]:
    """Simulate ``runs`` trajectories per initial condition and average them."""
    inits = inits or standard_inits(program)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(len(inits))
    out = []
    for child, (label, init) in zip(children, sorted(inits.items())):
        mean, _ = ensemble_average(
            program, runs, horizon, sample_period, seed=child, init=init
        )
        out.append(
            TrainingSet(
                label=label, init=dict(init), times=mean.times, u=mean.u, v=mean.v_hat
            )
        )
    return out


def save_training_data(datasets: list[TrainingSet], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "server_id", "init_u", "init_v", "t", "u", "v"])
        for ds in datasets:
            for sid, series in ds.u.items():
                u0, v0 = ds.init[sid]
                vs = ds.v[sid] if ds.v else [math.nan] * len(series)
                for t, u, v in zip(ds.times, series, vs):
                    w.writerow(
                        [ds.label, sid, u0, v0, f"{t:.10g}", f"{u:.10g}", f"{v:.10g}"]
                    )


def load_training_data(path) -> list[TrainingSet]:
    rows: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = rows.setdefault(row["label"], {"init": {}, "times": {}, "u": {}})
            sid = row["server_id"]
            d["init"][sid] = (int(row["init_u"]), int(row["init_v"]))
            d["u"].setdefault(sid, []).append(float(row["u"]))
            d.setdefault("v", {}).setdefault(sid, []).append(
                float(row["v"]) if row.get("v") not in (None, "") else math.nan
            )
            d["times"].setdefault(sid, []).append(float(row["t"]))
    datasets = []
    for label, d in rows.items():
        first_sid = next(iter(d["u"]))
        datasets.append(
            TrainingSet(
                label=label,
                init=d["init"],
                times=np.asarray(d["times"][first_sid]),
                u={sid: np.asarray(vs) for sid, vs in d["u"].items()},
                v={sid: np.asarray(vs) for sid, vs in d.get("v", {}).items()},
            )
        )
    if not datasets:
        raise CalibrationError(f"no training data in {path}")
    return datasets


def model_queue_curves(m, start_states, times, tol=SERIES_TOL, kind="u") -> np.ndarray:
    """E[jobs] (or E[orbit]) curves for several point-mass starts in one sweep.

    Propagates the weight vectors (one per server) instead of distributions,
    so adding start states costs nothing: shape (starts, servers, times).
    """
    times = np.asarray(times, dtype=float)
    K = m.program.num_servers
    obs = observable_jobs if kind == "u" else observable_orbit
    W = np.column_stack([obs(m, s) for s in range(K)])
    P, rate = _uniformized(m)
    n_t = times.size
    out = np.empty((len(start_states), K, n_t))
    if rate == 0.0 or n_t == 0:
        for a, s0 in enumerate(start_states):
            out[a] = np.repeat(W[s0][:, None], n_t, axis=1)
        return out
    k_max = _poisson_window(rate * float(times.max()), tol)[1]
    proj = np.empty((k_max + 1, len(start_states), K))
    Wk = W.copy()
    starts = np.asarray(start_states, dtype=int)
    for k in range(k_max + 1):
        proj[k] = Wk[starts]
        if k < k_max:
            Wk = P @ Wk
    for j, t in enumerate(times):
        if t == 0.0:
            out[:, :, j] = proj[0]
            continue
        lo, hi = _poisson_window(rate * t, tol)
        ks = np.arange(lo, min(hi, k_max) + 1)
        pmf = poisson.pmf(ks, rate * t)
        out[:, :, j] = np.tensordot(pmf, proj[ks], axes=(0, 0)) / pmf.sum()
    return out


def loss(
    program: ProgramSpec,
    theta: dict,
    theta0: dict,
    datasets: list[TrainingSet],
    gamma1: float = 1.0,
    gamma2: float | None = None,
    force_chebyshev: bool = False,
    include_orbit: bool = False,
) -> float:
    """Proximity-to-nominal penalty plus summed squared curve mismatch.

    The fitted observable is the queue series; include_orbit adds the
    retrying-requests series to the squared-distance term.
    """
    if gamma2 is None:
        n_pts = sum(ds.times.size for ds in datasets)
        gamma2 = 1.0 / max(n_pts, 1)
    total = gamma1 * sum((theta[k] - theta0[k]) ** 2 for k in theta)
    prog = substitute_params(program, theta)
    m = compile_ctmc(prog, force_chebyshev=force_chebyshev)
    starts = []
    for ds in datasets:
        coords = tuple(
            (min(ds.init[s.id][0], m.bounds[i][0]), min(ds.init[s.id][1], m.bounds[i][1]))
            for i, s in enumerate(prog.servers)
        )
        starts.append(m.index_of(coords))
    kinds = [("u", lambda ds: ds.u)]
    if include_orbit:
        kinds.append(("v", lambda ds: ds.v or {}))
    # all datasets share one time grid in practice; recompute if they differ
    shared_grid = len({tuple(np.round(ds.times, 12)) for ds in datasets}) == 1
    for kind, pick in kinds:
        if shared_grid:
            curves = model_queue_curves(m, starts, datasets[0].times, kind=kind)
        for a, ds in enumerate(datasets):
            if shared_grid:
                cur = curves[a]
            else:
                cur = model_queue_curves(m, [starts[a]], ds.times, kind=kind)[0]
            target = pick(ds)
            for i, s in enumerate(prog.servers):
                if s.id in target and not np.any(np.isnan(target[s.id])):
                    diff = cur[i] - target[s.id]
                    total += gamma2 * float(diff @ diff)
    return total


def calibrate(
    program: ProgramSpec,
    datasets: list[TrainingSet],
    box: dict[str, tuple[float, float]],
    generations: int = 30,
    seed=None,
    popsize: int | None = None,
    sigma0_frac: float = 0.3,
    gamma1: float = 1.0,
    gamma2: float | None = None,
    force_chebyshev: bool = False,
    include_orbit: bool = False,
) -> CalibrationResult:
    """Search the box for the parameter vector minimizing the fitting loss.

    ``box`` names the free parameters (lambda_i / mu_i / timeout_i); all
    others stay at their program values.  The search starts from the nominal
    vector with step size sigma0_frac of the narrowest box width; the result
    is never worse than the nominal vector (which is always evaluated).
    """
    if generations < 1:
        raise CalibrationError("need at least one generation")
    names = sorted(box)
    if not names:
        raise CalibrationError("box must name at least one parameter")
    theta0_full = program.nominal_params()
    theta0 = {k: theta0_full[k] for k in names}
    bounds = [tuple(map(float, box[k])) for k in names]
    for k, (lo, hi) in zip(names, bounds):
        if not (lo <= theta0[k] <= hi):
            raise CalibrationError(f"nominal {k}={theta0[k]} outside box [{lo}, {hi}]")

    def f(theta: dict) -> float:
        return loss(
            program,
            theta,
            theta0,
            datasets,
            gamma1=gamma1,
            gamma2=gamma2,
            force_chebyshev=force_chebyshev,
            include_orbit=include_orbit,
        )

    x0 = np.array([theta0[k] for k in names])
    sigma0 = sigma0_frac * min(hi - lo for lo, hi in bounds)
    es = CmaEs(x0, sigma0, bounds, seed=seed, popsize=popsize)
    f0 = f(theta0)
    evaluations = 1
    history = []
    for _ in range(generations):
        xs = es.ask()
        fs = []
        for x in xs:
            fs.append(f(dict(zip(names, (float(v) for v in x)))))
            evaluations += 1
        es.tell(xs, fs)
        history.append(min(es.best_f, f0))
    if f0 <= es.best_f:
        theta_star, best = dict(theta0), f0
    else:
        theta_star, best = dict(zip(names, (float(v) for v in es.best_x))), es.best_f
    return CalibrationResult(
        theta0=theta0,
        theta_star=theta_star,
        best_loss=best,
        history=history,
        generations=generations,
        popsize=es.lam,
        evaluations=evaluations,
        seed=seed,
        box={k: tuple(v) for k, v in box.items()},
    )


def curve_distance(
    program: ProgramSpec, theta: dict, datasets: list[TrainingSet]
) -> float:
    """Root-sum-square distance between model curves and the dataset means."""
    total = loss(program, theta, theta, datasets, gamma1=0.0, gamma2=1.0)
    return math.sqrt(total)
