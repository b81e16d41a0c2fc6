"""Command-line front end: validate, simulate, compile, analyze, field,
calibrate, recover.

Every run writes a manifest (command, seeds, output hashes) next to its
outputs; files are written atomically; errors go to stderr as JSON with
exit code 2 for usage/config problems and 1 for solver failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import re
import sys
import tempfile
import time

import numpy as np

from metaq import analysis, calibrate as cal, ctmc, des, model

try:
    from importlib.metadata import version as _pkg_version

    VERSION = _pkg_version("metaq")
except Exception:  # not installed (running from a checkout)
    VERSION = "0.0.0"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# output plumbing


def _atomic_write(path: str, data: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects outputs for the manifest and handles atomic writes."""

    def __init__(self, command: str, out_dir: str, seed, configs: list[str]):
        self.command = command
        self.out_dir = out_dir
        self.seed = seed
        self.configs = configs
        self.started = time.time()
        self.outputs: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_text(self, name: str, data: str) -> str:
        p = self.path(name)
        _atomic_write(p, data)
        self.outputs.append(p)
        return p

    def write_rows(self, name: str, header: list[str], rows) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(header)
        for row in rows:
            w.writerow(row)
        return self.write_text(name, buf.getvalue())

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "tool_version": VERSION,
            "argv": sys.argv[1:],
            "configs": [os.path.abspath(c) for c in self.configs],
            "seed": self.seed,
            "wall_time_s": round(time.time() - self.started, 3),
            "outputs": [
                {"path": os.path.abspath(p), "sha256": _sha256(p)} for p in self.outputs
            ],
        }
        _atomic_write(self.path("manifest.json"), json.dumps(manifest, indent=2))


# ---------------------------------------------------------------------------
# argument parsing helpers


def _load_program(path: str) -> model.ProgramSpec:
    try:
        with open(path) as fh:
            return model.parse_program(fh.read())
    except FileNotFoundError as e:
        raise UsageError(f"program file not found: {path}") from e


def _parse_overrides(text: str | None) -> dict[str, float]:
    """Parse "lambda_1=8,mu_1=10" into a parameter dict."""
    if not text:
        return {}
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"bad override {part!r}; expected name=value")
        name, value = part.split("=", 1)
        name = name.strip()
        if not any(name.startswith(pfx) for pfx in model.CALIBRATABLE_PREFIXES):
            raise UsageError(f"cannot override {name!r}")
        try:
            out[name] = float(value)
        except ValueError as e:
            raise UsageError(f"bad value in {part!r}") from e
    return out


_CMP = re.compile(r"^([uv])(\d*)\s*(<=|>=|==|<|>)\s*(\d+(?:\.\d+)?)$")
_OPS = {
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
    "==": lambda a, b: a == b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
}


def parse_state_set(spec: str, m: ctmc.CtmcModel) -> list[int]:
    """State-set expressions: comma-separated tokens unioned together.

    Tokens: "Low", "High", or comparisons on coordinates such as "u<=10"
    (every server) or "u2>=90" (one server).
    """
    states: set[int] = set()
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if token.lower() == "low":
            states.add(m.low_state())
            continue
        if token.lower() == "high":
            states.add(m.high_state())
            continue
        match = _CMP.match(token)
        if not match:
            raise UsageError(f"bad state-set token {token!r}")
        coord, idx, op, value = match.groups()
        value = float(value)
        pos = 0 if coord == "u" else 1
        which = int(idx) - 1 if idx else None
        if which is not None and not (0 <= which < m.program.num_servers):
            raise UsageError(f"token {token!r} names a server out of range")

        def pred(coords, pos=pos, which=which, op=op, value=value):
            if which is None:
                return all(_OPS[op](c[pos], value) for c in coords)
            return _OPS[op](coords[which][pos], value)

        states.update(m.states_where(pred))
    if not states:
        raise UsageError(f"state set {spec!r} selects no states")
    return sorted(states)


def _parse_fix(text: str | None, m: ctmc.CtmcModel) -> dict[int, tuple[int, int]]:
    """Fixed-plane coordinates: "s1=High" or "s1=12:3", comma separated."""
    out: dict[int, tuple[int, int]] = {}
    if not text:
        return out
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"bad fix {part!r}; expected server=coords")
        sid, val = (x.strip() for x in part.split("=", 1))
        try:
            i = m.program.server_index(sid)
        except KeyError as e:
            raise UsageError(f"unknown server {sid!r}") from e
        N, V = m.bounds[i]
        if val.lower() == "high":
            out[i] = (N, V)
        elif val.lower() == "low":
            out[i] = (0, 0)
        elif ":" in val:
            u, v = val.split(":", 1)
            out[i] = (int(u), int(v))
        else:
            raise UsageError(f"bad fix value {val!r}; use High, Low, or u:v")
    return out


def _parse_init(text: str | None, p: model.ProgramSpec) -> dict | None:
    """Initial condition: "empty", "full", or "server=u:v" pairs."""
    if not text:
        return None
    if text.lower() in ("empty", "full"):
        return cal.standard_inits(p)[text.lower()]
    out = {}
    for part in text.split(","):
        if "=" not in part or ":" not in part.split("=", 1)[1]:
            raise UsageError(f"bad init {part!r}; expected server=u:v")
        sid, val = (x.strip() for x in part.split("=", 1))
        u, v = val.split(":", 1)
        out[sid] = (int(u), int(v))
    return out


def _json_number(x):
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        return repr(x)
    return x


def _eig_json(vals: np.ndarray) -> list[dict]:
    return [{"re": float(v.real), "im": float(v.imag)} for v in vals]


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    p = _load_program(args.program)
    run = Run("validate", args.out_dir, None, [args.program])
    doc = {
        "program": p.name,
        "servers": [s.id for s in p.servers],
        "clients": len(p.clients),
        "nominal_params": dict(p.nominal_params().entries),
        "valid": True,
    }
    run.write_text("validate.json", json.dumps(doc, indent=2))
    run.finish()
    print(f"ok: {p.name} ({p.num_servers} server(s))")
    return 0


def cmd_simulate(args) -> int:
    p = _load_program(args.program)
    configs = [args.program]
    schedule = None
    if args.schedule:
        configs.append(args.schedule)
        try:
            with open(args.schedule) as fh:
                schedule = des.Schedule.from_json(fh.read())
        except FileNotFoundError as e:
            raise UsageError(f"schedule file not found: {args.schedule}") from e
    init = _parse_init(args.init, p)
    run = Run("simulate", args.out_dir, args.seed, configs)
    if args.runs == 1:
        tr = des.simulate(
            p, args.horizon, args.ts, seed=args.seed, init=init, schedule=schedule
        )
        tr.to_csv(run.path("trajectory.csv"))
        run.outputs.append(run.path("trajectory.csv"))
        run.write_text("ledger.json", json.dumps(tr.ledger, indent=2))
    else:
        mean, runs_list = des.ensemble_average(
            p, args.runs, args.horizon, args.ts, seed=args.seed, init=init,
            schedule=schedule,
        )
        for i, tr in enumerate(runs_list):
            name = f"run_{i:03d}.csv"
            tr.to_csv(run.path(name))
            run.outputs.append(run.path(name))
        mean.to_csv(run.path("mean.csv"))
        run.outputs.append(run.path("mean.csv"))
    run.finish()
    print(f"simulated {args.runs} run(s) over {args.horizon}s")
    return 0


def cmd_compile(args) -> int:
    p = _load_program(args.program)
    theta = _parse_overrides(args.params)
    if theta:
        p = model.substitute_params(p, theta)
    m = ctmc.compile_ctmc(p, force_chebyshev=args.force_chebyshev)
    ctmc.validate_generator(m)
    run = Run("compile", args.out_dir, None, [args.program])
    ctmc.export_matrix_market(m, run.path("generator.mtx"), run.path("states.csv"))
    run.outputs += [run.path("generator.mtx"), run.path("states.csv")]
    run.write_text(
        "model.json",
        json.dumps(
            {
                "program": p.name,
                "num_states": m.num_states,
                "nnz": int(m.Q.nnz),
                "bounds": [list(b) for b in m.bounds],
            },
            indent=2,
        ),
    )
    run.finish()
    print(f"compiled {m.num_states} states, {m.Q.nnz} transitions")
    return 0


def _analyze_payload(args, m: ctmc.CtmcModel):
    what = args.what
    if what == "stationary":
        pi = analysis.stationary_distribution(m)
        residual = float(np.abs(pi @ m.Q).max())
        rows = [
            (i, " ".join(f"{u}:{v}" for u, v in m.coords_of(i)), f"{pi[i]:.17g}")
            for i in range(m.num_states)
        ]
        doc = {
            "what": what,
            "residual_inf_norm": residual,
            "tolerance": 1e-10 * float(np.abs(m.Q.data).max()),
            "pi": [float(x) for x in pi],
        }
        return doc, (["state", "coords", "pi"], rows)
    if what == "hitting":
        D = parse_state_set(args.D, m)
        stats = analysis.hitting_time_std(m, D)
        rest = sorted(set(range(m.num_states)) - stats.target)
        res = m.Q[rest][:, rest] @ stats.expectation[rest] + 1.0
        doc = {
            "what": what,
            "target": D,
            "residual_rel": float(np.linalg.norm(res) / math.sqrt(len(rest)))
            if rest
            else 0.0,
            "tolerance": analysis.HITTING_RTOL,
            "expectation": [float(x) for x in stats.expectation],
            "std": [float(x) for x in stats.std],
        }
        rows = [
            (i, f"{stats.expectation[i]:.17g}", f"{stats.std[i]:.17g}")
            for i in range(m.num_states)
        ]
        return doc, (["state", "expected_hitting_time", "std"], rows)
    if what == "escape":
        D = parse_state_set(args.D, m)
        x = int(args.x) if args.x is not None else m.high_state()
        both = {
            method: analysis.escape_probability(m, x, D, method=method)
            for method in ("ctmc", "dtmc")
        }
        return {"what": what, "start": x, "target": D, **both}, None
    if what == "index":
        D = parse_state_set(args.D, m)
        rep = analysis.metastability_report(
            m, D, threshold=args.threshold, epsilon=args.epsilon
        )
        doc = {
            "what": what,
            "candidate_set": list(rep.candidate_set),
            "hitting_index": {
                "value": rep.hitting_index.value,
                "sup": rep.hitting_index.sup_term,
                "inf": rep.hitting_index.inf_term,
                "metastable": rep.hitting_index.metastable,
                "threshold": rep.hitting_index.threshold,
            },
            "escape_index": {
                "value": rep.escape_index.value,
                "sup": rep.escape_index.sup_term,
                "inf": rep.escape_index.inf_term,
                "metastable": rep.escape_index.metastable,
            },
            "nested_order": list(rep.nested_order),
            "eigenvalues": _eig_json(rep.eigenvalues),
            "mixing_time_lower_bound": _json_number(rep.mixing_time_bound),
            "epsilon": rep.epsilon,
        }
        return doc, None
    if what == "spectral":
        if args.D:
            D = parse_state_set(args.D, m)
            levels = analysis.spectral_hitting_estimate(m, D)
            return {"what": what, "levels": levels}, None
        vals = analysis.dominant_eigenvalues(m, args.k)
        return {"what": what, "eigenvalues": _eig_json(vals)}, None
    if what == "mixing":
        vals = analysis.dominant_eigenvalues(m, 2)
        lam2 = float(vals[1].real)
        bound = analysis.mixing_time_lower_bound(lam2, args.epsilon)
        return {
            "what": what,
            "lambda_2": lam2,
            "epsilon": args.epsilon,
            "mixing_time_lower_bound": bound,
        }, None
    raise UsageError(f"unknown analysis {what!r}")


def cmd_analyze(args) -> int:
    p = _load_program(args.program)
    theta = _parse_overrides(args.params)
    if theta:
        p = model.substitute_params(p, theta)
    m = ctmc.compile_ctmc(p, force_chebyshev=args.force_chebyshev)
    doc, table = _analyze_payload(args, m)
    run = Run("analyze", args.out_dir, None, [args.program])
    if args.format == "csv":
        if table is None:
            raise UsageError(f"--format csv not available for --what {args.what}")
        header, rows = table
        run.write_rows(f"{args.what}.csv", header, rows)
    else:
        run.write_text(f"{args.what}.json", json.dumps(doc, indent=2))
    run.finish()
    print(f"wrote {args.what} report to {args.out_dir}")
    return 0


def cmd_field(args) -> int:
    p = _load_program(args.program)
    theta = _parse_overrides(args.params)
    if theta:
        p = model.substitute_params(p, theta)
    m = ctmc.compile_ctmc(p, force_chebyshev=args.force_chebyshev)
    try:
        server = p.server_index(args.server) if args.server else 0
    except KeyError as e:
        raise UsageError(f"unknown server {args.server!r}") from e
    fixed = _parse_fix(args.fix, m)
    vf = analysis.vector_field(m, server=server, stride=args.stride, fixed=fixed)
    run = Run("field", args.out_dir, None, [args.program])
    rows = [
        (
            int(vf.u[i]),
            int(vf.v[i]),
            f"{vf.f_q[i]:.17g}",
            f"{vf.f_o[i]:.17g}",
            f"{vf.magnitude[i]:.17g}",
            f"{vf.angle[i]:.17g}",
        )
        for i in range(vf.u.size)
    ]
    run.write_rows("field.csv", ["u", "v", "f_q", "f_o", "magnitude", "angle_rad"], rows)
    run.finish()
    print(f"wrote {vf.u.size}-point field to {args.out_dir}")
    return 0


def cmd_calibrate(args) -> int:
    p = _load_program(args.program)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as e:
        raise UsageError(f"calibration config not found: {args.config}") from e
    try:
        box = {k: (float(v[0]), float(v[1])) for k, v in cfg["box"].items()}
        runs = int(cfg.get("runs", 100))
        horizon = float(cfg.get("horizon", 1800.0))
        ts = float(cfg.get("sample_period", 0.5))
        generations = int(cfg.get("generations", 30))
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"bad calibration config: {e}") from e
    seed = args.seed if args.seed is not None else cfg.get("seed")
    run = Run("calibrate", args.out_dir, seed, [args.program, args.config])
    data_path = run.path("training_data.csv")
    if args.reuse_data and os.path.exists(data_path):
        datasets = cal.load_training_data(data_path)
        run.outputs.append(data_path)
    else:
        datasets = cal.collect_training_data(p, runs, horizon, ts, seed=seed)
        cal.save_training_data(datasets, data_path)
        run.outputs.append(data_path)
    result = cal.calibrate(
        p,
        datasets,
        box,
        generations=generations,
        seed=seed,
        popsize=cfg.get("popsize"),
        gamma1=float(cfg.get("gamma1", 1.0)),
        gamma2=cfg.get("gamma2"),
        include_orbit=bool(cfg.get("include_orbit", False)),
    )
    run.write_text("calibration.json", result.to_json())
    run.finish()
    stars = ", ".join(f"{k}={v:.4g}" for k, v in result.theta_star.items())
    print(f"calibrated: {stars} (loss {result.best_loss:.6g})")
    return 0


def cmd_recover(args) -> int:
    p = _load_program(args.program)
    policy = _parse_overrides(args.policy)
    p_policy = model.substitute_params(p, policy) if policy else p
    m = ctmc.compile_ctmc(p_policy, force_chebyshev=args.force_chebyshev)
    start_set = parse_state_set(args.start, m)
    if len(start_set) != 1:
        raise UsageError(f"--start must select exactly one state, got {len(start_set)}")
    target_spec = args.target
    if target_spec is None:
        # default: every server drained to at most 10% of its queue bound
        parts = [f"u{i + 1}<={0.1 * b[0]:g}" for i, b in enumerate(m.bounds)]
        target_spec = ",".join(parts)
    target = parse_state_set(target_spec, m)
    times = np.arange(0.0, args.horizon + 1e-9, args.ts)
    rep = analysis.recovery_analysis(m, start_set[0], target, times=times)
    run = Run("recover", args.out_dir, None, [args.program])
    run.write_text(
        "recovery.json",
        json.dumps(
            {
                "policy": policy,
                "start": start_set[0],
                "target_size": len(target),
                "expected_time_s": rep.expected_time,
                "std_s": rep.std,
            },
            indent=2,
        ),
    )
    rows = [
        (f"{t:.10g}", f"{u:.10g}") for t, u in zip(rep.times, rep.expected_jobs)
    ]
    run.write_rows("recovery_curve.csv", ["t", "expected_jobs"], rows)
    run.finish()
    print(
        f"expected recovery {rep.expected_time:.6g}s (std {rep.std:.6g}s); "
        f"curve in {args.out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="metaq",
        description="Queueing-system metastability toolkit: simulate, compile, analyze.",
    )
    ap.add_argument("--out-dir", default=".", help="directory for outputs + manifest")
    ap.add_argument("--seed", type=int, default=None, help="master seed")
    ap.add_argument("--format", choices=("json", "csv"), default="json")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.add_argument("program", help="program JSON file")
        sp.set_defaults(fn=fn)
        return sp

    add("validate", cmd_validate, help="check a program file")

    sp = add("simulate", cmd_simulate, help="discrete-event simulation runs")
    sp.add_argument("--horizon", type=float, required=True)
    sp.add_argument("--ts", type=float, default=0.5, help="sample period (s)")
    sp.add_argument("--runs", type=int, default=1)
    sp.add_argument("--schedule", help="JSON file of timed parameter changes")
    sp.add_argument("--init", help='"empty", "full", or server=u:v pairs')

    sp = add("compile", cmd_compile, help="compile and export the generator")
    sp.add_argument("--params", help="overrides, e.g. lambda_1=8")
    sp.add_argument("--force-chebyshev", action="store_true")

    sp = add("analyze", cmd_analyze, help="stationary/hitting/escape/index/spectral/mixing")
    sp.add_argument(
        "--what",
        required=True,
        choices=("stationary", "hitting", "escape", "index", "spectral", "mixing"),
    )
    sp.add_argument("--D", help='state set, e.g. "Low,High" or "u<=10"')
    sp.add_argument("--x", help="start state index (escape)")
    sp.add_argument("-k", type=int, default=2, help="eigenvalue count (spectral)")
    sp.add_argument("--threshold", type=float, default=0.1)
    sp.add_argument("--epsilon", type=float, default=0.01)
    sp.add_argument("--params", help="overrides, e.g. lambda_1=8")
    sp.add_argument("--force-chebyshev", action="store_true")

    sp = add("field", cmd_field, help="drift vector field over one (u, v) plane")
    sp.add_argument("--server", help="server id (default: first)")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--fix", help='other-server coords, e.g. "s1=High"')
    sp.add_argument("--params", help="overrides")
    sp.add_argument("--force-chebyshev", action="store_true")

    sp = add("calibrate", cmd_calibrate, help="fit parameters to simulated curves")
    sp.add_argument("config", help="calibration config JSON")
    sp.add_argument("--reuse-data", action="store_true")

    sp = add("recover", cmd_recover, help="recovery time and transient queue curve")
    sp.add_argument("--policy", help="rate overrides, e.g. lambda_1=8")
    sp.add_argument("--start", default="High")
    sp.add_argument("--target", help="state set (default: u <= 10%% of bound)")
    sp.add_argument("--horizon", type=float, default=400.0)
    sp.add_argument("--ts", type=float, default=1.0)
    sp.add_argument("--force-chebyshev", action="store_true")
    return ap


_USAGE_ERRORS = (
    UsageError,
    model.ProgramError,
    des.SimulationError,
    cal.CalibrationError,
)
_SOLVER_ERRORS = (
    analysis.AnalysisError,
    ctmc.GeneratorError,
    ctmc.CapacityError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except _SOLVER_ERRORS as e:
        _emit_error(e, 1)
        return 1
    except _USAGE_ERRORS as e:
        _emit_error(e, 2)
        return 2
    except (OSError, json.JSONDecodeError, ValueError) as e:
        _emit_error(e, 2)
        return 2


def _emit_error(e: Exception, code: int) -> None:
    doc = {"error": {"type": type(e).__name__, "message": str(e), "exit_code": code}}
    print(json.dumps(doc), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
