"""Command line: selftest | alpha-sweep | concentrate | diffuse.

Every run writes CSV files and a JSON manifest (config echo, version,
stage timings, deviations, checksums) into --out.  A failing run still
writes a manifest carrying the error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile

CSV_HEADERS = {
    "alpha_sweep.csv": ["c", "alpha_single", "alpha_vlasov", "rotation_number", "gap"],
    "concentration.csv": ["t", "interaction_energy", "dist_statistic", "velocity_mismatch"],
    "windows.csv": ["window", "class", "t0", "t1", "action", "mean_velocity_extension",
                    "mean_velocity_particles", "penalty_rounds"],
    "visits.csv": ["i", "class", "eps", "statistic", "t", "pass"],
}


def _fmt(x) -> str:
    if isinstance(x, (bool,)) or type(x).__name__ == "bool_":
        return "1" if x else "0"
    if isinstance(x, int) or type(x).__name__.startswith("int"):
        return str(int(x))
    return "%.17g" % float(x)


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str, header: list[str], rows) -> None:
    """Comma separated, header row, LF endings, 17 significant digits."""
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_fmt(x) for x in r))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path: str):
    import numpy as np
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    def __init__(self, command: str, config: dict, out: str, threads):
        from . import __version__
        self.out = out
        self.doc = {"command": command, "version": __version__, "config": config,
                    "threads": threads, "timings": {}, "deviations": {}, "files": [],
                    "status": "running"}

    def add_file(self, name: str):
        path = os.path.join(self.out, name)
        self.doc["files"].append({"name": name, "bytes": os.path.getsize(path),
                                  "sha256": sha256(path)})

    def write(self, status: str, error: dict | None = None):
        self.doc["status"] = status
        if error is not None:
            self.doc["error"] = error
        data = json.dumps(self.doc, indent=2, sort_keys=True, default=_json_default) + "\n"
        _atomic_write(os.path.join(self.out, "manifest.json"), data.encode("utf-8"))


def _json_default(o):
    try:
        import numpy as np
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
    except ImportError:  # pragma: no cover
        pass
    raise TypeError(f"not serializable: {type(o).__name__}")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    import yaml
    with open(path, encoding="utf-8") as fh:
        d = yaml.safe_load(fh)
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ValueError(f"config {path} must be a mapping of flat keys")
    return d


# ---------------------------------------------------------------- commands

def cmd_selftest(cfg, out, man, timer) -> int:
    from .experiments import selftest_suites
    with timer("suites"):
        suites = selftest_suites(cfg)
    rows = []
    for name, checks, fails, note in suites:
        status = "PASS" if fails == 0 else "FAIL"
        print(f"{status} {name}: {checks - fails}/{checks} {note}".rstrip())
        rows.append({"suite": name, "checks": checks, "failures": fails, "note": note})
    man.doc["report"] = rows
    failed = [r["suite"] for r in rows if r["failures"]]
    if failed:
        print(f"failed suites: {', '.join(failed)}")
        return 1
    return 0


def cmd_alpha_sweep(cfg, out, man, timer) -> int:
    from .experiments import alpha_sweep
    rows = alpha_sweep(cfg, timer)
    write_csv(os.path.join(out, "alpha_sweep.csv"), CSV_HEADERS["alpha_sweep.csv"], rows)
    man.add_file("alpha_sweep.csv")
    return 0


def cmd_concentrate(cfg, out, man, timer) -> int:
    from .experiments import concentration_run
    res = concentration_run(cfg, timer)
    write_csv(os.path.join(out, "concentration.csv"), CSV_HEADERS["concentration.csv"], res["series"])
    man.add_file("concentration.csv")
    S = res["series"]
    man.doc["summary"] = {"interaction_energy_initial": S[0, 1],
                          "interaction_energy_final": S[-1, 1], "action": res["value"]}
    return 0


def cmd_diffuse(cfg, out, man, timer) -> int:
    from .experiments import diffuse_run
    res = diffuse_run(cfg, timer)
    r = res["result"]
    sched = res["schedule"]
    traj = r.traj
    n = traj.n
    header = ["t"] + [f"q{i}" for i in range(n)] + ["extension_q", "extension_v"]
    import numpy as np
    rows = np.column_stack([traj.times, traj.nodes, res["ext_q"], res["ext_v"]])
    write_csv(os.path.join(out, "trajectory.csv"), header, rows)
    write_csv(os.path.join(out, "windows.csv"), CSV_HEADERS["windows.csv"], res["windows"])
    v = res["visits"]
    vis = [(i, sched.c_list[i], sched.eps_list[i], v.statistic[i], v.t_at[i], bool(v.passed[i]))
           for i in range(sched.c_list.size)]
    write_csv(os.path.join(out, "visits.csv"), CSV_HEADERS["visits.csv"], vis)
    for name in ("trajectory.csv", "windows.csv", "visits.csv"):
        man.add_file(name)
    man.doc["schedule"] = sched.to_dict()
    man.doc["deviations"] = {
        "surrogate_bounds": r.report.surrogate_bounds,
        "penalty_rounds": r.report.penalty_rounds,
        "polish_mode": r.report.polish_mode,
    }
    man.doc["verification"] = {"conditions": r.report.ab.to_dict(),
                               "el_residual": r.report.el_residual,
                               "el_residual_rows": r.report.el_residual_rows,
                               "extension_ok": r.report.extension_ok,
                               "visits": v.to_dict()}
    return 0


COMMANDS = {"selftest": cmd_selftest, "alpha-sweep": cmd_alpha_sweep,
            "concentrate": cmd_concentrate, "diffuse": cmd_diffuse}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vlasovkam", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="YAML file of flat keys")
    ap.add_argument("--out", default="out", help="output directory (default: out)")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--threads", type=int, default=1,
                    help="BLAS threads for this process (default 1)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    # must precede the first numpy import to take effect
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    os.makedirs(args.out, exist_ok=True)
    raw = {}
    man = Manifest(args.command, raw, args.out, args.threads)
    try:
        raw.update(load_config(args.config))
        if args.seed is not None:
            raw["seed"] = args.seed
        from .experiments import ExperimentConfig, Timer
        cfg = ExperimentConfig.from_mapping(raw)
        man.doc["config"] = cfg.values
        timer = Timer()
        man.doc["timings"] = timer.stages
        code = COMMANDS[args.command](cfg, args.out, man, timer)
    except Exception as exc:
        err = {"type": type(exc).__name__, "message": str(exc)}
        for attr in ("window", "t", "step", "residual", "iterations"):
            if getattr(exc, attr, None) is not None:
                err[attr] = getattr(exc, attr)
        man.write("error", err)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    man.write("ok" if code == 0 else "failed")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
