"""Command-line runner: ``rlcert run`` executes a JSON run config, ``rlcert report``
collects run outputs into tidy, plot-ready CSV files.

Exit codes: 0 success, 1 internal error, 2 invalid config or input, 3 resource
cap hit (search budget, exact-oracle size).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .attack import AttackConfig, pgd_attack_episode, random_attack_episode
from .cert_action import certify_episode
from .cert_global import certify_global, sample_randomized_trajectories
from .cert_local_reward import SearchBudgetExceeded, certify
from .env import ENVIRONMENTS, FormatError, make_env
from .qfunc import GridQ, MlpQ, fit_mlp, load, value_iteration, value_iteration_table
from .smoothing import ResourceError, SmoothingConfig, estimate_range

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_RESOURCE = 0, 1, 2, 3
OUT_ENV_VAR = "RLCERT_OUT"
MODES = ("certify-action", "certify-reward-global", "certify-reward-local", "attack")
SCHEMA_OF_MODE = {"certify-action": "action-radius", "certify-reward-global": "reward-global",
                  "certify-reward-local": "reward-local", "attack": "attack"}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


# ---------------------------------------------------------------------------
# config schema

def _real(path, lo=None, hi=None, lo_open=False, hi_open=False, allow_inf=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {v!r}")
        v = float(v)
        if math.isnan(v) or (math.isinf(v) and not allow_inf):
            raise ConfigError(f"{path}: must be finite, got {v!r}")
        if lo is not None and (v <= lo if lo_open else v < lo):
            raise ConfigError(f"{path}: must be {'>' if lo_open else '>='} {lo}, got {v!r}")
        if hi is not None and (v >= hi if hi_open else v > hi):
            raise ConfigError(f"{path}: must be {'<' if hi_open else '<='} {hi}, got {v!r}")
        return v
    return check


def _int(path, lo=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{path}: expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"{path}: must be >= {lo}, got {v!r}")
        return v
    return check


def _choice(path, options):
    def check(v):
        if v not in options:
            raise ConfigError(f"{path}: must be one of {list(options)}, got {v!r}")
        return v
    return check


def _bool(path):
    def check(v):
        if not isinstance(v, bool):
            raise ConfigError(f"{path}: expected true or false, got {v!r}")
        return v
    return check


def _optional(check):
    return lambda v: None if v is None else check(v)


def _real_list(path, **bounds):
    def check(v):
        items = v if isinstance(v, list) else [v]
        if not items:
            raise ConfigError(f"{path}: must not be empty")
        return [_real(f"{path}[{i}]", **bounds)(x) for i, x in enumerate(items)]
    return check


def _section(raw, path, fields):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; allowed {sorted(fields)}")
    out = {}
    for key, (default, check) in fields.items():
        sub = f"{path}.{key}" if path else key
        if key not in raw:
            if default is _REQUIRED:
                raise ConfigError(f"{sub}: required")
            # nested sections resolve their own defaults; lists are copied
            out[key] = check(sub)(default) if isinstance(default, dict) else copy.deepcopy(default)
        else:
            out[key] = check(sub)(raw[key])
    return out


_REQUIRED = object()


def _any_dict(path):
    def check(v):
        if not isinstance(v, dict):
            raise ConfigError(f"{path}: expected an object")
        return dict(v)
    return check


def _str(path):
    def check(v):
        if not isinstance(v, str) or not v:
            raise ConfigError(f"{path}: expected a non-empty string")
        return v
    return check


TOP_FIELDS = {
    "mode": (_REQUIRED, lambda p: _choice(p, MODES)),
    "env": (_REQUIRED, lambda p: lambda v: _section(v, p, ENV_FIELDS)),
    "q": ({}, lambda p: lambda v: _section(v, p, Q_FIELDS)),
    "smoothing": ({}, lambda p: lambda v: _section(v, p, SMOOTHING_FIELDS)),
    "horizon": (None, lambda p: _optional(_int(p, 1))),
    "gamma": (1.0, lambda p: _real(p, 0.0, 1.0)),
    "episodes": (1, lambda p: _int(p, 1)),
    "global": ({}, lambda p: lambda v: _section(v, p, GLOBAL_FIELDS)),
    "local": ({}, lambda p: lambda v: _section(v, p, LOCAL_FIELDS)),
    "attack": ({}, lambda p: lambda v: _section(v, p, ATTACK_FIELDS)),
    "output": (None, lambda p: _optional(_str(p))),
}
ENV_FIELDS = {
    "name": (_REQUIRED, lambda p: _choice(p, sorted(ENVIRONMENTS))),
    "params": ({}, _any_dict),
}
Q_FIELDS = {
    "source": ("value-iteration", lambda p: _choice(p, ("value-iteration", "weights"))),
    "gamma": (0.9, lambda p: _real(p, 0.0, 1.0, hi_open=True)),
    "model": ("grid", lambda p: _choice(p, ("grid", "mlp"))),
    "hidden": (64, lambda p: _int(p, 1)),
    "path": (None, lambda p: _optional(_str(p))),
}
SMOOTHING_FIELDS = {
    "sigma": ([0.1], lambda p: _real_list(p, lo=0.0, lo_open=True)),
    "m": (10000, lambda p: _int(p, 2)),
    "alpha": (0.05, lambda p: _real(p, 0.0, 1.0, lo_open=True, hi_open=True)),
    "seed": (0, lambda p: _int(p, 0)),
    "v_min": (None, lambda p: _optional(_real(p))),
    "v_max": (None, lambda p: _optional(_real(p))),
    "range_episodes": (5, lambda p: _int(p, 1)),
    "exact": (False, _bool),
}
GLOBAL_FIELDS = {
    "epsilon": ([0.0, 0.05, 0.1, 0.2], lambda p: _real_list(p, lo=0.0)),
    "p": (0.5, lambda p: _real(p, 0.0, 1.0, lo_open=True, hi_open=True)),
    "order_stats": ("exact", lambda p: _choice(p, ("exact", "normal"))),
}
LOCAL_FIELDS = {
    "eps_max": (None, lambda p: _optional(_real(p, 0.0, lo_open=True))),
    "pruning": (True, _bool),
    "max_nodes": (None, lambda p: _optional(_int(p, 1))),
    "max_seconds": (None, lambda p: _optional(_real(p, 0.0, lo_open=True))),
}
ATTACK_FIELDS = {
    "epsilon": ([0.0, 0.05, 0.1, 0.2], lambda p: _real_list(p, lo=0.0)),
    "method": ("random", lambda p: _choice(p, ("random", "pgd"))),
    "target": ("smoothed", lambda p: _choice(p, ("smoothed", "raw"))),
    "steps": (10, lambda p: _int(p, 1)),
    "trials": (32, lambda p: _int(p, 1)),
}


def validate_config(raw) -> dict:
    """Resolve defaults and check every field; raises ConfigError naming the field."""
    cfg = _section(raw, "", TOP_FIELDS)
    sm = cfg["smoothing"]
    if (sm["v_min"] is None) != (sm["v_max"] is None):
        raise ConfigError("smoothing.v_min/v_max: give both or neither")
    if sm["v_min"] is not None and not sm["v_min"] < sm["v_max"]:
        raise ConfigError("smoothing.v_max: must exceed smoothing.v_min")
    q = cfg["q"]
    if q["source"] == "weights" and q["path"] is None:
        raise ConfigError("q.path: required when q.source is 'weights'")
    if cfg["mode"] == "attack" and cfg["attack"]["method"] == "pgd":
        if q["source"] == "value-iteration" and q["model"] != "mlp":
            raise ConfigError("attack.method: 'pgd' needs a differentiable Q (set q.model to 'mlp')")
    if sm["exact"] and q["source"] == "value-iteration" and q["model"] != "grid":
        raise ConfigError("smoothing.exact: the exact oracle needs a grid Q (q.model 'grid')")
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    return validate_config(raw)


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# building blocks from a resolved config

def build_env(cfg):
    spec = cfg["env"]
    try:
        return make_env(spec["name"], **spec["params"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"env.params: {exc}") from None


def build_q(cfg, env):
    qc = cfg["q"]
    if qc["source"] == "weights":
        try:
            q = load(qc["path"])
        except OSError as exc:
            raise ConfigError(f"q.path: cannot read {qc['path']}: {exc.strerror}") from None
        except FormatError as exc:
            raise ConfigError(f"q.path: {exc}") from None
        if q.obs_dim != env.spec.obs_dim or q.num_actions != env.spec.num_actions:
            raise ConfigError(f"q.path: weights map {q.obs_dim} inputs to {q.num_actions} actions, "
                              f"{env.name} needs {env.spec.obs_dim} -> {env.spec.num_actions}")
    else:
        try:
            model = env.tabular_model()
        except NotImplementedError:
            raise ConfigError(f"q.source: {env.name} has no tabular model; use source 'weights'") from None
        if qc["model"] == "grid":
            q = value_iteration(model, qc["gamma"])
        else:
            table = value_iteration_table(model, qc["gamma"])
            centres = np.array([_cell_centre(model.cell_edges, c) for c in model.cell_of_state])
            q = fit_mlp(centres, table, hidden=qc["hidden"], seed=cfg["smoothing"]["seed"])
    if cfg["smoothing"]["exact"] and not isinstance(q, GridQ):
        raise ConfigError("smoothing.exact: the exact oracle needs a grid Q")
    if cfg["mode"] == "attack" and cfg["attack"]["method"] == "pgd" and not isinstance(q, MlpQ):
        raise ConfigError("attack.method: 'pgd' needs a differentiable Q")
    return q


def _cell_centre(edges, cell):
    return [0.5 * (e[i - 1] + e[i]) for e, i in zip(edges, cell)]


def resolve_range(cfg, env, q, H):
    sm = cfg["smoothing"]
    if sm["v_min"] is not None:
        return sm["v_min"], sm["v_max"]
    return estimate_range(env, q, sm["range_episodes"], horizon=H, seed=sm["seed"])


# ---------------------------------------------------------------------------
# one sigma of a run -> (csv rows, json records)

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _json_num(x):
    # JSON has no infinities; spell them as strings
    if x is not None and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def run_sigma(cfg, q, sigma: float, v_min: float, v_max: float):
    env = build_env(cfg)
    H = cfg["horizon"] or env.spec.horizon
    sm = cfg["smoothing"]
    scfg = SmoothingConfig(sigma=sigma, m=sm["m"], alpha=sm["alpha"], v_min=v_min, v_max=v_max,
                           seed=sm["seed"])
    mode, gamma = cfg["mode"], cfg["gamma"]
    rows, records = [], []
    for ep in range(cfg["episodes"]):
        seed = sm["seed"] + ep
        env.reset(seed)
        if mode == "certify-action":
            certs, ret = certify_episode(env, q, scfg, H, exact=sm["exact"])
            for c in certs:
                rows.append([sigma, ep, c.t, c.chosen_action, c.radius, *c.extended_radii[1:]])
            records.append({"sigma": sigma, "episode": ep, "steps": len(certs), "return": ret})
        elif mode == "certify-reward-global":
            gc = cfg["global"]
            tr = sample_randomized_trajectories(env, q, sigma, sm["m"], H, gamma, seed=seed)
            certs = certify_global(tr, env.spec, gc["epsilon"], gc["p"], sm["alpha"], gc["order_stats"])
            for c in certs:
                rows.append([sigma, ep, c.epsilon, c.p, c.p_prime, c.order_index,
                             c.expectation_bound, c.percentile_bound])
            records.append({"sigma": sigma, "episode": ep, "mean_return": float(np.mean(tr.returns)),
                            "certificates": [{"epsilon": c.epsilon, "expectation_bound": _json_num(c.expectation_bound),
                                              "percentile_bound": c.percentile_bound, "p_prime": c.p_prime,
                                              "order_index": c.order_index} for c in certs]})
        elif mode == "certify-reward-local":
            lc = cfg["local"]
            eps_max = math.inf if lc["eps_max"] is None else lc["eps_max"]
            cert = certify(env, q, scfg, H, eps_max, gamma, enable_pruning=lc["pruning"],
                           exact=sm["exact"], max_nodes=lc["max_nodes"], max_seconds=lc["max_seconds"])
            for e, b in cert.entries:
                rows.append([sigma, ep, e, b])
            records.append({"sigma": sigma, "episode": ep, **cert.to_dict()})
        else:
            ac = cfg["attack"]
            start = env.snapshot()
            for eps in ac["epsilon"]:
                env.restore(start)
                acfg = AttackConfig(eps, ac["steps"], ac["trials"], ac["target"], seed)
                if ac["method"] == "pgd":
                    res = pgd_attack_episode(env, q, acfg, scfg, H, gamma)
                else:
                    res = random_attack_episode(env, q, acfg, scfg, H, exact=sm["exact"], gamma=gamma)
                rows.append([sigma, ep, eps, ac["method"], ac["target"], seed, res.ret])
            records.append({"sigma": sigma, "episode": ep})
    return rows, records


def _columns(mode, num_actions):
    if mode == "certify-action":
        return ["sigma", "episode", "t", "action", "radius"] + [f"radius_k{k}" for k in range(1, num_actions)]
    if mode == "certify-reward-global":
        return ["sigma", "episode", "epsilon", "p", "p_prime", "order_index",
                "expectation_bound", "percentile_bound"]
    if mode == "certify-reward-local":
        return ["sigma", "episode", "epsilon", "lower_bound"]
    return ["sigma", "episode", "epsilon", "method", "target", "seed", "attacked_return"]


def provenance_lines(cfg, schema: str) -> list[str]:
    sm = cfg["smoothing"]
    eps_seeds = f"{sm['seed']}..{sm['seed'] + cfg['episodes'] - 1}"
    return [
        f"schema: {schema}",
        f"config-sha256: {config_hash(cfg)}",
        f"alpha: {sm['alpha']!r}; m: {sm['m']}; sigma: {' '.join(repr(s) for s in sm['sigma'])}",
        f"seeds: smoothing={sm['seed']} episodes={eps_seeds}",
        f"versions: rlcert={__version__} numpy={np.__version__} scipy={scipy.__version__} "
        f"python={platform.python_version()}",
        f"config: {canonical(cfg)}",
    ]


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def execute(cfg, out_dir: Path, name: str, jobs: int = 1) -> list[Path]:
    """Run a resolved config and write ``<name>.csv`` and ``<name>.json`` into ``out_dir``."""
    env = build_env(cfg)
    q = build_q(cfg, env)
    H = cfg["horizon"] or env.spec.horizon
    v_min, v_max = resolve_range(cfg, env, q, H)
    sigmas = cfg["smoothing"]["sigma"]
    if jobs > 1 and len(sigmas) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(sigmas))) as pool:
            parts = list(pool.map(run_sigma, [cfg] * len(sigmas), [q] * len(sigmas), sigmas,
                                  [v_min] * len(sigmas), [v_max] * len(sigmas)))
    else:
        parts = [run_sigma(cfg, q, s, v_min, v_max) for s in sigmas]

    schema = SCHEMA_OF_MODE[cfg["mode"]]
    buf = io.StringIO()
    for line in provenance_lines(cfg, schema):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_columns(cfg["mode"], env.spec.num_actions))
    for rows, _ in parts:
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    doc = {"schema": schema, "config_sha256": config_hash(cfg), "config": cfg,
           "versions": {"rlcert": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                        "python": platform.python_version()},
           "value_range": [v_min, v_max], "horizon": H,
           "results": [rec for _, recs in parts for rec in recs]}
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{name}.csv", out_dir / f"{name}.json"
    _write_atomic(csv_path, buf.getvalue())
    _write_atomic(json_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return [csv_path, json_path]


# ---------------------------------------------------------------------------
# report

class ReportError(ValueError):
    pass


def read_result_csv(path: Path):
    """(meta dict from '# key: value' lines, header, rows)."""
    meta, lines = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(":")
                meta[key.strip()] = value.strip()
            else:
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, None)
    return meta, header, list(reader)


def _float(s):
    return float(s) if s != "" else None


def report(results_dir, out_dir=None) -> list[Path]:
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise ReportError(f"{results_dir}: not a directory")
    files = sorted(results_dir.glob("*.csv"))
    if not files:
        raise ReportError(f"{results_dir}: no result CSV files to report on (empty input)")
    by_schema: dict[str, list] = {}
    unknown = []
    for f in files:
        meta, header, rows = read_result_csv(f)
        schema = meta.get("schema")
        if schema not in SCHEMA_OF_MODE.values() or header is None:
            unknown.append(f.name)
            continue
        by_schema.setdefault(schema, []).append((f, header, rows))
    if unknown:
        raise ReportError("files without a recognised result schema: " + ", ".join(unknown))
    for schema, items in by_schema.items():
        headers = {tuple(h) for _, h, _ in items}
        if len(headers) > 1:
            listing = "; ".join(f"{f.name} [{','.join(h)}]" for f, h, _ in items)
            raise ReportError(f"incompatible column layouts for schema {schema}: {listing}")

    out_dir = Path(out_dir) if out_dir is not None else results_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(x) for x in r] for r in rows])
        path = out_dir / name
        _write_atomic(path, buf.getvalue())
        written.append(path)

    if "action-radius" in by_schema:
        steps, ratios = [], []
        for f, header, rows in by_schema["action-radius"]:
            col = {c: i for i, c in enumerate(header)}
            groups: dict[float, list[float]] = {}
            for r in rows:
                sigma, radius = float(r[col["sigma"]]), float(r[col["radius"]])
                steps.append([f.stem, sigma, int(r[col["episode"]]), int(r[col["t"]]), radius])
                groups.setdefault(sigma, []).append(radius)
            for sigma, radii in groups.items():
                radii = np.array(radii)
                for thr in np.unique(np.concatenate([[0.0], radii[np.isfinite(radii)]])):
                    ratios.append([f.stem, sigma, float(thr), float(np.mean(radii >= thr))])
        emit("radius_vs_step.csv", ["run", "sigma", "episode", "t", "radius"], steps)
        emit("certified_ratio.csv", ["run", "sigma", "radius_threshold", "certified_ratio"], ratios)

    reward = []
    for schema, series_cols in (("reward-local", [("local", "lower_bound")]),
                                ("reward-global", [("expectation", "expectation_bound"),
                                                   ("percentile", "percentile_bound")]),
                                ("attack", None)):
        for f, header, rows in by_schema.get(schema, []):
            col = {c: i for i, c in enumerate(header)}
            for r in rows:
                base = [f.stem, float(r[col["sigma"]]), int(r[col["episode"]])]
                eps = float(r[col["epsilon"]])
                if series_cols is None:
                    reward.append(base + [f"attack-{r[col['method']]}", eps, float(r[col["attacked_return"]])])
                    continue
                for series, c in series_cols:
                    reward.append(base + [series, eps, _float(r[col[c]])])
    if reward:
        emit("reward_vs_eps.csv", ["run", "sigma", "episode", "series", "epsilon", "value"], reward)
    return written


# ---------------------------------------------------------------------------
# entry point

def _parser():
    ap = argparse.ArgumentParser(prog="rlcert", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a JSON run config")
    run.add_argument("config", nargs="?", help="config path (same as --config)")
    run.add_argument("--config", dest="config_flag", help="config path")
    run.add_argument("--out", help=f"output directory (default: config 'output', ${OUT_ENV_VAR}, ./results)")
    run.add_argument("--seed", type=int, help="override smoothing.seed")
    run.add_argument("--jobs", type=int, default=1, help="parallel workers across sigma values")
    rep = sub.add_parser("report", help="collect run outputs into tidy CSV files")
    rep.add_argument("results_dir")
    rep.add_argument("--out", help="directory for the report files (default: <results_dir>/report)")
    return ap


def _err(msg):
    print(f"rlcert: {msg}", file=sys.stderr)


def cmd_run(args) -> int:
    path = args.config_flag or args.config
    if path is None:
        _err("config error: no config given (use --config PATH)")
        return EXIT_CONFIG
    if args.jobs < 1:
        _err("config error: --jobs must be >= 1")
        return EXIT_CONFIG
    try:
        cfg = load_config(path)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed: must be >= 0")
            cfg["smoothing"]["seed"] = args.seed
        out = args.out or cfg["output"] or os.environ.get(OUT_ENV_VAR) or "results"
        written = execute(cfg, Path(out), Path(path).stem, args.jobs)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except SearchBudgetExceeded as exc:
        _err(f"resource cap: {exc}")
        return EXIT_RESOURCE
    except ResourceError as exc:
        _err(f"resource cap: {exc}")
        return EXIT_RESOURCE
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        _err(f"internal error: {type(exc).__name__}: {exc}")
        return EXIT_INTERNAL
    for p in written:
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        written = report(args.results_dir, args.out)
    except ReportError as exc:
        _err(f"report error: {exc}")
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        _err(f"internal error: {type(exc).__name__}: {exc}")
        return EXIT_INTERNAL
    for p in written:
        print(p)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return cmd_report(args)


if __name__ == "__main__":
    sys.exit(main())
