"""Command-line harness: subcommands, key=value configs, atomic outputs and a run index."""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .dyadic import (DEPTH_CAP, DyadicSet, box_counts, box_dimension_fit, calibrate_grid_constant,
                     dyadic_content, read_dyset)
from .errors import ConfigError, DomainError, ParameterError, ResolutionError
from .fractals import BUILTINS, load_ifs, rasterize_ifs, similarity_dimension
from .geometry import Direction, complement_frame, sample_direction
from .measures import natural_measure
from .rng import job_rng
from .slicing import heavy_set, slice_spectrum, slice_spectrum_csv
from .spectral import direction_average_sobolev, energy_fourier_check
from .visibility import decompose, direction_average_experiment, solve_parameters, visible_cells

DEFAULTS = {
    "set": "carpet", "depth": "8", "mode": "regular", "s": "similarity", "epsilon": "0.05",
    "deltas": "2^-8", "directions": "8", "seed": "0", "out": "runs", "beta": "0.1",
    "sigma": "0.2", "n": "1", "trials": "10000", "M": "", "cutoff": "", "strict": "false",
    "pgm": "false", "t": "1.0",
}
KINDS = ("vis-average", "decompose", "slice-spectrum", "heavy-set", "sobolev-average", "calibrate")


# ---------------------------------------------------------------------------
# configuration

def read_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path!r} does not exist")
    cfg = {}
    for i, ln in enumerate(p.read_text().splitlines(), 1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise ConfigError(f"{path}:{i}: expected key=value, got {ln!r}")
        k, v = (x.strip() for x in ln.split("=", 1))
        cfg[k] = v
    return cfg


def merge_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags (flags win)."""
    cfg = dict(DEFAULTS)
    cfg["jobs"] = os.environ.get("VISIFRAC_JOBS", "1")
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for k, v in vars(args).items():
        if k in ("config", "func", "command") or v is None:
            continue
        cfg[k] = str(v)
    return cfg


def _get(cfg: dict, key: str, conv, required: bool = True):
    raw = cfg.get(key, "")
    if raw == "":
        if required:
            raise ConfigError(f"missing config key {key!r}")
        return None
    try:
        return conv(raw)
    except (ValueError, TypeError):
        raise ConfigError(f"bad value for {key!r}: {raw!r}")


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def parse_scale(tok: str) -> float:
    """'2^-8', '8' (a level) or '0.00390625'."""
    tok = tok.strip()
    if tok.startswith("2^"):
        val = 2.0 ** int(tok[2:])
    elif tok.lstrip("-").isdigit():
        val = 2.0 ** -int(tok)
    else:
        val = float(tok)
    j = -math.log2(val) if val > 0 else math.nan
    if not (val > 0 and abs(j - round(j)) < 1e-12):
        raise ValueError(f"{tok} is not dyadic")
    return val


def _scales(cfg: dict) -> list:
    return _get(cfg, "deltas", lambda v: [parse_scale(t) for t in v.split(",") if t.strip()])


def load_set(cfg: dict):
    """(DyadicSet, IFSSpec or None) from a builtin name, IFS file or DYSET1 file."""
    src = cfg.get("set", "")
    p = Path(src)
    if p.is_file() and p.read_text()[:6] == "DYSET1":
        s = read_dyset(p)
        return s, None
    try:
        spec = load_ifs(src)
    except DomainError as e:
        raise ConfigError(str(e))
    depth = _get(cfg, "depth", int)
    cap = DEPTH_CAP.get(spec.dim, 0)
    if not 0 <= depth <= cap:
        raise ConfigError(f"depth {depth} outside [0, {cap}] for d={spec.dim}")
    return rasterize_ifs(spec, depth), spec


def _exponent(cfg: dict, spec) -> float:
    raw = cfg.get("s", "similarity")
    if raw == "similarity":
        if spec is None:
            raise ConfigError("s=similarity needs an IFS set source")
        return similarity_dimension(spec)
    return _get(cfg, "s", float)


def _direction(cfg: dict, d: int, index: int = 0) -> Direction:
    if cfg.get("direction"):
        return Direction(np.array([float(v) for v in cfg["direction"].split(",")]))
    if cfg.get("angle") and d == 2:
        return Direction.from_angle(_get(cfg, "angle", float))
    seed = _get(cfg, "seed", int)
    return sample_direction(job_rng(seed, index), d)


def _subspace(cfg: dict, d: int) -> np.ndarray:
    """Frame rows spanning L in G(d, n)."""
    n = _get(cfg, "n", int)
    if not 1 <= n < d:
        raise ConfigError(f"n must satisfy 1 <= n < d, got n={n}")
    u = _direction(cfg, d).unit
    return u[None, :] if n == 1 else complement_frame(u[None, :])


def _params(cfg: dict, s: float, d: int):
    return solve_parameters(s, d, _get(cfg, "epsilon", float), cfg.get("mode", "regular"),
                            strict=_get(cfg, "strict", _bool))


def _dumps(obj) -> str:
    def conv(o):
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))
    return json.dumps(obj, indent=2, sort_keys=True, default=conv) + "\n"


# ---------------------------------------------------------------------------
# commands: each returns (outputs {name: str|bytes}, metrics dict, message)

def cmd_gen(cfg):
    s, spec = load_set(cfg)
    out = {"set.dyset": s.to_text()}
    if _get(cfg, "pgm", _bool) and s.dim == 2:
        out["set.pgm"] = s.to_pgm()
    return out, {"cells": len(s)}, f"{len(s)} cells at depth {s.depth}"


def cmd_vis(cfg):
    s, spec = load_set(cfg)
    th = _direction(cfg, s.dim)
    v = visible_cells(s, th)
    ex = _exponent(cfg, spec)
    info = {"direction": th.unit.tolist(), "cells": len(s), "visible": len(v),
            "content": dyadic_content(v, ex) if len(v) else 0.0, "exponent": ex}
    return {"visible.dyset": v.to_text(), "vis.json": _dumps(info)}, info, f"{len(v)} visible cells"


def cmd_dim(cfg):
    s, spec = load_set(cfg)
    counts = box_counts(s, range(1, s.depth + 1))
    fit = box_dimension_fit(counts, s.dim)
    csv = "scale,count\n" + "".join(f"{a!r},{b}\n" for a, b in counts)
    info = {"slope": fit.slope, "residual": fit.residual,
            "similarity": similarity_dimension(spec) if spec is not None else None}
    return {"box.csv": csv, "dim.json": _dumps(info)}, info, f"slope {fit.slope:.4f}"


def cmd_decomp(cfg):
    s, spec = load_set(cfg)
    ex = _exponent(cfg, spec)
    delta = _scales(cfg)[0]
    p = _params(cfg, ex, s.dim).at(delta)
    th = _direction(cfg, s.dim)
    rep = decompose(s, th, p, with_sobolev=True)
    info = rep.to_json()
    info["partition_ok"] = rep.partition_ok(s)
    out = {"decomp.json": _dumps(info)}
    if s.dim == 2 and _get(cfg, "pgm", _bool):
        out["decomp.pgm"] = rep.overlay_pgm()
    return out, {"sizes": info["sizes"], "contents": info["contents"]}, \
        " ".join(f"{k}={v}" for k, v in info["sizes"].items())


def cmd_slice(cfg):
    s, spec = load_set(cfg)
    ex = _exponent(cfg, spec)
    frame = _subspace(cfg, s.dim)
    rows = slice_spectrum(s, frame, ex, _get(cfg, "beta", float))
    fr = [r.fraction_heavy for r in rows]
    info = {"fractions": fr, "non_increasing": all(b <= a for a, b in zip(fr, fr[1:]))}
    return {"slice.csv": slice_spectrum_csv(rows)}, info, f"{len(rows)} scales"


def cmd_heavy(cfg):
    s, spec = load_set(cfg)
    ex = _exponent(cfg, spec)
    frame = _subspace(cfg, s.dim)
    m = natural_measure(s, ex)
    eps = _get(cfg, "epsilon", float)
    Ms = _get(cfg, "M", lambda v: [float(t) for t in v.split(",")], required=False)
    if Ms is None:
        Ms = [2 ** j * 3 * m.total_mass for j in range(7)]
    lines = ["M,cells,content,rhs,ratio"]
    ratios = []
    for M in Ms:
        r = heavy_set(s, m, frame, M, eps, ex)
        lines.append(f"{M!r},{len(r.F_M)},{r.content!r},{r.rhs!r},{r.ratio!r}")
        ratios.append(r.ratio)
    return {"heavy.csv": "\n".join(lines) + "\n"}, {"ratios": ratios}, f"{len(Ms)} thresholds"


def cmd_sobolev(cfg):
    s, spec = load_set(cfg)
    ex = _exponent(cfg, spec)
    m = natural_measure(s, ex, normalize=True)
    n = _get(cfg, "directions", int)
    sigma = _get(cfg, "sigma", float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = direction_average_sobolev(m, sigma, n, _get(cfg, "seed", int),
                                        cutoff=_get(cfg, "cutoff", int, required=False), t=ex)
    head = "thetaIndex," + ",".join(f"angle{i}" for i in range(s.dim - 1)) + ",norm"
    lines = [head]
    for i, (th, v) in enumerate(zip(res.directions, res.per_direction)):
        lines.append(f"{i}," + ",".join(repr(a) for a in th.angles()) + f",{float(v)!r}")
    info = {"mean": res.mean, "divergent_flag": res.flag_divergent}
    return {"sobolev.csv": "\n".join(lines) + "\n", "sobolev.json": _dumps(info)}, info, \
        f"mean {res.mean:.6g}"


def cmd_energy(cfg):
    s, spec = load_set(cfg)
    ex = _get(cfg, "t", float)
    m = natural_measure(s, _exponent(cfg, spec), normalize=True)
    cutoff = _get(cfg, "cutoff", float, required=False) or 128.0
    chk = energy_fourier_check(m, ex, cutoff)
    info = {"energy": chk.energy, "fourier_integral": chk.fourier_integral, "ratio": chk.ratio,
            "theoretical": chk.theoretical, "flagged": chk.flagged}
    return {"energy.json": _dumps(info)}, info, f"ratio {chk.ratio:.6g}"


def cmd_calibrate(cfg):
    n = _get(cfg, "n", int)
    cal = calibrate_grid_constant(n, _get(cfg, "trials", int), _get(cfg, "seed", int))
    info = {"n": n, "trials": cal.trials, "c_star": cal.c_star, "worst_x": list(cal.worst_x),
            "worst_r": cal.worst_r, "uncovered": cal.uncovered, "at_most_8": cal.c_star <= 8}
    return {"calibration.json": _dumps(info)}, info, f"c* = {cal.c_star:.6f}"


def cmd_vis_average(cfg):
    s, spec = load_set(cfg)
    ex = _exponent(cfg, spec)
    p = _params(cfg, ex, s.dim)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tab = direction_average_experiment(s, p, _get(cfg, "directions", int), _scales(cfg),
                                           _get(cfg, "seed", int), _get(cfg, "jobs", int))
    info = {"A": {repr(k): v for k, v in sorted(tab.averages.items(), reverse=True)},
            "strictly_decreasing": tab.strictly_decreasing(),
            "vis_box_slope": tab.box_fit.slope if tab.box_fit else None}
    return {"vis_average.csv": tab.to_csv(), "vis_average.json": _dumps(info)}, info, \
        f"A = {list(info['A'].values())}"


COMMANDS = {
    "gen": cmd_gen, "vis": cmd_vis, "dim": cmd_dim, "decomp": cmd_decomp, "slice": cmd_slice,
    "heavy": cmd_heavy, "sobolev": cmd_sobolev, "energy": cmd_energy, "calibrate": cmd_calibrate,
}
EXPERIMENTS = {
    "vis-average": cmd_vis_average, "decompose": cmd_decomp, "slice-spectrum": cmd_slice,
    "heavy-set": cmd_heavy, "sobolev-average": cmd_sobolev, "calibrate": cmd_calibrate,
}


# ---------------------------------------------------------------------------
# persistence

def _stage(path: Path, raw: bytes) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    with os.fdopen(fd, "wb") as f:
        f.write(raw)
    return tmp


def atomic_write_all(out_dir: Path, outputs: dict) -> dict:
    """Stage every output as a temporary file, then rename them into place.

    Returns sha256 digests.  On failure the staged files are removed, so no
    truncated output is ever visible under its final name.
    """
    staged, digests = [], {}
    try:
        for name, data in sorted(outputs.items()):
            raw = data.encode() if isinstance(data, str) else bytes(data)
            staged.append((_stage(out_dir / name, raw), out_dir / name))
            digests[name] = hashlib.sha256(raw).hexdigest()
        for tmp, final in staged:
            os.replace(tmp, final)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
    return digests


def atomic_write(path: Path, data) -> str:
    return atomic_write_all(path.parent, {path.name: data})[path.name]


def run(name: str, cfg: dict) -> dict:
    """Execute a command, write its outputs atomically and append a run record."""
    fn = COMMANDS.get(name) or EXPERIMENTS.get(name)
    if fn is None:
        raise ConfigError(f"unknown command {name!r}")
    t0 = time.perf_counter()
    outputs, metrics, msg = fn(cfg)          # everything is computed before any write
    out_dir = Path(cfg.get("out") or "runs")
    digests = atomic_write_all(out_dir, outputs)
    record = {"command": name, "config": dict(sorted(cfg.items())), "version": __version__,
              "seed": cfg.get("seed"), "wall_time": round(time.perf_counter() - t0, 3),
              "outputs": digests, "metrics": metrics}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "runs.jsonl", "a") as f:
        f.write(json.dumps(record, sort_keys=True, default=float) + "\n")
    record["message"] = msg
    return record


def summarize(index: Path, baseline: Path | None = None) -> dict:
    """Trend summaries over a run index: monotonicity, slopes and baseline drift."""
    if not index.exists():
        raise ConfigError(f"run index {str(index)!r} does not exist")
    records = [json.loads(ln) for ln in index.read_text().splitlines() if ln.strip()]
    base = json.loads(baseline.read_text()) if baseline else {}
    summary = {"runs": len(records), "experiments": {}, "warnings": []}
    points = []
    for r in records:
        key = r["command"]
        e = summary["experiments"].setdefault(key, {"count": 0})
        e["count"] += 1
        m = r.get("metrics", {})
        if "A" in m:
            points.extend((float(k), v) for k, v in m["A"].items())
            e.setdefault("strictly_decreasing", []).append(m.get("strictly_decreasing"))
        for name, val in m.items():
            ref = base.get(f"{key}.{name}")
            if ref is not None and isinstance(val, (int, float)) and ref != 0:
                drift = val / ref
                if not 0.5 <= drift <= 2.0:
                    summary["warnings"].append(f"WARN {key}.{name} drift {drift:.3g}x vs baseline")
    points = [(d, a) for d, a in points if a > 0]
    if len({p[0] for p in points}) >= 2:
        fit = box_dimension_fit(points)
        # log A against log delta: the slope of log A vs log(1/delta) with the sign flipped
        summary["experiments"]["vis-average"]["slope_logA_logdelta"] = -fit.slope
    return summary


def _format_summary(summary: dict) -> str:
    lines = [f"runs: {summary['runs']}"]
    for k, v in sorted(summary["experiments"].items()):
        extra = ", ".join(f"{a}={b}" for a, b in sorted(v.items()) if a != "count")
        lines.append(f"{k:16s} {v['count']:4d}  {extra}")
    lines.extend(summary["warnings"])
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument parsing

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--set", "--ifs", dest="set",
                   help=f"builtin ({', '.join(sorted(BUILTINS))}), IFS file or DYSET1 file")
    p.add_argument("--depth", type=int)
    p.add_argument("--s", help="exponent or 'similarity'")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--mode", choices=["regular", "general"])
    p.add_argument("--deltas", help="comma list of scales: 2^-8, 8 or 0.00390625")
    p.add_argument("--directions", type=int)
    p.add_argument("--direction", help="comma-separated vector theta")
    p.add_argument("--angle", type=float, help="direction angle in radians (d=2)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker bound (default $VISIFRAC_JOBS or 1)")
    p.add_argument("--beta", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--M", help="comma list of thresholds")
    p.add_argument("--cutoff", type=int)
    p.add_argument("--t", type=float, help="energy exponent")
    p.add_argument("--strict", choices=["true", "false"])
    p.add_argument("--pgm", choices=["true", "false"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="visifrac", description="Visible parts and slices of fractal sets.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _common(sub.add_parser(name))
    ex = sub.add_parser("experiment")
    _common(ex)
    ex.add_argument("--kind", choices=KINDS)
    sm = sub.add_parser("summarize")
    sm.add_argument("--index", default="runs/runs.jsonl")
    sm.add_argument("--baseline")
    sm.add_argument("--out")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "summarize":
            summary = summarize(Path(args.index), Path(args.baseline) if args.baseline else None)
            print(_format_summary(summary))
            if args.out:
                atomic_write(Path(args.out) / "summary.json", _dumps(summary))
            return 0
        cfg = merge_config(args)
        name = args.command
        if name == "experiment":
            kind = cfg.get("kind")
            if kind not in KINDS:
                raise ConfigError(f"experiment kind must be one of {', '.join(KINDS)}; got {kind!r}")
            name = kind
        rec = run(name, cfg)
        print(rec["message"])
        for f, h in rec["outputs"].items():
            print(f"  {f}  sha256={h[:16]}")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ParameterError, ResolutionError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
