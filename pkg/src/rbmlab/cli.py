"""Experiment runner: declarative TOML configs in, CSV tables + manifest out.

Exit codes: 0 success (and all checks passed), 1 at least one check failed,
2 configuration error.  Unknown config keys are rejected with a dotted-path
diagnostic instead of being silently ignored, so a misspelled parameter can
never fall back to a default.  Outputs are bit-identical for a fixed
(config, seed, version) triple regardless of --workers.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pathlib import Path

from . import __version__, green as gn, rbm, semigroup as sg, verify as vf
from .geometry import Ball, Box, ConvexDomain, GeometryError, Polytope


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schema: nested dict of allowed keys; "*" marks an array of tables


_PARAMS = {"step_h", "horizon_T", "n_paths", "master_seed"}
_SCHEMA = {
    "domain": {"kind", "lo", "hi", "center", "radius", "normals", "offsets"},
    "params": _PARAMS,
    "output": {"dir"},
    "simulate": {"start", "n_paths"},
    "estimate": {
        "semigroup": {"*": {"f", "x", "t"}},
        "kernel": {"*": {"x", "t", "cells"}},
        "gradient": {"*": {"f", "x", "t", "fd_step"}},
    },
    "verify": {
        "checks": None,
        "contraction": {"n_pairs", "n_steps"},
        "gradient_commutation": {"f", "x", "t"},
        "variance_bound": {"f", "x", "t"},
        "ondiagonal_exponent": {"t_list"},
        "gradient_exponent": {"t_list"},
        "gaussian_tail": {"t", "source", "q_list", "direction", "cell_scale"},
        "local_time_moment": {"sigma_list", "s_list"},
        "spectral_decay": {"f", "t_list", "lambda1"},
    },
    "green": {
        "lambda1": None,
        "n_quad": None,
        "apply": {"*": {"f", "x"}},
        "gradient": {"*": {"f", "x", "fd_step"}},
        "riesz": {"*": {"f", "x", "fd_step"}},
        "bound": {"f", "q", "probes"},
        "kernel_probe": {"source", "probes", "cells"},
    },
}


def _check_keys(tree, schema, path=""):
    if isinstance(schema, set):
        schema = {k: None for k in schema}
    for key, val in tree.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key: {here}")
        sub = schema[key]
        if sub is None:
            continue
        if isinstance(sub, dict) and "*" in sub:
            if not isinstance(val, list):
                raise ConfigError(f"{here} must be an array of tables")
            for i, item in enumerate(val):
                _check_keys(item, sub["*"], f"{here}[{i}]")
        elif isinstance(val, dict):
            _check_keys(val, sub, here)
        else:
            raise ConfigError(f"{here} must be a table")
    return tree


def _build_domain(cfg) -> ConvexDomain:
    try:
        spec = cfg["domain"]
        kind = spec["kind"]
    except KeyError as e:
        raise ConfigError(f"missing domain key: {e}")
    try:
        if kind == "box":
            return Box(np.asarray(spec["lo"], float), np.asarray(spec["hi"], float))
        if kind == "ball":
            return Ball(np.asarray(spec["center"], float), float(spec["radius"]))
        if kind == "polytope":
            return Polytope(
                np.asarray(spec["normals"], float), np.asarray(spec["offsets"], float)
            )
    except KeyError as e:
        raise ConfigError(f"domain kind {kind!r} is missing field {e}")
    except (ValueError, GeometryError) as e:
        raise ConfigError(f"invalid domain: {e}")
    raise ConfigError(f"unknown domain kind: {kind!r}")


def _build_params(cfg, seed_override) -> rbm.PathParams:
    spec = dict(cfg.get("params", {}))
    if seed_override is not None:
        spec["master_seed"] = seed_override
    try:
        return rbm.PathParams(
            step_h=float(spec["step_h"]),
            horizon_T=float(spec["horizon_T"]) if "horizon_T" in spec else None,
            n_paths=int(spec.get("n_paths", 10000)),
            master_seed=int(spec.get("master_seed", 0)),
        )
    except KeyError as e:
        raise ConfigError(f"params is missing field {e}")
    except ValueError as e:
        raise ConfigError(f"invalid params: {e}")


def _function(domain, name) -> sg.TestFunction:
    try:
        return sg.builtin_function(domain, str(name))
    except ValueError as e:
        raise ConfigError(str(e))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class _Writer:
    """Collects CSV rows per file, writes them, and hashes every output."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: dict[str, list[str]] = {}

    def row(self, fname: str, header: str, values) -> None:
        rows = self.files.setdefault(fname, [header])
        rows.append(",".join(_fmt(v) for v in values))

    def flush(self) -> dict:
        hashes = {}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for fname, rows in sorted(self.files.items()):
            text = "\n".join(rows) + "\n"
            (self.out_dir / fname).write_text(text)
            hashes[fname] = hashlib.sha256(text.encode()).hexdigest()
        return hashes


# ---------------------------------------------------------------------------
# subcommand runners: each returns (n_failed_checks, manifest key-values)


def _domain_label(cfg) -> str:
    return cfg["domain"]["kind"]


def _run_simulate(cfg, domain, params, writer, workers):
    spec = cfg.get("simulate", {})
    try:
        start = np.asarray(spec["start"], float)
    except KeyError:
        raise ConfigError("simulate.start is required")
    if params.horizon_T is None:
        raise ConfigError("simulate needs params.horizon_T")
    n = int(spec.get("n_paths", 1))
    d = domain.dim
    header = "path_index,time," + ",".join(f"x{k}" for k in range(d)) + ",local_time"
    for i in range(n):
        tr = rbm.simulate(domain, start, params, path_index=i)
        for j in range(tr.times.size):
            writer.row(
                "trajectories.csv",
                header,
                [i, tr.times[j], *tr.positions[j], tr.local_times[j]],
            )
    return 0, {}


def _estimate_header(d):
    xs = ",".join(f"x{k}" for k in range(d))
    return f"estimator,domain,t,{xs},value,stderr,M,h,seed"


def _run_estimate(cfg, domain, params, writer, workers):
    spec = cfg.get("estimate", {})
    d = domain.dim
    label = _domain_label(cfg)
    header = _estimate_header(d)
    meta = [params.n_paths, params.step_h, params.master_seed]
    for job in spec.get("semigroup", []):
        f = _function(domain, job["f"])
        x = np.asarray(job["x"], float)
        t = float(job["t"])
        est = sg.estimate_semigroup(domain, f, x, t, params, workers=workers)
        writer.row(
            "estimates.csv",
            header,
            [f"semigroup:{f.name}", label, t, *x, est.mean, est.stderr, *meta],
        )
    for job in spec.get("kernel", []):
        x = np.asarray(job["x"], float)
        t = float(job["t"])
        ke = sg.estimate_kernel(domain, x, t, int(job["cells"]), params, workers=workers)
        centers = [c for c in np.meshgrid(*ke.grid.centers(), indexing="ij")]
        flat = ke.density.ravel()
        vols = ke.cell_volume.ravel()
        se = np.zeros_like(flat)
        ok = vols > 0
        se[ok] = np.sqrt(flat[ok] / (ke.n_paths * vols[ok]))
        pts = np.stack([c.ravel() for c in centers], axis=-1)
        for i in range(flat.size):
            if vols[i] <= 0:
                continue
            writer.row(
                "kernel.csv",
                header,
                ["kernel_cell", label, t, *pts[i], flat[i], se[i], *meta],
            )
    for job in spec.get("gradient", []):
        f = _function(domain, job["f"])
        x = np.asarray(job["x"], float)
        t = float(job["t"])
        fd = float(job.get("fd_step", sg.default_fd_step(domain)))
        ge = sg.estimate_gradient(domain, f, x, t, fd, params, workers=workers)
        for k in range(d):
            writer.row(
                "estimates.csv",
                header,
                [
                    f"gradient_axis{k}:{f.name}",
                    label,
                    t,
                    *x,
                    ge.vector[k],
                    ge.stderr[k],
                    *meta,
                ],
            )
    return 0, {}


def _report_rows(writer, fname, report):
    header = "index,lhs,rhs,lhs_stderr,rhs_stderr,passed"
    for i, p in enumerate(report.test_points):
        writer.row(fname, header, [i, p.lhs, p.rhs, p.lhs_stderr, p.rhs_stderr, p.passed])


_SUMMARY_HEADER = "check,pass,violations,exponent,r2,c_fit"


def _summary(writer, check, ok, violations="", exponent="", r2="", c_fit=""):
    writer.row("verify_summary.csv", _SUMMARY_HEADER, [check, ok, violations, exponent, r2, c_fit])


def _run_verify(cfg, domain, params, writer, workers):
    spec = cfg.get("verify", {})
    checks = spec.get("checks")
    if not checks:
        raise ConfigError("verify.checks must name at least one check")
    for name in checks:
        if name not in _SCHEMA["verify"] or name == "checks":
            raise ConfigError(f"unknown verify check: {name}")
    failed = 0
    manifest = {}
    for name in checks:
        job = spec.get(name, {})
        t0 = time.monotonic()
        ok = True
        if name == "contraction":
            n_steps = int(job.get("n_steps", params.n_steps() if params.horizon_T else 0))
            if n_steps <= 0:
                raise ConfigError("contraction needs n_steps or params.horizon_T")
            sub = rbm.PathParams(
                step_h=params.step_h,
                horizon_T=n_steps * params.step_h,
                n_paths=params.n_paths,
                master_seed=params.master_seed,
            )
            rep = vf.check_contraction(domain, int(job.get("n_pairs", 100)), sub)
            ok = rep.all_passed
            _report_rows(writer, "check_contraction.csv", rep)
            _summary(writer, name, ok, rep.violation_count)
        elif name in ("gradient_commutation", "variance_bound"):
            try:
                fs = [_function(domain, fn) for fn in job["f"]]
                xs = [np.asarray(x, float) for x in job["x"]]
                ts = [float(t) for t in job["t"]]
            except KeyError as e:
                raise ConfigError(f"verify.{name} is missing field {e}")
            if not len(fs) == len(xs) == len(ts):
                raise ConfigError(f"verify.{name}: f, x, t must have equal length")
            fn = (
                vf.check_gradient_commutation
                if name == "gradient_commutation"
                else vf.check_variance_bound
            )
            rep = fn(domain, fs, xs, ts, params)
            ok = rep.all_passed
            _report_rows(writer, f"check_{name}.csv", rep)
            _summary(writer, name, ok, rep.violation_count)
        elif name in ("ondiagonal_exponent", "gradient_exponent"):
            try:
                t_list = [float(t) for t in job["t_list"]]
            except KeyError:
                raise ConfigError(f"verify.{name}.t_list is required")
            fn = (
                vf.fit_ondiagonal_exponent
                if name == "ondiagonal_exponent"
                else vf.fit_gradient_exponent
            )
            try:
                fit = fn(domain, t_list, params, workers=workers)
            except ValueError as e:
                raise ConfigError(f"verify.{name}: {e}")
            ok = fit.r_squared >= 0.95
            writer.row(
                f"check_{name}.csv",
                "t_min,t_max,exponent,log_constant,r_squared,n_points",
                [*fit.t_range, fit.exponent, fit.log_constant, fit.r_squared, fit.n_points],
            )
            _summary(writer, name, ok, "", fit.exponent, fit.r_squared)
        elif name == "gaussian_tail":
            try:
                t = float(job["t"])
                y = np.asarray(job["source"], float)
                q_list = [float(q) for q in job["q_list"]]
            except KeyError as e:
                raise ConfigError(f"verify.gaussian_tail is missing field {e}")
            direction = np.asarray(job.get("direction", [1.0] + [0.0] * (domain.dim - 1)), float)
            direction = direction / np.linalg.norm(direction)
            pairs = [(y + np.sqrt(q * t) * direction, y) for q in q_list]
            tail = vf.check_gaussian_tail(
                domain,
                t,
                pairs,
                params,
                cell_scale=float(job.get("cell_scale", 0.2)),
                workers=workers,
            )
            ok = tail.passed and tail.fitted_c > 0
            header = "q,residual,noise"
            for q, r, nz in zip(tail.q_values, tail.residuals, tail.noise):
                writer.row("check_gaussian_tail.csv", header, [q, r, nz])
            _summary(writer, name, ok, tail.n_dropped, "", "", tail.fitted_c)
        elif name == "local_time_moment":
            try:
                sigmas = [float(s) for s in job["sigma_list"]]
                ss = [float(s) for s in job["s_list"]]
            except KeyError as e:
                raise ConfigError(f"verify.local_time_moment is missing field {e}")
            rep, c_fit = vf.check_local_time_moment(domain, sigmas, ss, params, workers=workers)
            ok = rep.all_passed and np.isfinite(c_fit)
            _report_rows(writer, "check_local_time_moment.csv", rep)
            _summary(writer, name, ok, rep.violation_count, "", "", c_fit)
        elif name == "spectral_decay":
            try:
                f = _function(domain, job["f"])
                t_list = [float(t) for t in job["t_list"]]
            except KeyError as e:
                raise ConfigError(f"verify.spectral_decay is missing field {e}")
            lam = job.get("lambda1")
            try:
                rep = vf.check_spectral_decay(
                    domain,
                    f,
                    t_list,
                    params,
                    lambda1=float(lam) if lam is not None else None,
                    workers=workers,
                )
            except ValueError as e:
                raise ConfigError(f"verify.spectral_decay: {e}")
            ok = rep.all_passed
            _report_rows(writer, "check_spectral_decay.csv", rep)
            _summary(writer, name, ok, rep.violation_count)
        if not ok:
            failed += 1
        manifest[f"check_{name}"] = "pass" if ok else "fail"
        manifest[f"stage_{name}_seconds"] = f"{time.monotonic() - t0:.3f}"
    return failed, manifest


def _run_green(cfg, domain, params, writer, workers):
    spec = cfg.get("green", {})
    lam = spec.get("lambda1")
    if lam is None:
        if isinstance(domain, Box):
            lam = vf.analytic_lambda1(domain)
        else:
            raise ConfigError("green.lambda1 is required for non-box domains")
    try:
        gp = gn.default_green_params(float(lam), int(spec.get("n_quad", 64)))
    except ValueError as e:
        raise ConfigError(f"invalid green params: {e}")
    d = domain.dim
    label = _domain_label(cfg)
    xs_hdr = ",".join(f"x{k}" for k in range(d))
    header = f"op,domain,{xs_hdr},value,stderr,trunc_bound,q,ratio"
    failed = 0
    manifest = {"green_lambda1": repr(float(lam)), "green_t_max": repr(gp.t_max)}

    def emit(op, x, value, stderr, trunc="", q="", ratio=""):
        writer.row("green.csv", header, [op, label, *x, value, stderr, trunc, q, ratio])

    for i, job in enumerate(spec.get("apply", [])):
        f = _function(domain, job["f"])
        x = np.asarray(job["x"], float)
        est = gn.green_apply(
            domain, f, x, gp, params,
            seed=rbm.derive_seed(params.master_seed, 71, i), workers=workers,
        )
        emit(f"apply:{f.name}", x, est.value, est.stderr, est.truncation_bound)
    for kind, op in (("gradient", gn.green_gradient), ("riesz", gn.riesz_apply)):
        for i, job in enumerate(spec.get(kind, [])):
            f = _function(domain, job["f"])
            x = np.asarray(job["x"], float)
            fd = job.get("fd_step")
            est = op(
                domain, f, x, gp, params,
                fd_step=float(fd) if fd is not None else None,
                seed=rbm.derive_seed(params.master_seed, 73, i), workers=workers,
            )
            extra = est.remainder_bound if kind == "riesz" else ""
            for k in range(d):
                emit(f"{kind}_axis{k}:{f.name}", x, est.vector[k], est.stderr[k], extra)
    if "bound" in spec:
        job = spec["bound"]
        try:
            fs = [_function(domain, fn) for fn in job["f"]]
            q = float(job["q"])
            probes = [np.asarray(p, float) for p in job["probes"]]
        except KeyError as e:
            raise ConfigError(f"green.bound is missing field {e}")
        try:
            rep = gn.check_green_gradient_bound(
                domain, fs, q, probes, gp, params, workers=workers
            )
        except ValueError as e:
            raise ConfigError(f"green.bound: {e}")
        for p in rep.test_points:
            emit(
                f"bound:{p.inputs['f']}",
                ["" for _ in range(d)],
                p.lhs,
                p.lhs_stderr,
                "",
                q,
                p.inputs["ratio"],
            )
        if not rep.all_passed:
            failed += 1
        manifest["check_green_bound"] = "pass" if rep.all_passed else "fail"
    if "kernel_probe" in spec:
        job = spec["kernel_probe"]
        try:
            y = np.asarray(job["source"], float)
            probes = [np.asarray(p, float) for p in job["probes"]]
        except KeyError as e:
            raise ConfigError(f"green.kernel_probe is missing field {e}")
        cells = job.get("cells")
        try:
            pairs, fit = gn.green_kernel_gradient_probe(
                domain, y, probes, gp, params,
                cells=int(cells) if cells is not None else None,
                seed=rbm.derive_seed(params.master_seed, 79), workers=workers,
            )
        except (ValueError, GeometryError) as e:
            raise ConfigError(f"green.kernel_probe: {e}")
        for rho, val in pairs:
            emit("kernel_probe", ["" for _ in range(d)], val, "", "", "", rho)
        ok = fit.exponent >= -(d - 1) - 0.3
        manifest["kernel_probe_slope"] = repr(fit.exponent)
        manifest["check_kernel_probe"] = "pass" if ok else "fail"
        if not ok:
            failed += 1
    return failed, manifest


_RUNNERS = {
    "simulate": _run_simulate,
    "estimate": _run_estimate,
    "verify": _run_verify,
    "green": _run_green,
}


def run(argv) -> int:
    parser = argparse.ArgumentParser(prog="rbmlab", description=__doc__)
    parser.add_argument("subcommand", choices=sorted(_RUNNERS))
    parser.add_argument("--config", required=True, help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default=None, help="output directory")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    t_start = time.monotonic()
    try:
        raw = Path(args.config).read_bytes()
        cfg = tomllib.loads(raw.decode())
        _check_keys(cfg, _SCHEMA)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        domain = _build_domain(cfg)
        params = _build_params(cfg, args.seed)
        out_dir = Path(args.out or cfg.get("output", {}).get("dir", "rbmlab_out"))
        writer = _Writer(out_dir)
        failed, manifest = _RUNNERS[args.subcommand](
            cfg, domain, params, writer, args.workers
        )
    except (ConfigError, tomllib.TOMLDecodeError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    hashes = writer.flush()
    lines = {
        "version": __version__,
        "subcommand": args.subcommand,
        "config_hash": hashlib.sha256(raw).hexdigest(),
        "domain_fingerprint": domain.fingerprint(),
        "master_seed": params.master_seed,
        "workers": args.workers,
        "step_h": repr(params.step_h),
        "n_paths": params.n_paths,
        "wall_clock_seconds": f"{time.monotonic() - t_start:.3f}",
        **manifest,
    }
    for fname, digest in hashes.items():
        lines[f"sha256_{fname}"] = digest
    lines["exit_code"] = 1 if failed else 0
    text = "".join(f"{k} = {v}\n" for k, v in lines.items())
    (out_dir / "manifest.txt").write_text(text)
    return 1 if failed else 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
