"""Batch front-end: named experiments over the built-in model registry.

Configuration is a flat ``key=value`` text file plus ``--key value``
command-line overrides; there is no nesting and no quoting.  Recognised
keys: model, x0, T, n, N, seed, estimators, f, output, workers, n_list.

Subcommands
-----------
validate     structural and statistical self-checks, CSV of results
gradient     run the requested gradient estimators, CSV of estimates
convergence  bias-versus-steps sweep over ``n_list``
compare      estimators against a reference (closed form when available,
             common-random-number finite differences otherwise)

Exit codes: 0 success, 1 check failure, 2 usage or config error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import oracles
from .derivative_flow import grad_bel, grad_reflected_intermediate, grad_reflected_psi
from .errors import ConfigError, HalfgradError, NumericError, ModelError, DataError
from .killed_euler import bridge_touch_probability, first_row_squared
from .mc_engine import RunPlan, derive_substream, run_blocks
from .model import validate_hypothesis1
from .pushforward_grad import grad_killed_pushforward
from .reflected import local_time_increment
from .registry import DEFAULT_START, MODEL_NAMES, make_model, make_payoff

CSV_HEADER = "experiment,model,estimator,component,n,N,seed,estimate,stderr,reference,wall_time_ms"
VALIDATE_HEADER = "check,value,reference,stderr,pass"

CONFIG_KEYS = (
    "model", "x0", "T", "n", "N", "seed", "estimators", "f", "output", "workers",
    "n_list", "rho_tilde",
)

ESTIMATOR_NAMES = ("pushforward", "psi", "intermediate", "bel", "fd")


@dataclass
class ExperimentConfig:
    model: str = "bm1d"
    x0: tuple[float, ...] | None = None
    T: float = 1.0
    n: int = 64
    N: int = 100_000
    seed: int = 12345
    estimators: tuple[str, ...] = ("pushforward", "psi", "intermediate", "bel")
    f: str = "linear1"
    output: str | None = None
    workers: int | str = 1
    n_list: tuple[int, ...] = field(default_factory=tuple)
    rho_tilde: bool = True  # drop the distance-gradient part of the boundary weight when off

    def resolved_x0(self) -> np.ndarray:
        if self.x0 is not None:
            return np.asarray(self.x0, dtype=float)
        return np.asarray(DEFAULT_START[self.model], dtype=float)


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in ("T",):
            return float(raw)
        if key in ("n", "N", "seed"):
            return int(raw)
        if key == "workers":
            return raw if raw == "auto" else int(raw)
        if key == "x0":
            return tuple(float(v) for v in raw.split(",") if v != "")
        if key == "estimators":
            names = tuple(v.strip() for v in raw.split(",") if v.strip())
            for nm in names:
                if nm not in ESTIMATOR_NAMES:
                    raise ConfigError(f"unknown estimator {nm!r}; known: {ESTIMATOR_NAMES}")
            return names
        if key == "n_list":
            return tuple(int(v) for v in raw.split(",") if v != "")
        if key == "rho_tilde":
            if raw not in ("on", "off"):
                raise ConfigError(f"rho_tilde must be 'on' or 'off', got {raw!r}")
            return raw == "on"
        if key in ("model", "f", "output"):
            return raw
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    raise ConfigError(f"unknown config key {key!r}; known: {CONFIG_KEYS}")


def parse_config_file(path: str) -> dict:
    out = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, raw = line.partition("=")
                key = key.strip()
                out[key] = _parse_value(key, raw)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return out


def build_config(ns: argparse.Namespace, extra: list[str]) -> ExperimentConfig:
    values: dict = {}
    if ns.config:
        values.update(parse_config_file(ns.config))
    flag_map = {"seed": ns.seed, "paths": ns.paths, "steps": ns.steps, "out": ns.out,
                "workers": ns.workers}
    if flag_map["seed"] is not None:
        values["seed"] = ns.seed
    if flag_map["paths"] is not None:
        values["N"] = ns.paths
    if flag_map["steps"] is not None:
        values["n"] = ns.steps
    if flag_map["out"] is not None:
        values["output"] = ns.out
    if flag_map["workers"] is not None:
        values["workers"] = _parse_value("workers", ns.workers)
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or i + 1 >= len(extra):
            raise ConfigError(f"overrides must be '--key value' pairs, got {extra[i:]}")
        key = token[2:]
        values[key] = _parse_value(key, extra[i + 1])
        i += 2
    cfg = ExperimentConfig(**values)
    if cfg.model not in MODEL_NAMES:
        raise ConfigError(f"unknown model {cfg.model!r}; known: {MODEL_NAMES}")
    if not cfg.estimators:
        raise ConfigError("requested estimator set is empty")
    spec = make_model(cfg.model, T=cfg.T)
    x0 = cfg.resolved_x0()
    if x0.shape != (spec.d,):
        raise ConfigError(f"x0 must have {spec.d} components for model {cfg.model}")
    if not x0[0] > spec.L:
        raise ConfigError("x0 must start inside the domain (first component > L)")
    return cfg


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | None, header: str, rows: list[list]) -> None:
    target = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        writer = csv.writer(target)
        writer.writerow(header.split(","))
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    finally:
        if path:
            target.close()


def _run_estimator(name: str, spec, f, Df, x0, cfg: ExperimentConfig, n: int):
    common = dict(seed=cfg.seed, workers=cfg.workers)
    if name == "pushforward":
        return grad_killed_pushforward(
            spec, f, Df, x0, n, cfg.N, include_rho_tilde=cfg.rho_tilde, **common
        )
    if name == "psi":
        return grad_reflected_psi(spec, f, Df, x0, n, cfg.N, **common)
    if name == "intermediate":
        return grad_reflected_intermediate(spec, f, Df, x0, n, cfg.N, **common)
    if name == "bel":
        return grad_bel(spec, f, x0, n, cfg.N, **common)
    if name == "fd":
        return oracles.finite_difference_gradient(spec, f, x0, n, cfg.N, **common)
    raise ConfigError(f"unknown estimator {name!r}")


def _closed_form_reference(cfg: ExperimentConfig, spec, x0) -> float | None:
    """Quadrature gradient when the model admits the image kernel (bm1d)."""
    if cfg.model != "bm1d" or spec.d != 1:
        return None
    f, _ = make_payoff(cfg.f, spec.d)
    return oracles.images_gradient(1.0, spec.L, float(x0[0]), spec.T, lambda y: f(y[:, None]))


def cmd_gradient(cfg: ExperimentConfig) -> int:
    spec = make_model(cfg.model, T=cfg.T)
    x0 = cfg.resolved_x0()
    f, Df = make_payoff(cfg.f, spec.d)
    reference = _closed_form_reference(cfg, spec, x0)
    rows = []
    for name in cfg.estimators:
        t0 = time.perf_counter()
        est = _run_estimator(name, spec, f, Df, x0, cfg, cfg.n)
        ms = (time.perf_counter() - t0) * 1000.0
        for comp in range(spec.d):
            ref = reference if comp == 0 else (0.0 if reference is not None else None)
            rows.append([
                "gradient", cfg.model, name, comp + 1, cfg.n, cfg.N, cfg.seed,
                float(est.estimate[comp]), float(est.stderr[comp]), ref, round(ms, 3),
            ])
        print(f"{name:>12s}: " + "  ".join(
            f"{est.estimate[c]:+.6f} (se {est.stderr[c]:.6f})" for c in range(spec.d)
        ))
    write_csv(cfg.output, CSV_HEADER, rows)
    return 0


def cmd_convergence(cfg: ExperimentConfig) -> int:
    if not cfg.n_list:
        raise ConfigError("convergence needs n_list (e.g. --n_list 8,16,32,64)")
    if list(cfg.n_list) != sorted(cfg.n_list):
        raise ConfigError("n_list must be ascending")
    spec = make_model(cfg.model, T=cfg.T)
    x0 = cfg.resolved_x0()
    f, Df = make_payoff(cfg.f, spec.d)
    reference = _closed_form_reference(cfg, spec, x0)
    rows = []
    for n in cfg.n_list:
        for name in cfg.estimators:
            t0 = time.perf_counter()
            est = _run_estimator(name, spec, f, Df, x0, cfg, n)
            ms = (time.perf_counter() - t0) * 1000.0
            for comp in range(spec.d):
                ref = reference if comp == 0 else (0.0 if reference is not None else None)
                rows.append([
                    "convergence", cfg.model, name, comp + 1, n, cfg.N, cfg.seed,
                    float(est.estimate[comp]), float(est.stderr[comp]), ref, round(ms, 3),
                ])
            msg = f"n={n:>4d} {name:>12s}: {est.estimate[0]:+.6f} (se {est.stderr[0]:.6f})"
            if reference is not None:
                msg += f"  |err|={abs(est.estimate[0] - reference):.6f}"
            print(msg)
    write_csv(cfg.output, CSV_HEADER, rows)
    return 0


def cmd_compare(cfg: ExperimentConfig) -> int:
    spec = make_model(cfg.model, T=cfg.T)
    x0 = cfg.resolved_x0()
    f, Df = make_payoff(cfg.f, spec.d)
    closed = _closed_form_reference(cfg, spec, x0)
    if closed is not None:
        ref_vec = np.array([closed])
        ref_se = np.zeros(1)
        ref_tag = "images"
    else:
        fd_cfg = replace(cfg, seed=cfg.seed + 7919)
        fd = _run_estimator("fd", spec, f, Df, x0, fd_cfg, cfg.n)
        ref_vec = fd.estimate
        ref_se = fd.stderr
        ref_tag = "fd"
    rows = []
    all_ok = True
    for name in cfg.estimators:
        if name == "fd" and ref_tag == "fd":
            continue
        t0 = time.perf_counter()
        est = _run_estimator(name, spec, f, Df, x0, cfg, cfg.n)
        ms = (time.perf_counter() - t0) * 1000.0
        for comp in range(spec.d):
            gap = abs(est.estimate[comp] - ref_vec[comp])
            band = 3.0 * math.hypot(est.stderr[comp], ref_se[comp])
            ok = gap <= band
            all_ok &= ok
            rows.append([
                "compare", cfg.model, name, comp + 1, cfg.n, cfg.N, cfg.seed,
                float(est.estimate[comp]), float(est.stderr[comp]),
                float(ref_vec[comp]), round(ms, 3),
            ])
            print(
                f"{name:>12s}[{comp + 1}]: {est.estimate[comp]:+.6f} vs {ref_tag} "
                f"{ref_vec[comp]:+.6f}  gap {gap:.6f} band {band:.6f} "
                f"{'ok' if ok else 'FAIL'}"
            )
    write_csv(cfg.output, CSV_HEADER, rows)
    return 0 if all_ok else 1


def _validate_checks(cfg: ExperimentConfig) -> list[list]:
    spec = make_model(cfg.model, T=cfg.T)
    x0 = cfg.resolved_x0()
    d = spec.d
    probe_box = (x0 - 1.5, x0 + 1.5)
    report = validate_hypothesis1(spec, probe_box, n_probes=128)
    rows = [
        ["ellipticity_floor", report.ellipticity_floor, 0.0, 0.0,
         report.ellipticity_floor > 0.0],
        ["boundary_structure", report.max_boundary_violation, report.tolerance, 0.0,
         report.max_boundary_violation <= report.tolerance],
    ]

    N = min(cfg.N, 200_000)
    n = min(cfg.n, 32)
    dt = spec.T / n
    seed = cfg.seed

    def martingale_block(_b, start, stop):
        B = stop - start
        gg = derive_substream(seed, start, "gaussian")
        ug = derive_substream(seed, start, "uniform")
        X = np.broadcast_to(x0, (B, d)).copy()
        Mbar = np.ones(B)
        sq = math.sqrt(dt)
        for _ in range(n):
            G = gg.standard_normal((B, d))
            U = ug.random(B)
            sig = np.asarray(spec.diffusion(X))
            a11 = first_row_squared(sig)
            Xn = X + np.einsum("bjk,bk->bj", sig, sq * G)
            p = bridge_touch_probability(X[:, 0] - spec.L, Xn[:, 0] - spec.L, a11, dt)
            h = (U <= p).astype(float)
            Mbar *= (Xn[:, 0] > spec.L).astype(float) * (1.0 + h)
            X = Xn
        return Mbar[:, None]

    plan = RunPlan(seed=seed, paths=N, steps=n, workers=cfg.workers, estimator_tag="validate")
    acc = run_blocks(plan, martingale_block)
    rows.append(["weight_martingale_mean", float(acc.mean[0]), 1.0, float(acc.stderr[0]),
                 abs(acc.mean[0] - 1.0) <= 3.0 * acc.stderr[0]])

    a11_x0 = float(first_row_squared(np.asarray(spec.diffusion(x0))))
    y_prev = x0.copy()
    y_prev[0] = spec.L + 1.0 * math.sqrt(a11_x0 * dt)

    def kill_block(_b, start, stop):
        B = stop - start
        gg = derive_substream(seed, start, "gaussian")
        ug = derive_substream(seed, start, "uniform")
        sig = np.asarray(spec.diffusion(y_prev))
        a11 = first_row_squared(sig)
        Z = math.sqrt(dt) * gg.standard_normal((B, d))
        x1 = y_prev[0] + Z @ np.asarray(sig)[0, :]
        p = bridge_touch_probability(
            np.full(B, y_prev[0] - spec.L), x1 - spec.L, np.full(B, float(a11)), dt
        )
        h = (ug.random(B) <= p).astype(float)
        m = (x1 > spec.L).astype(float) * (1.0 - h)
        return m[:, None]

    acc = run_blocks(plan, kill_block)
    ref = 2.0 * oracles.normal_cdf(1.0) - 1.0
    rows.append(["one_step_kill_mean_u1", float(acc.mean[0]), ref, float(acc.stderr[0]),
                 abs(acc.mean[0] - ref) <= 3.0 * acc.stderr[0]])

    d0, d1 = 0.2, 0.3
    dt_b = 0.1
    p_formula = float(bridge_touch_probability(
        np.asarray(d0), np.asarray(d1), np.asarray(a11_x0), dt_b
    ))
    substeps = 400
    p_mc, p_se = oracles.crossing_prob_bruteforce(
        a11_x0, 0.0, d0, d1, dt_b, substeps=substeps, N=min(N, 100_000), seed=seed
    )
    allowance = oracles.crossing_bias_bound(a11_x0, 0.0, d0, d1, dt_b, substeps)
    rows.append(["bridge_vs_bruteforce", p_mc, p_formula, p_se,
                 abs(p_mc - p_formula) <= 3.0 * p_se + allowance])

    lhs, rhs, se = oracles.reflected_identity_check(
        a11_x0, spec.L, float(x0[0]), spec.T, lambda y: y, N=N, seed=seed
    )
    rows.append(["reflected_identity", lhs - rhs, 0.0, se, abs(lhs - rhs) <= 3.0 * se])

    target = np.asarray(spec.diffusion(y_prev))[0, :] * float(
        local_time_increment(spec, y_prev, dt)
    )

    def zmbar_block(_b, start, stop):
        B = stop - start
        gg = derive_substream(seed, start, "gaussian")
        ug = derive_substream(seed, start, "uniform")
        sig = np.asarray(spec.diffusion(y_prev))
        a11 = float(first_row_squared(sig))
        Z = math.sqrt(dt) * gg.standard_normal((B, d))
        x1 = y_prev[0] + Z @ sig[0, :]
        p = bridge_touch_probability(
            np.full(B, y_prev[0] - spec.L), x1 - spec.L, np.full(B, a11), dt
        )
        h = (ug.random(B) <= p).astype(float)
        mbar = (x1 > spec.L).astype(float) * (1.0 + h)
        return Z * mbar[:, None]

    acc = run_blocks(plan, zmbar_block)
    gap = float(np.max(np.abs(acc.mean - target)))
    worst = float(np.max(acc.stderr))
    ok = bool(np.all(np.abs(acc.mean - target) <= 3.0 * acc.stderr))
    rows.append(["local_time_one_step_mean", gap, 0.0, worst, ok])
    return rows


def cmd_validate(cfg: ExperimentConfig) -> int:
    rows = _validate_checks(cfg)
    out_rows = []
    all_ok = True
    for name, value, ref, se, ok in rows:
        all_ok &= bool(ok)
        out_rows.append([name, float(value), float(ref), float(se), bool(ok)])
        print(f"{name:>26s}: value {value:+.6e} ref {ref:+.6e} se {se:.3e} "
              f"{'ok' if ok else 'FAIL'}")
    write_csv(cfg.output, VALIDATE_HEADER, out_rows)
    return 0 if all_ok else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="halfgrad",
        description="Gradient estimators for diffusions killed at a half-space boundary",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("validate", "gradient", "convergence", "compare"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--workers", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        ns, extra = parser.parse_known_args(argv)
        cfg = build_config(ns, extra)
        if ns.command == "validate":
            return cmd_validate(cfg)
        if ns.command == "gradient":
            return cmd_gradient(cfg)
        if ns.command == "convergence":
            return cmd_convergence(cfg)
        if ns.command == "compare":
            return cmd_compare(cfg)
        raise ConfigError(f"unknown command {ns.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ModelError, DataError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except HalfgradError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
