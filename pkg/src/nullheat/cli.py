"""Experiment driver: config parsing, subcommand dispatch, seeded runs.

Every run resolves its configuration (defaults, config file, --set
overrides), validates it against the shipped JSON schema, and writes a
manifest echoing the full resolved config with its hash and seed next to
the run outputs.  Reports are deterministic for a fixed config and seed;
wall-clock information lives only in the manifest.

Exit codes: 0 ok, 2 schema violation, 3 invariant failure, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import copy
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .backward import solve_backward, terminal_from_w
from .coefficients import (CoefficientSet, EllipticityError, check_ellipticity,
                           cost_constant_K, expression_field, lambda_min,
                           preset_coefficients, sample_sup_norms)
from .control import (ConvergenceError, PenalizedProblem, aux_control,
                      hum_control, null_control_report)
from .forward import (StabilityError, energy_estimate_check, solve_forward,
                      coupled_eigenpairs)
from .geometry import (BulkSurfaceField, Geometry, TimeGrid, build_mesh)
from .noise import build_paths, build_tree
from .verify import (verify_carleman, verify_dissipation, verify_duality,
                     verify_observability)
from .weights import CarlemanWeights, check_weight_bounds, make_psi
from . import reporting as rep

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_INVARIANT = 3
EXIT_NUMERICAL = 4


class SchemaViolation(ValueError):
    pass


DEFAULT_CONFIG = {
    "geometry": {
        "kind": "interval", "a": 0.0, "b": 1.0, "radius": 1.0,
        "control": [0.3, 0.7], "n_x": 17, "n_r": 8, "n_theta": 16,
        "psi_region": None,
    },
    "time": {"T": 1.0, "n_t": 8},
    "coefficients": {"preset": "zero", "values": {}, "amplitude": 1.0,
                     "exprs": {}, "beta": 1.0},
    "noise": {"backend": "tree", "recombining": False, "n_paths": 1024,
              "seed": 12345},
    "weights": {"mu": 2.0, "C": 1.0, "lambda": None},
    "control": {"epsilons": [1e-1, 1e-2, 1e-3, 1e-4], "cg_tol": 1e-10,
                "max_iters": 4000, "C_grid": [0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
                "threshold": 1e-2, "terminal": "eigenfunction",
                "terminal_mode": 0, "terminal_expr": None,
                "clamp_fraction": 0.25},
    "verify": {"lambda_multipliers": [2.0, 4.0, 8.0, 16.0],
               "T_list": [0.2, 0.4, 0.8], "ensemble": 4, "n_random": 3,
               "power_iters": 2, "fault_scale": 1.001},
    "output": {"dir": None},
}


def _schema():
    path = os.path.join(os.path.dirname(__file__), "config_schema.json")
    with open(path) as fh:
        return json.load(fh)


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def _apply_override(config, dotted, raw):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = config
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise SchemaViolation(f"unknown configuration key {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise SchemaViolation(f"unknown configuration key {dotted!r}")
    node[keys[-1]] = value


def resolve_config(path=None, overrides=(), seed=None, out_dir=None):
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        config = _deep_merge(config, user)
    for item in overrides:
        if "=" not in item:
            raise SchemaViolation(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _apply_override(config, key, raw)
    if seed is not None:
        config["noise"]["seed"] = int(seed)
    if out_dir is not None:
        config["output"]["dir"] = out_dir

    import jsonschema
    try:
        jsonschema.validate(config, _schema())
    except jsonschema.ValidationError as exc:
        loc = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaViolation(f"config invalid at {loc}: {exc.message}") from exc
    return config


def _build(config):
    gcfg = config["geometry"]
    geometry = Geometry(kind=gcfg["kind"], a=gcfg["a"], b=gcfg["b"],
                        radius=gcfg["radius"],
                        control=tuple(gcfg["control"]))
    if geometry.kind == "interval":
        mesh = build_mesh(geometry, n_x=gcfg["n_x"])
    else:
        mesh = build_mesh(geometry, n_r=gcfg["n_r"], n_theta=gcfg["n_theta"])
    grid = TimeGrid(config["time"]["T"], config["time"]["n_t"])

    ccfg = config["coefficients"]
    if ccfg["preset"] == "expr":
        kwargs = {k: expression_field(v) for k, v in ccfg["exprs"].items()}
        coeffs = CoefficientSet(beta=ccfg["beta"], time_dependent=True,
                                **kwargs)
        coeffs = sample_sup_norms(coeffs, mesh, grid)
    else:
        coeffs = preset_coefficients(ccfg["preset"], geometry,
                                     amplitude=ccfg["amplitude"],
                                     values=ccfg["values"] or None)
        if ccfg["beta"] is not None:
            coeffs.beta = ccfg["beta"]

    ncfg = config["noise"]
    if ncfg["backend"] == "tree":
        noise = build_tree(grid.n_t, grid.T, recombining=ncfg["recombining"])
    else:
        noise = build_paths(ncfg["n_paths"], grid.n_t, grid.T, ncfg["seed"])

    psi_region = gcfg["psi_region"]
    aux = make_psi(geometry, tuple(psi_region) if psi_region else None)
    return geometry, mesh, grid, coeffs, noise, aux


def _weights(config, aux, coeffs, grid):
    wcfg = config["weights"]
    lam = wcfg["lambda"]
    if lam is None:
        lam = max(lambda_min(coeffs, grid.T, wcfg["C"]), 1.0 + 1e-9)
    return CarlemanWeights(psi=aux, mu=wcfg["mu"], lam=float(lam), T=grid.T)


def _terminal(config, mesh, noise, grid):
    """Terminal data for backward runs: an eigenfunction pair or a leaf
    expression in the spatial point and the Brownian endpoint ``w``."""
    ccfg = config["control"]
    if ccfg["terminal"] == "eigenfunction":
        _, V = coupled_eigenpairs(mesh, ccfg["terminal_mode"] + 1)
        return BulkSurfaceField.from_bulk(mesh, V[:, ccfg["terminal_mode"]])
    expr = ccfg["terminal_expr"]
    if expr is None:
        raise SchemaViolation("control.terminal_expr required for expr mode")
    code = compile(expr, "<terminal>", "eval")

    def fn(w, X):
        from .coefficients import _EXPR_NS
        X = np.atleast_2d(X)
        env = dict(_EXPR_NS)
        env.update(w=w, x=X[:, 0],
                   y=X[:, 1] if X.shape[1] > 1 else np.zeros(len(X)))
        out = eval(code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(out, dtype=float), (len(X),)).copy()

    return terminal_from_w(mesh, noise, fn)


def _initial(mesh, seed):
    from .forward import random_smooth_pair
    return random_smooth_pair(mesh, np.random.default_rng(seed))


def run_simulate_forward(config, out):
    geometry, mesh, grid, coeffs, noise, aux = _build(config)
    h = rep.config_hash(config)
    beta_emp = check_ellipticity(coeffs, mesh, grid)
    z0 = _initial(mesh, config["noise"]["seed"])
    traj = solve_forward(mesh, z0, coeffs, noise, grid)
    energy = energy_estimate_check(traj)
    rows = []
    for n in range(grid.n_t + 1):
        mb, ms = traj.mean_pair(n)
        rows.append({"t": n * grid.dt,
                     "expected_l2_sq": traj.expect_l2_sq(n),
                     "mean_bulk_mid": float(mb[mesh.n_bulk // 2]),
                     "mean_surf_0": float(ms[0])})
    rep.save_csv(os.path.join(out, "trajectory.csv"),
                 ["t", "expected_l2_sq", "mean_bulk_mid", "mean_surf_0"],
                 rows, h)
    rep.save_gnuplot(os.path.join(out, "trajectory.dat"),
                     ["t", "expected_l2_sq"], rows, h)
    ts = [row["t"] for row in rows]
    rep.fig_series(os.path.join(out, "energy.png"), ts,
                   [[row["expected_l2_sq"] for row in rows]], ["E |(z, z_s)|^2"],
                   "t", "expected squared norm", h,
                   title="forward trajectory energy")
    mb, _ = traj.mean_pair(grid.n_t)
    rep.fig_field(os.path.join(out, "final_mean.png"), mesh, mb, h,
                  title="mean field at t = T")
    report = {"beta_empirical": beta_emp, "energy": energy,
              "norms": coeffs.norms, "seed": config["noise"]["seed"]}
    ok = energy["finite"]
    return report, ok, h


def run_simulate_backward(config, out):
    geometry, mesh, grid, coeffs, noise, aux = _build(config)
    h = rep.config_hash(config)
    if config["noise"]["backend"] != "tree":
        raise SchemaViolation("simulate-backward requires noise.backend=tree")
    y_T = _terminal(config, mesh, noise, grid)
    state = solve_backward(mesh, y_T, coeffs, noise, grid)
    rows = []
    for n in range(grid.n_t + 1):
        row = {"t": n * grid.dt, "expected_y_sq": state.expect_l2_sq(n)}
        row["expected_Y_sq"] = (state.expect_integrand_sq(n)
                                if n < grid.n_t else 0.0)
        rows.append(row)
    rep.save_csv(os.path.join(out, "backward.csv"),
                 ["t", "expected_y_sq", "expected_Y_sq"], rows, h)
    rep.save_gnuplot(os.path.join(out, "backward.dat"),
                     ["t", "expected_y_sq", "expected_Y_sq"], rows, h)
    rep.fig_series(os.path.join(out, "backward.png"),
                   [row["t"] for row in rows],
                   [[row["expected_y_sq"] for row in rows],
                    [row["expected_Y_sq"] for row in rows]],
                   ["E |y|^2", "E |Y|^2"], "t", "expected squared norm", h,
                   title="backward state and integrand")
    finite = all(np.isfinite(row["expected_y_sq"]) for row in rows)
    report = {"rows": rows, "seed": config["noise"]["seed"]}
    return report, finite, h


def run_hum_control(config, out):
    geometry, mesh, grid, coeffs, noise, aux = _build(config)
    h = rep.config_hash(config)
    if config["noise"]["backend"] != "tree":
        raise SchemaViolation("hum-control requires noise.backend=tree")
    ccfg = config["control"]
    y_T = _terminal(config, mesh, noise, grid)
    rows = []
    reports = []
    warm = None
    ok = True
    for eps in sorted(ccfg["epsilons"], reverse=True):
        prob = PenalizedProblem(mesh=mesh, coeffs=coeffs, tree=noise,
                                grid=grid, y_T=y_T, eps=eps,
                                cg_tol=ccfg["cg_tol"],
                                max_iters=ccfg["max_iters"])
        res = hum_control(prob, warm_start=warm)
        warm = res.meta["u_flat"]
        nr = null_control_report(res, coeffs, grid.T, C_grid=ccfg["C_grid"],
                                 threshold=ccfg["threshold"])
        reports.append(nr)
        rows.append({"eps": eps, "u_norm_sq": res.u_norm_sq,
                     "y0_norm_sq_over_eps": res.y0_norm ** 2 / eps,
                     "y0_over_yT": nr["y0_over_yT"],
                     "optimality_residual": res.optimality_residual,
                     "iterations": res.iterations})
        ok = ok and res.optimality_residual <= 1e-8
    ok = ok and reports[-1]["success"]
    rep.save_csv(os.path.join(out, "hum.csv"),
                 ["eps", "u_norm_sq", "y0_norm_sq_over_eps", "y0_over_yT",
                  "optimality_residual", "iterations"], rows, h)
    rep.save_gnuplot(os.path.join(out, "hum.dat"),
                     ["eps", "u_norm_sq", "y0_norm_sq_over_eps"], rows, h)
    rep.fig_series(os.path.join(out, "hum.png"),
                   [row["eps"] for row in rows],
                   [[row["u_norm_sq"] for row in rows],
                    [row["y0_norm_sq_over_eps"] for row in rows]],
                   ["E int u^2", "|y(0)|^2 / eps"], "eps", "value", h,
                   logx=True, logy=True, title="penalization sweep")
    report = {"rows": rows, "final": reports[-1], "K": reports[-1]["K"],
              "seed": config["noise"]["seed"]}
    return report, ok, h


def run_aux_control(config, out):
    geometry, mesh, grid, coeffs, noise, aux = _build(config)
    h = rep.config_hash(config)
    if config["noise"]["backend"] != "tree":
        raise SchemaViolation("aux-control requires noise.backend=tree")
    ccfg = config["control"]
    weights = _weights(config, aux, coeffs, grid)
    z0 = _initial(mesh, config["noise"]["seed"])
    traj = solve_forward(mesh, z0, coeffs, noise, grid)
    rows = []
    ok = True
    for eps in sorted(ccfg["epsilons"], reverse=True):
        res = aux_control(mesh, traj, coeffs, weights, eps, noise, grid,
                          cg_tol=ccfg["cg_tol"], max_iters=ccfg["max_iters"],
                          clamp_fraction=ccfg["clamp_fraction"])
        e = res.estimate
        rows.append({"eps": eps, "ratio": e["ratio"],
                     "lhs_total": e["lhs_total"], "rhs_total": e["rhs_total"],
                     "r0_sq_over_eps": e["r0_sq_over_eps"],
                     "optimality_residual": res.optimality_residual,
                     "iterations": res.iterations})
        ok = ok and np.isfinite(e["ratio"]) \
            and e["r0_sq_over_eps"] <= max(e["rhs_total"], 1e-300)
    last = res.estimate
    rep.save_csv(os.path.join(out, "aux.csv"),
                 ["eps", "ratio", "lhs_total", "rhs_total", "r0_sq_over_eps",
                  "optimality_residual", "iterations"], rows, h)
    rep.save_gnuplot(os.path.join(out, "aux.dat"),
                     ["eps", "ratio", "r0_sq_over_eps"], rows, h)
    labels = ["control", "state_bulk", "state_surf", "grad_bulk", "grad_surf",
              "integrand_bulk", "integrand_surf", "rhs_total"]
    rep.fig_bars(os.path.join(out, "aux_terms.png"), labels,
                 [max(last[k], 1e-300) for k in labels], "weighted integral",
                 h, logy=True, title=f"weighted-energy terms (lambda={weights.lam:.3g})")
    report = {"rows": rows, "terms": {k: last[k] for k in labels},
              "lambda": weights.lam, "seed": config["noise"]["seed"]}
    return report, ok, h


def run_verify_carleman(config, out):
    geometry, mesh, grid, coeffs, noise, aux = _build(config)
    h = rep.config_hash(config)
    if config["noise"]["backend"] != "tree":
        raise SchemaViolation("verify-carleman requires noise.backend=tree")
    vcfg = config["verify"]
    lam1 = lambda_min(coeffs, grid.T, config["weights"]["C"])
    lam_list = [m * lam1 for m in vcfg["lambda_multipliers"]]
    report_obj = verify_carleman(mesh, coeffs, aux, grid, noise, lam_list,
                                 mu=config["weights"]["mu"],
                                 n_ensemble=vcfg["ensemble"],
                                 seed=config["noise"]["seed"])
    fields = sorted(report_obj.rows[0].keys())
    rep.save_csv(os.path.join(out, "carleman.csv"), fields, report_obj.rows, h)
    rep.save_gnuplot(os.path.join(out, "carleman.dat"),
                     ["lambda", "ratio"], report_obj.rows, h)
    rep.fig_series(os.path.join(out, "carleman.png"),
                   [row["lambda"] for row in report_obj.rows],
                   [[row["ratio"] for row in report_obj.rows]],
                   ["LHS / RHS"], "lambda", "ratio", h, logx=True,
                   title="weighted-energy ratio over the parameter sweep")
    ratios = report_obj.ratios()
    ok = all(np.isfinite(r) for r in ratios) \
        and max(ratios) <= 10.0 * ratios[0]
    report = {"lambda_threshold": report_obj.lam_threshold,
              "rows": report_obj.rows, "ratio_spread": max(ratios) / ratios[0],
              "seed": config["noise"]["seed"]}
    return report, ok, h


def run_verify_observability(config, out):
    geometry, mesh, grid, coeffs, noise, aux = _build(config)
    h = rep.config_hash(config)
    vcfg = config["verify"]
    obs = verify_observability(mesh, coeffs, vcfg["T_list"],
                               n_t=config["time"]["n_t"],
                               ensemble=vcfg["ensemble"],
                               seed=config["noise"]["seed"],
                               power_iters=vcfg["power_iters"])
    rep.save_csv(os.path.join(out, "observability.csv"),
                 ["T", "C_obs", "C_obs_ensemble"], obs.rows, h)
    rep.save_gnuplot(os.path.join(out, "observability.dat"),
                     ["T", "C_obs"], obs.rows, h)
    rep.fig_fit(os.path.join(out, "observability.png"),
                [1.0 / row["T"] for row in obs.rows],
                [row["C_obs"] for row in obs.rows],
                lambda invT: np.exp(obs.fit_p + obs.fit_q * invT),
                f"exp({obs.fit_p:.2f} + {obs.fit_q:.2f}/T)", "1 / T",
                "C_obs", h, title="observability constant versus horizon")
    ok = (all(np.isfinite(row["C_obs"]) and row["C_obs"] > 0
              for row in obs.rows)
          and obs.fit_q > 0 and obs.fit_r2 >= 0.9)
    report = {"rows": obs.rows, "fit": {"p": obs.fit_p, "q": obs.fit_q,
                                        "r2": obs.fit_r2},
              "excluded": obs.excluded, "seed": config["noise"]["seed"]}
    return report, ok, h


def run_verify_duality(config, out):
    geometry, mesh, grid, coeffs, noise, aux = _build(config)
    h = rep.config_hash(config)
    if config["noise"]["backend"] != "tree":
        raise SchemaViolation("verify-duality requires noise.backend=tree")
    vcfg = config["verify"]
    n_pair = mesh.n_bulk + mesh.n_surf
    run_transpose = n_pair * noise.n_nodes(noise.n_t) <= 40000
    dual = verify_duality(mesh, coeffs, noise, grid,
                          n_random=vcfg["n_random"],
                          seed=config["noise"]["seed"],
                          fault_scale=vcfg["fault_scale"],
                          run_transpose=run_transpose)
    rows = [{"trial": i, "residual": r, "fault_residual": f}
            for i, (r, f) in enumerate(zip(dual["residuals"],
                                           dual["fault_residuals"]))]
    rep.save_csv(os.path.join(out, "duality.csv"),
                 ["trial", "residual", "fault_residual"], rows, h)
    rep.fig_bars(os.path.join(out, "duality.png"),
                 [f"trial {i}" for i in range(len(rows))]
                 + [f"fault {i}" for i in range(len(rows))],
                 dual["residuals"] + dual["fault_residuals"],
                 "duality residual", h, logy=True,
                 title="duality residuals and fault injection")
    ok = dual["max_residual"] <= 1e-10 \
        and dual["min_fault_residual"] > 1e-6
    if run_transpose:
        ok = ok and dual["transpose_entrywise"] <= 1e-10
    report = dict(dual)
    report["seed"] = config["noise"]["seed"]
    return report, ok, h


def run_verify_dissipation(config, out):
    geometry, mesh, grid, coeffs, noise, aux = _build(config)
    h = rep.config_hash(config)
    z0 = _initial(mesh, config["noise"]["seed"])
    traj = solve_forward(mesh, z0, coeffs, noise, grid)
    rep_d = verify_dissipation(traj, coeffs)
    rows = [{"t": n * grid.dt, "energy": e}
            for n, e in enumerate(rep_d["energies"])]
    rep.save_csv(os.path.join(out, "dissipation.csv"), ["t", "energy"],
                 rows, h)
    rep.save_gnuplot(os.path.join(out, "dissipation.dat"), ["t", "energy"],
                     rows, h)
    series = [[row["energy"] for row in rows]]
    labels = ["E |(z, z_s)|^2"]
    if rep_d["r2"] > 0:
        env = [rep_d["energies"][-1] * np.exp(-rep_d["c_max"] * rep_d["r2"]
                                              * (grid.T - row["t"]))
               for row in rows]
        series.append(env)
        labels.append("terminal bound envelope")
    rep.fig_series(os.path.join(out, "dissipation.png"),
                   [row["t"] for row in rows], series, labels, "t",
                   "energy", h, title="energy dissipation")
    ok = rep_d["finite"]
    if rep_d["r2"] == 0.0:
        ok = ok and rep_d["monotone_nonincreasing"]
    report = dict(rep_d)
    report["seed"] = config["noise"]["seed"]
    return report, ok, h


def run_weights_report(config, out):
    geometry, mesh, grid, coeffs, noise, aux = _build(config)
    h = rep.config_hash(config)
    weights = _weights(config, aux, coeffs, grid)
    bounds = check_weight_bounds(weights, mesh, grid)
    rows = []
    for n in range(1, grid.n_t):
        t = n * grid.dt
        a = weights.alpha(t, mesh.bulk_x)
        p = weights.phi(t, mesh.bulk_x)
        th = weights.theta(t, mesh.bulk_x)
        for i in range(mesh.n_bulk):
            rows.append({"t": t, "x": float(mesh.bulk_x[i, 0]),
                         "alpha": float(a[i]), "phi": float(p[i]),
                         "theta": float(th[i])})
    rep.save_csv(os.path.join(out, "weights.csv"),
                 ["t", "x", "alpha", "phi", "theta"], rows, h)
    rep.save_gnuplot(os.path.join(out, "weights.dat"),
                     ["t", "x", "alpha", "phi", "theta"], rows, h)
    ts = [n * grid.dt for n in range(1, grid.n_t)]
    mid = mesh.n_bulk // 2
    rep.fig_series(os.path.join(out, "weights.png"), ts,
                   [[float(weights.phi(t, mesh.bulk_x)[mid]) for t in ts],
                    [float(weights.theta(t, mesh.bulk_x)[mid] ** 2)
                     for t in ts]],
                   ["phi(t, x_mid)", "theta^2(t, x_mid)"], "t", "value", h,
                   logy=True, title="weight profiles at the domain midpoint")
    report = {"constants": bounds, "lambda": weights.lam,
              "mu": weights.mu, "seed": config["noise"]["seed"]}
    return report, bool(bounds["stable"]), h


HANDLERS = {
    "simulate-forward": run_simulate_forward,
    "simulate-backward": run_simulate_backward,
    "hum-control": run_hum_control,
    "aux-control": run_aux_control,
    "verify-carleman": run_verify_carleman,
    "verify-observability": run_verify_observability,
    "verify-duality": run_verify_duality,
    "verify-dissipation": run_verify_dissipation,
    "weights-report": run_weights_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="nullheat",
        description="Null-control experiments for stochastic heat flow "
                    "with dynamic boundary conditions.")
    parser.add_argument("subcommand", choices=sorted(HANDLERS))
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a configuration key (dotted path)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="noise seed override")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker count (results are identical for any "
                             "value; recorded in the manifest)")
    args = parser.parse_args(argv)

    try:
        config = resolve_config(args.config, args.set, args.seed, args.out)
    except SchemaViolation as exc:
        print(f"schema violation: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"schema violation: cannot read config: {exc}", file=sys.stderr)
        return EXIT_SCHEMA

    out = (config["output"]["dir"] or os.environ.get("NULLHEAT_OUT")
           or os.path.join(os.getcwd(), "out"))
    out = os.path.join(out, args.subcommand)
    rep.ensure_dir(out)

    try:
        report, ok, h = HANDLERS[args.subcommand](config, out)
    except SchemaViolation as exc:
        print(f"schema violation: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ConvergenceError, StabilityError, EllipticityError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    report["invariants_ok"] = bool(ok)
    rep.save_json(os.path.join(out, "report.json"), report, h)
    manifest = {
        "subcommand": args.subcommand,
        "config": config,
        "config_hash": h,
        "seed": config["noise"]["seed"],
        "threads": args.threads,
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if not ok:
        print(f"invariant failure in {args.subcommand}; see {out}",
              file=sys.stderr)
        return EXIT_INVARIANT
    print(f"{args.subcommand}: ok; outputs in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
