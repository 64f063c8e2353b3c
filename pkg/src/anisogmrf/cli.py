"""Command-line interface: anisogmrf <command> --config run.json ..."""
import argparse
import copy
import json
import os
import sys

import jsonschema
import numpy as np

from . import fileio
from .anisotropy import AnisotropyModel, ModelKind, na_from_sa
from .errors import AnisoError, ConfigError, DataError, InfeasiblePoint, NotSPDError, OmegaUndefinedError
from .grid import GridSpec

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3

_num = {"type": "number"}
_int = {"type": "integer"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {"enum": ["si", "sa", "na"]},
        "grid": {
            "type": "object", "additionalProperties": False,
            "required": ["M", "N", "P", "bounds"],
            "properties": {"M": {"type": "integer", "minimum": 3}, "N": {"type": "integer", "minimum": 3},
                           "P": {"type": "integer", "minimum": 3},
                           "bounds": {"type": "array", "items": _num, "minItems": 6, "maxItems": 6}},
        },
        "theta": {"anyOf": [{"type": "array", "items": _num}, {"const": "truth"}]},
        "noise_sd": {"type": ["number", "null"], "minimum": 0},
        "seed": _int,
        "m_eff": {"type": "integer", "minimum": 1},
        "V": {"type": "number", "exclusiveMinimum": 0},
        "boundary": {"enum": ["mirror", "drop"]},
        "simulate": {"type": "object", "additionalProperties": False,
                     "properties": {"n_real": {"type": "integer", "minimum": 1}}},
        "fit": {"type": "object", "additionalProperties": False,
                "properties": {"maxiter": {"type": "integer", "minimum": 1}, "gtol": _num, "ftol": _num,
                               "init": {"type": "string"}}},
        "predict": {"type": "object", "additionalProperties": False,
                    "properties": {"mode": {"enum": ["latent", "observation"]}}},
        "simstudy": {"type": "object", "additionalProperties": False,
                     "properties": {"locations": {"type": "array", "items": {"anyOf": [_int, {"const": "full"}]}},
                                    "realizations": {"type": "array", "items": _int},
                                    "cells": {"type": "array", "items": {"type": "array", "minItems": 2,
                                                                         "maxItems": 2}},
                                    "trials": {"type": "integer", "minimum": 1},
                                    "init": {"enum": ["truth", "default"]}}},
        "emulator": {"type": "object", "additionalProperties": False,
                     "properties": {"kinds": {"type": "array", "items": {"enum": ["sa", "na"]}},
                                    "T": {"type": "integer", "minimum": 2},
                                    "segments": {"type": "integer", "minimum": 2},
                                    "permutations": {"type": "integer", "minimum": 1},
                                    "sigma_meas": {"type": ["number", "null"], "exclusiveMinimum": 0},
                                    "truth": {"enum": ["na", "sa"]}}},
        "gradcheck": {"type": "object", "additionalProperties": False,
                      "properties": {"points": {"type": "integer", "minimum": 1},
                                     "components": {"type": "integer", "minimum": 1},
                                     "step": {"type": "number", "exclusiveMinimum": 0},
                                     "scheme": {"enum": ["central", "richardson"]},
                                     "n_real": {"type": "integer", "minimum": 1}}},
    },
}

DEFAULTS = {
    "model": "si",
    "grid": {"M": 20, "N": 20, "P": 20, "bounds": [0.0, 40.0, 0.0, 40.0, 0.0, 40.0]},
    "theta": "truth",
    "noise_sd": None,
    "seed": 0,
    "m_eff": 3,
    "V": 1e4,
    "boundary": "mirror",
    "simulate": {"n_real": 1},
    "fit": {"maxiter": 500, "gtol": 1e-5, "ftol": 1e-9, "init": "default"},
    "predict": {"mode": "latent"},
    "simstudy": {"cells": [[100, 10], [8000, 1], [8000, 10]], "trials": 10, "init": "truth"},
    "emulator": {"kinds": ["sa", "na"], "T": 143, "segments": 9, "permutations": 10, "sigma_meas": None,
                 "truth": "na"},
    "gradcheck": {"points": 1, "components": 20, "step": 1e-4, "scheme": "central", "n_real": 2},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path):
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {e.message}") from None
    cfg = _merge(DEFAULTS, raw)
    if "simstudy" in raw and "cells" not in raw["simstudy"] and (
            "locations" in raw["simstudy"] or "realizations" in raw["simstudy"]):
        cfg["simstudy"].pop("cells")
    return cfg


def grid_of(cfg):
    g = cfg["grid"]
    return GridSpec(g["M"], g["N"], g["P"], tuple(float(b) for b in g["bounds"]))


def truth_model(cfg, kind=None):
    from .simstudy import make_truth
    kind = ModelKind.parse(kind or cfg["model"])
    grid = grid_of(cfg)
    if cfg["theta"] == "truth":
        m = make_truth(kind, grid, m_eff=cfg["m_eff"])
    else:
        m = AnisotropyModel(kind, cfg["theta"], grid.bounds, cfg["m_eff"])
    if cfg["noise_sd"] is not None and cfg["noise_sd"] > 0:
        th = m.theta.copy()
        th[-1] = -2 * np.log(cfg["noise_sd"])
        m = m.with_theta(th)
    return m


def _resolved(cfg, out, **extra):
    c = copy.deepcopy(cfg)
    for k, v in extra.items():
        c.setdefault(k, {}).update(v) if isinstance(v, dict) else c.__setitem__(k, v)
    fileio.dump_json(out + ".resolved.json", c)
    return c


def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


def _strip_timing(d):
    if isinstance(d, dict):
        return {k: _strip_timing(v) for k, v in d.items() if k not in ("wall_time", "seconds")}
    if isinstance(d, list):
        return [_strip_timing(v) for v in d]
    if isinstance(d, np.ndarray):
        return d.tolist()
    if isinstance(d, np.generic):
        return d.item()
    return d


def _load_data(args, grid):
    from .model import Dataset
    if args.obs and args.field:
        raise UsageError("give --obs or --field, not both")
    if args.obs:
        pts, vals, real = fileio.read_observations(args.obs)
        bad = ~np.all((pts >= grid.lower) & (pts <= grid.upper), axis=1)
        if np.any(bad):
            raise DataError(f"{args.obs}: row {int(np.argmax(bad)) + 2} lies outside the grid",
                            row=int(np.argmax(bad)) + 2)
        return Dataset.from_locations(grid, pts, vals, real)
    if args.field:
        g2, Z = fileio.read_gf3d(args.field)
        if g2 != grid:
            raise DataError(f"{args.field}: grid {g2.shape} differs from the configured grid {grid.shape}")
        return Dataset.full_grid(grid, Z.T)
    raise UsageError("one of --obs or --field is required")


# ---------------------------------------------------------------- commands
def cmd_simulate(args, cfg):
    from .model import LatentSpec
    if args.n_real is not None:
        cfg["simulate"]["n_real"] = args.n_real
    if args.seed is not None:
        cfg["seed"] = args.seed
    grid = grid_of(cfg)
    truth = truth_model(cfg)
    lat = LatentSpec(grid, truth, V=cfg["V"], boundary=cfg["boundary"])
    rng = _rng(cfg["seed"], 0)
    R = cfg["simulate"]["n_real"]
    W = lat.sample(R, rng)
    sd = np.sqrt(truth.sigma2) if cfg["noise_sd"] is None else cfg["noise_sd"]
    Y = W + sd * rng.standard_normal(W.shape)
    fileio.write_gf3d(args.out, grid, Y.T)
    if args.dump_q:
        from .fvm import write_matrix_market
        write_matrix_market(args.dump_q, lat.Q())
    _resolved(cfg, args.out)


def _init_theta(args, cfg, data, grid, kind):
    from .inference import default_init, fit
    init = args.init or cfg["fit"]["init"]
    cfg["fit"]["init"] = init
    fkw = dict(maxiter=cfg["fit"]["maxiter"], gtol=cfg["fit"]["gtol"], ftol=cfg["fit"]["ftol"],
               V=cfg["V"], boundary=cfg["boundary"], m_eff=cfg["m_eff"])
    if init == "default":
        return default_init(kind, data, grid, cfg["m_eff"]), None
    if init == "truth":
        return truth_model(cfg, kind).theta, None
    if init == "from-sa":
        if kind is not ModelKind.NA:
            raise ConfigError("--init from-sa only applies to --model na")
        sa = fit("sa", data, grid, **fkw)
        return na_from_sa(AnisotropyModel("sa", sa.theta), grid.bounds, cfg["m_eff"]).theta, sa
    try:
        with open(init, encoding="utf-8") as fh:
            th = json.load(fh)["theta"]
    except (OSError, KeyError, json.JSONDecodeError):
        raise ConfigError(f"--init {init!r}: expected default, truth, from-sa or a fit JSON file") from None
    return np.asarray(th, dtype=float), None


def cmd_fit(args, cfg):
    from .inference import fit
    if args.model:
        cfg["model"] = args.model
    kind = ModelKind.parse(cfg["model"])
    grid = grid_of(cfg)
    data = _load_data(args, grid)
    init, sa = _init_theta(args, cfg, data, grid, kind)
    res = fit(kind, data, grid, init=init, maxiter=cfg["fit"]["maxiter"], gtol=cfg["fit"]["gtol"],
              ftol=cfg["fit"]["ftol"], V=cfg["V"], boundary=cfg["boundary"], m_eff=cfg["m_eff"])
    out = res.to_dict()
    out["n_obs"] = data.n
    if kind is ModelKind.NA:
        out["bounds"] = list(grid.bounds)
        out["m_eff"] = cfg["m_eff"]
    if sa is not None:
        out["warm_start"] = sa.to_dict()
    fileio.dump_json(args.out, _strip_timing(out))
    _resolved(cfg, args.out)


def cmd_predict(args, cfg):
    from .model import LatentSpec, condition
    grid = grid_of(cfg)
    with open(args.fit, encoding="utf-8") as fh:
        fr = json.load(fh)
    model = AnisotropyModel.from_dict(fr, bounds=grid.bounds)
    data = _load_data(args, grid)
    tp, _, _ = fileio.read_observations(args.targets) if _has_value(args.targets) else (_read_xyz(args.targets),
                                                                                       None, None)
    mode = args.mode or cfg["predict"]["mode"]
    cfg["predict"]["mode"] = mode
    lat = LatentSpec(grid, model, V=cfg["V"], boundary=cfg["boundary"])
    post = condition(lat, data, model.sigma2)
    rows = []
    for r in post.ids:
        mean, var = post.predict(tp, mode=mode, realization=r)
        rows += [(r, *p, m, v) for p, m, v in zip(tp, mean, var)]
    fileio.write_table(args.out, ["realization", "x", "y", "z", "mean", "variance"],
                       [(int(r[0]), *map(float, r[1:])) for r in rows])
    _resolved(cfg, args.out)


def _has_value(path):
    with open(path, encoding="utf-8") as fh:
        return "value" in fh.readline()


def _read_xyz(path):
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        head = [h.strip() for h in next(rd, [])]
        if head[:3] != ["x", "y", "z"]:
            raise DataError(f"{path}: header must start with x,y,z", row=1)
        pts = []
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            try:
                pts.append([float(v) for v in row[:3]])
            except ValueError:
                raise DataError(f"{path}: row {lineno}: cannot parse coordinates", row=lineno) from None
    return np.array(pts).reshape(-1, 3)


def cmd_simstudy(args, cfg):
    from .simstudy import StudyConfig, run_study
    if args.model:
        cfg["model"] = args.model
    if args.trials is not None:
        cfg["simstudy"]["trials"] = args.trials
    if args.seed is not None:
        cfg["seed"] = args.seed
    s = cfg["simstudy"]
    grid = grid_of(cfg)
    truth = truth_model(cfg)
    sc = StudyConfig(kind=cfg["model"], grid=grid, trials=s["trials"], seed=cfg["seed"],
                     theta_true=list(truth.theta) if truth.kind is not ModelKind.NA else None,
                     sigma=cfg["noise_sd"], init=s["init"], maxiter=cfg["fit"]["maxiter"],
                     cells=s.get("cells"))
    if "cells" not in s:
        sc.locations, sc.realizations = s.get("locations", sc.locations), s.get("realizations", sc.realizations)
    rep = run_study(sc, workers=args.threads or 1)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(rep.to_csv())
    d = _strip_timing(json.loads(rep.to_json()))
    fileio.dump_json(os.path.splitext(args.out)[0] + ".json", d)
    _resolved(cfg, args.out)


def cmd_emulate(args, cfg):
    from .emulator import FieldSeries, ar1_decompose, fit_prior, synthetic_series
    grid = grid_of(cfg)
    e = cfg["emulator"]
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.series:
        g2, Z = fileio.read_gf3d(args.series)
        series = FieldSeries(g2, Z)
        grid = g2
    else:
        series = synthetic_series(grid, T=e["T"], seed=cfg["seed"])
        fileio.write_gf3d(os.path.splitext(args.out)[0] + ".series.gf3d", grid, series.Z)
    dec = ar1_decompose(series)
    fkw = dict(maxiter=cfg["fit"]["maxiter"])
    out = {"grid": grid.to_dict(), "T": series.T, "mu": dec.mu.tolist(), "phi": dec.phi.tolist(), "priors": {}}
    sa = None
    for kind in e["kinds"]:
        p = fit_prior(dec, kind, sa_prior=sa, **fkw)
        if kind == "sa":
            sa = p
        out["priors"][kind] = _strip_timing(p.fit.to_dict()) | {"model": p.model.to_dict()}
    fileio.dump_json(args.out, out)
    _resolved(cfg, args.out)


def _load_priors(path):
    from .emulator import PriorModel
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    grid = GridSpec.from_dict(d["grid"])
    mu = np.asarray(d["mu"])
    return grid, {k: PriorModel(grid, mu, AnisotropyModel.from_dict(v["model"], grid.bounds))
                  for k, v in d["priors"].items()}


def cmd_evaluate(args, cfg):
    from .emulator import SegmentedObservations, sequential_evaluate, summarize, synthetic_segments
    from .model import LatentSpec
    e = cfg["emulator"]
    if args.permutations is not None:
        e["permutations"] = args.permutations
    if args.seed is not None:
        cfg["seed"] = args.seed
    grid, priors = _load_priors(args.priors)
    if args.segments:
        seg, pts, vals = fileio.read_segments(args.segments)
    else:
        tk = e["truth"]
        if tk not in priors:
            raise ConfigError(f"truth prior {tk!r} not in {args.priors}")
        p = priors[tk]
        truth = p.mu + LatentSpec(grid, p.model).sample(1, _rng(cfg["seed"], 1))[:, 0]
        seg, pts, vals = synthetic_segments(grid, truth, e["segments"], seed=cfg["seed"])
        fileio.write_segments(os.path.splitext(args.out)[0] + ".segments.csv", seg, pts, vals)
    obs = SegmentedObservations.from_points(grid, seg, pts, vals)
    s2 = None if e["sigma_meas"] is None else e["sigma_meas"] ** 2
    rows, summ = [], {}
    for kind, p in sorted(priors.items()):
        r = sequential_evaluate(p, obs, n_perm=e["permutations"], seed=cfg["seed"], sigma2=s2)
        rows += [(kind, *x) for x in r]
        summ[kind] = summarize(r)
    fileio.write_table(args.out, ["prior", "permutation", "prefix", "proportion", "n_holdout", "rmse", "crps"],
                       rows)
    fileio.dump_json(os.path.splitext(args.out)[0] + ".summary.json", summ)
    _resolved(cfg, args.out)


def cmd_gradcheck(args, cfg):
    from .inference import LikelihoodWorkspace, fd_check
    from .simstudy import simulate_data
    if args.model:
        cfg["model"] = args.model
    if args.seed is not None:
        cfg["seed"] = args.seed
    gc = cfg["gradcheck"]
    kind = ModelKind.parse(cfg["model"])
    grid = grid_of(cfg)
    truth = truth_model(cfg)
    rng = _rng(cfg["seed"], 2)
    data = simulate_data(truth, grid, grid.n_cells, gc["n_real"], rng,
                         cfg["noise_sd"] if cfg["noise_sd"] else None)
    ws = LikelihoodWorkspace(grid, kind, data, V=cfg["V"], boundary=cfg["boundary"], m_eff=cfg["m_eff"])
    reports = []
    for _ in range(gc["points"]):
        th = truth.theta + 0.1 * rng.standard_normal(len(truth.theta))
        comps = None
        if kind is ModelKind.NA:
            comps = np.sort(rng.choice(len(th), min(gc["components"], len(th)), replace=False))
        reports.append(fd_check(ws, th, comps, gc["step"], gc["scheme"]) | {"theta": th.tolist()})
    out = {"model": kind.value, "max_rel_err": max(r["max_rel_err"] for r in reports), "points": reports}
    fileio.dump_json(args.out, out)
    _resolved(cfg, args.out)


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "simstudy": cmd_simstudy,
            "emulate": cmd_emulate, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def build_parser():
    p = _Parser(prog="anisogmrf", description="Non-stationary anisotropic GMRF toolkit")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads and worker processes")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--out", required=True)
        s.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        return s

    s = cmd("simulate", "draw y = w + noise on the full grid into a GF3D file")
    s.add_argument("--n-real", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--dump-q", help="also write the prior precision in Matrix Market format")

    s = cmd("fit", "maximum likelihood fit")
    s.add_argument("--model", choices=["si", "sa", "na"])
    s.add_argument("--obs", help="CSV x,y,z,value[,realization]")
    s.add_argument("--field", help="GF3D file, each slice one full-grid realization")
    s.add_argument("--init", help="default | truth | from-sa | path to a fit JSON")

    s = cmd("predict", "conditional mean and variance at target points")
    s.add_argument("--fit", required=True)
    s.add_argument("--obs")
    s.add_argument("--field")
    s.add_argument("--targets", required=True, help="CSV with x,y,z columns")
    s.add_argument("--mode", choices=["latent", "observation"])

    s = cmd("simstudy", "simulate and refit over a design of (locations, realizations)")
    s.add_argument("--model", choices=["si", "sa"])
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)

    s = cmd("emulate", "AR(1) decomposition and prior fits for a gridded series")
    s.add_argument("--series", help="GF3D series; a synthetic plume series is generated if omitted")
    s.add_argument("--seed", type=int)

    s = cmd("evaluate", "sequential held-out scoring of fitted priors")
    s.add_argument("--priors", required=True, help="output of the emulate command")
    s.add_argument("--segments", help="CSV segment,x,y,z,value; synthetic if omitted")
    s.add_argument("--permutations", type=int)
    s.add_argument("--seed", type=int)

    s = cmd("gradcheck", "analytic gradient against central differences")
    s.add_argument("--model", choices=["si", "sa", "na"])
    s.add_argument("--seed", type=int)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("anisogmrf: a command is required (" + ", ".join(COMMANDS) + ")")
        cfg = load_config(args.config)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](args, cfg)
        else:
            COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NotSPDError, InfeasiblePoint, OmegaUndefinedError, np.linalg.LinAlgError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataError, AnisoError, ValueError, KeyError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"validation error: {e.filename}: {e.strerror}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
