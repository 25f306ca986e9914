"""Command-line interface.

Subcommands: calibrate, build-map, eval, fit-params, identify,
simulate-imprint. Each accepts ``--config FILE`` (JSON object whose keys are
the long option names with dashes or underscores); explicit flags override
the file, which overrides the built-in defaults. The resolved configuration
is echoed into every output file.

Exit codes:

    0  success
    1  runtime failure (empty map, fit failure, unreadable or corrupt map, ...)
    2  usage error (bad flag or config value, unknown config key, bad model file)
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, ModelGrammarError, TactileMapError, UsageError
from .geometry import SensorIntrinsics

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
OUT_ENV = "TACTILE_MAP_OUT"
TRAINING_SHAPES = ("sphere", "cone1", "cone2", "hollow", "pyramid")


# value converters: accept the flag string or an already-typed JSON value


def _positive(v):
    x = float(v)
    if not np.isfinite(x) or x <= 0:
        raise ValueError(f"must be > 0, got {v!r}")
    return x


def _nonnegative(v):
    x = float(v)
    if not np.isfinite(x) or x < 0:
        raise ValueError(f"must be >= 0, got {v!r}")
    return x


def _count(v):
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(f"must be a whole number, got {v!r}")
    x = int(v)
    if x < 1:
        raise ValueError(f"must be >= 1, got {v!r}")
    return x


def _seed(v):
    x = int(v)
    if x < 0:
        raise ValueError(f"seed must be >= 0, got {v!r}")
    return x


def _split(v):
    if isinstance(v, (list, tuple)):
        return list(v)
    return [s for s in str(v).replace(" ", "").split(",") if s]


def _angles(v):
    out = [float(a) for a in _split(v)]
    if not out or any(not np.isfinite(a) or abs(a) >= 90 for a in out):
        raise ValueError("yaw angles must be finite degrees in (-90, 90)")
    return out


def _fractions(v):
    if v is None:
        return None
    out = [float(a) for a in _split(v)]
    if not out or any(not 0 < a <= 1 for a in out):
        raise ValueError("fractions must lie in (0, 1]")
    return out


def _methods(v):
    from .localization import method_label, parse_method

    out = [method_label(*parse_method(m)) for m in _split(v)]
    if not out:
        raise ValueError("at least one method is required")
    return out


def _names(v):
    out = [str(s) for s in _split(v)]
    if not out:
        raise ValueError("at least one name is required")
    return out


def _text(v):
    return None if v is None else str(v)


def _face(v):
    x = int(v)
    if x not in (0, 1, 2, 3):
        raise ValueError("face must be 0, 1, 2 or 3")
    return x


def _float(v):
    x = float(v)
    if not np.isfinite(x):
        raise ValueError("must be finite")
    return x


def _opt_float(v):
    return None if v is None else _float(v)


def _opt_count(v):
    return None if v is None else _count(v)


def _kind(v):
    from .mapping.fitting import ALIASES, KINDS

    if v is None:
        return None
    k = ALIASES.get(str(v), str(v))
    if k not in KINDS:
        raise ValueError(f"unknown kind {v!r}; choose from {sorted(KINDS)}")
    return k


COMMON = {
    "seed": (_seed, 0, "base seed for noise and sampling"),
    "noise": (_nonnegative, 0.01, "photometric noise sigma (intensity units)"),
    "out_dir": (_text, None, f"output directory (default: ${OUT_ENV} or the current directory)"),
}

OPTIONS = {
    "calibrate": {
        "shapes": (_names, list(TRAINING_SHAPES), "comma-separated model names or paths"),
        "touches": (_count, 120, "touches per shape"),
        "bins": (_count, 32, "lookup bins per color channel"),
        "out": (_text, "calibration.json", "calibration file name"),
    },
    "build-map": {
        "model": (_text, None, "bundled model name or model file (required)"),
        "calibration": (_text, None, "calibration file; built from the training shapes when omitted"),
        "spacing": (_positive, 10.0, "grasp grid spacing (mm)"),
        "yaws": (_angles, [0.0, 20.0, -20.0], "comma-separated grasp yaw angles (deg)"),
        "press": (_positive, 1.0, "press depth at the deepest pixel (mm)"),
        "calib_touches": (_count, 60, "touches per training shape for an on-the-fly calibration"),
        "out": (_text, None, "map file name (default: <model>.tmap)"),
    },
    "eval": {
        "maps": (_names, None, "comma-separated map files (required)"),
        "methods": (_methods, ["RANDOM", "CTI", "CTI-ICP-1", "CTI-ICP-5"], "comma-separated methods"),
        "fractions": (_fractions, None, "comma-separated map fractions for the map-size study"),
        "max_queries": (_opt_count, None, "cap on evaluated entries per sub-map"),
        "repeats": (_count, 10, "random sub-maps drawn per fraction"),
        "opening_tol": (_positive, 2.0, "gripper opening filter (mm)"),
        "tag": (_text, "eval", "output file prefix"),
    },
    "fit-params": {
        "map": (_text, None, "map file (required)"),
        "kind": (_kind, None, "primitive kind (default: the model's declared fit kind)"),
        "max_rms": (_positive, 0.5, "residual (mm) above which the fit is reported as a mismatch"),
    },
    "identify": {
        "maps": (_names, None, "comma-separated map files (required)"),
        "models": (_names, None, "models to draw queries from (default: the maps' models)"),
        "calibration": (_text, None, "calibration file; built from the training shapes when omitted"),
        "queries": (_count, 30, "queries per object"),
        "n": (_count, 5, "entries in the ICP auxiliary cloud"),
        "max_yaw": (_nonnegative, 20.0, "query yaw range (deg)"),
        "calib_touches": (_count, 60, "touches per training shape for an on-the-fly calibration"),
    },
    "simulate-imprint": {
        "model": (_text, None, "bundled model name or model file (required)"),
        "face": (_face, 0, "bounding-box face 0..3 (+x, +y, -x, -y)"),
        "u": (_float, 0.0, "horizontal grid coordinate on the face (mm)"),
        "w": (_opt_float, None, "height of the grasp line (mm, default: mid-height)"),
        "yaw": (_float, 0.0, "grasp yaw (deg)"),
        "press": (_positive, 1.0, "press depth (mm)"),
        "calibration": (_text, None, "calibration file; when given the estimate is rendered too"),
    },
}
REQUIRED = {"build-map": ("model",), "eval": ("maps",), "fit-params": ("map",), "identify": ("maps",), "simulate-imprint": ("model",)}
DESCRIPTIONS = {
    "calibrate": "simulate touches on the training shapes and fit the color-to-gradient lookup",
    "build-map": "grasp a model over the palpation grid and write its tactile map",
    "eval": "leave-one-out localization (and optional map-size study) over one or more maps",
    "fit-params": "fit the model's primitive to a map's merged cloud",
    "identify": "identify objects and localize seeded random grasps among several maps",
    "simulate-imprint": "render one grasp: heightmap, tactile image and optional estimate",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tactile-map", description="Tactile mapping and localization toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd, help=DESCRIPTIONS[cmd], description=DESCRIPTIONS[cmd])
        sp.add_argument("--config", help="JSON file of option values")
        for name, (conv, default, help_) in {**opts, **COMMON}.items():
            flag = "--" + name.replace("_", "-")
            shown = ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in default) if isinstance(default, list) else default
            sp.add_argument(flag, dest=name, type=conv, default=argparse.SUPPRESS, help=f"{help_} [default: {shown}]")
    return p


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Defaults < config file < flags, each value validated."""
    spec = {**OPTIONS[command], **COMMON}
    cfg = {k: v[1] for k, v in spec.items()}
    if getattr(ns, "config", None):
        try:
            raw = json.loads(Path(ns.config).read_text())
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in raw.items():
            name = key.replace("-", "_")
            if name not in spec:
                raise UsageError(f"unknown config key {key!r} for {command}")
            try:
                cfg[name] = spec[name][0](value) if value is not None else None
            except (TypeError, ValueError) as e:
                raise UsageError(f"config key {key!r}: {e}") from None
    for name in spec:
        if hasattr(ns, name):
            cfg[name] = getattr(ns, name)
    for name in REQUIRED.get(command, ()):
        if cfg.get(name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required (flag or config)")
    return cfg


def _out_dir(cfg) -> Path:
    d = Path(cfg["out_dir"] or os.environ.get(OUT_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_all(files: dict) -> None:
    """Write every output at once, after all computation succeeded."""
    for path, data in files.items():
        tmp = path.with_name(path.name + ".tmp")
        if isinstance(data, bytes):
            tmp.write_bytes(data)
        else:
            tmp.write_text(data)
        tmp.replace(path)
        print(f"wrote {path}")


def _photometric(cfg):
    from .sensor_sim.photometric import PhotometricModel

    return PhotometricModel(noise_sigma=cfg["noise"])


def default_calibration(touches: int, seed: int, noise: float, shapes=TRAINING_SHAPES, bins: int = 32, intr=None):
    """Calibrate on seeded random touches of the training shapes."""
    from .local_shape import calibrate
    from .mapping.core import imprint_seed
    from .sensor_sim.contact import simulate_contact
    from .sensor_sim.grasps import sample_touches
    from .sensor_sim.photometric import PhotometricModel, render_tactile_image
    from .sensor_sim.sdf import resolve_model

    intr = intr or SensorIntrinsics()
    pm = PhotometricModel(noise_sigma=noise)
    pairs = []
    for k, name in enumerate(shapes):
        model = resolve_model(name)
        for i, pose in enumerate(sample_touches(model, touches, seed * 1000 + k, intr)):
            hm = simulate_contact(model, pose, intr)
            if not hm.is_empty:
                pairs.append((render_tactile_image(hm, pm, seed=imprint_seed(seed * 1000 + k, i)), hm))
    return calibrate(pairs, bins)


def _calibration(cfg):
    from .local_shape import load_calibration

    if cfg.get("calibration"):
        return load_calibration(cfg["calibration"])
    print(f"calibrating on the training shapes ({cfg['calib_touches']} touches each)...")
    return default_calibration(cfg["calib_touches"], cfg["seed"], cfg["noise"])


def cmd_calibrate(cfg) -> int:
    cal = default_calibration(cfg["touches"], cfg["seed"], cfg["noise"], cfg["shapes"], cfg["bins"])
    out = _out_dir(cfg) / cfg["out"]
    used = int((cal.bin_counts > 0).sum())
    print(f"calibrated {used} color bins; max gradient {cal.max_gradient:.3f}; flat-gel noise {cal.noise_sigma:.4f}")
    d = cal.to_dict()
    d["config"] = cfg
    _write_all({out: json.dumps(d)})
    return EXIT_OK


def cmd_build_map(cfg) -> int:
    from .mapping import build_map, map_to_bytes, merge_clouds
    from .plotting import cloud_views
    from .sensor_sim.grasps import candidate_grid, default_opening, plan_grasp_grid
    from .sensor_sim.sdf import resolve_model

    model = resolve_model(cfg["model"])
    cal = _calibration(cfg)
    intr = SensorIntrinsics()
    t0 = time.perf_counter()
    n_cand = len(candidate_grid(model, cfg["spacing"], cfg["yaws"]))
    plan = plan_grasp_grid(
        model, cfg["spacing"], cfg["yaws"], lambda t: default_opening(t, cfg["press"]), intr, cfg["press"]
    )
    if not plan:
        from .errors import EmptyMapError

        raise EmptyMapError(f"no grasp position touches {model.name!r}")
    tmap = build_map(model, plan, cal, intr, _photometric(cfg), cfg["seed"])
    cloud = merge_clouds(tmap)
    est = np.array([e.estimation_rmse for e in tmap.entries])
    elapsed = time.perf_counter() - t0
    report = {
        "config": cfg,
        "object": model.name,
        "candidates": n_cand,
        "grasps_with_contact": len(plan),
        "entries": len(tmap),
        "merged_points": len(cloud),
        "estimation_rmse_mm": {
            "mean": round(float(est.mean()), 6),
            "median": round(float(np.median(est)), 6),
            "p90": round(float(np.percentile(est, 90)), 6),
            "max": round(float(est.max()), 6),
        },
    }
    print(f"object {model.name}: {n_cand} candidate grasps, {len(plan)} with contact, {len(tmap)} map entries")
    print(f"merged cloud: {len(cloud)} points")
    print(
        "estimation RMSE (mm): mean {mean:.4f}  median {median:.4f}  p90 {p90:.4f}  max {max:.4f}".format(
            **report["estimation_rmse_mm"]
        )
    )
    print(f"build time {elapsed:.1f} s")
    out_dir = _out_dir(cfg)
    name = cfg["out"] or f"{model.name}.tmap"
    extra = {"config": cfg, "model": cfg["model"], "model_name": model.name, "truth": model.truth}
    stem = Path(name).stem
    _write_all(
        {
            out_dir / name: map_to_bytes(tmap, extra),
            out_dir / f"{stem}_build.json": json.dumps(report, indent=2, sort_keys=True) + "\n",
            out_dir / f"{stem}_cloud.svg": cloud_views(cloud.points, f"{model.name}: {len(cloud)} points"),
        }
    )
    return EXIT_OK


def _load_maps(paths):
    from .mapping import load_map_with_extra

    out = []
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"map file not found: {p}")
        out.append(load_map_with_extra(p))
    return out


def cmd_eval(cfg) -> int:
    from .localization import leave_one_out_eval, map_fraction_study, parse_method
    from .plotting import error_histograms, fraction_curves, median_bars
    from .reports import TrialSet, summary, trials_to_csv

    maps = _load_maps(cfg["maps"])
    trials = []
    medians = {}
    for tmap, _ in maps:
        medians[tmap.object_id] = {}
        for label in cfg["methods"]:
            method, n = parse_method(label)
            r = leave_one_out_eval(tmap, method, n, cfg["seed"], cfg["opening_tol"])
            trials.append(TrialSet(tmap.object_id, label, n, 1.0, cfg["seed"], r.entry_indices, r.errors))
            medians[tmap.object_id][label] = r.median
            print(f"{tmap.object_id:>16s} {label:>10s}  median {r.median:8.3f} mm  ({len(r.errors)} entries)")
        if cfg["fractions"]:
            for label in cfg["methods"]:
                method, n = parse_method(label)
                fracs = [f for f in cfg["fractions"] if f < 1.0]
                pts = map_fraction_study(
                    tmap, fracs, method, cfg["seed"], n, cfg["opening_tol"], cfg["max_queries"], cfg["repeats"]
                )
                for pt in pts:
                    trials.append(
                        TrialSet(tmap.object_id, label, n, pt.fraction, cfg["seed"], pt.result.entry_indices, pt.result.errors)
                    )
                    print(f"{tmap.object_id:>16s} {label:>10s}  fraction {pt.fraction:.2f}  median {pt.median:8.3f} mm")

    out_dir = _out_dir(cfg)
    tag = cfg["tag"]
    files = {
        out_dir / f"{tag}.csv": trials_to_csv(trials, cfg),
        out_dir / f"{tag}_summary.json": json.dumps(summary(trials, cfg), indent=2, sort_keys=True) + "\n",
        out_dir / f"{tag}_medians.svg": median_bars(medians, "leave-one-out median error"),
    }
    for tmap, _ in maps:
        oid = tmap.object_id
        full = {t.method: t.errors for t in trials if t.object_id == oid and t.fraction == 1.0}
        files[out_dir / f"{tag}_{oid}_histogram.svg"] = error_histograms(full, title=oid)
        if cfg["fractions"]:
            curves = {}
            for t in trials:
                if t.object_id == oid:
                    curves.setdefault(t.method, []).append((t.fraction, t.median))
            curves = {k: sorted(v) for k, v in curves.items()}
            files[out_dir / f"{tag}_{oid}_fractions.svg"] = fraction_curves(curves, oid)
    _write_all(files)
    return EXIT_OK


def cmd_fit_params(cfg) -> int:
    from .errors import FitFailureError
    from .mapping import fit_primitive_params, merge_clouds, relative_errors

    [(tmap, extra)] = _load_maps([cfg["map"]])
    truth_all = extra.get("truth", {})
    kind = cfg["kind"] or (next(iter(truth_all)) if truth_all else None)
    if kind is None:
        raise UsageError("the map's model declares no fit kind; pass --kind")
    cloud = merge_clouds(tmap)
    status = EXIT_OK
    try:
        fit = fit_primitive_params(cloud, kind)
    except FitFailureError as e:
        fit = e.best
        status = EXIT_RUNTIME
        print(f"fit failed: {e}", file=sys.stderr)
    truth = truth_all.get(kind, {})
    rel = relative_errors(fit, truth)
    print(f"object {tmap.object_id}: {kind} fit on {len(cloud)} points ({fit.inliers} inliers, {fit.iterations} iterations)")
    print(f"{'parameter':>14s} {'fitted':>10s} {'true':>10s} {'rel. error':>11s}")
    for k, v in fit.params.items():
        t = truth.get(k)
        print(f"{k:>14s} {v:10.3f} {t if t is not None else float('nan'):10.3f} " + (f"{100 * rel[k]:10.2f}%" if k in rel else f"{'-':>11s}"))
    print(f"RMS residual {fit.rms_residual:.4f} mm")
    if fit.rms_residual > cfg["max_rms"]:
        print(f"residual exceeds {cfg['max_rms']} mm: the cloud does not look like a {kind}", file=sys.stderr)
        status = EXIT_RUNTIME
    report = {
        "config": cfg,
        "object": tmap.object_id,
        "kind": kind,
        "params": fit.params,
        "placement": fit.placement,
        "truth": truth,
        "relative_error": rel,
        "rms_residual_mm": fit.rms_residual,
        "inliers": fit.inliers,
    }
    _write_all({_out_dir(cfg) / f"{tmap.object_id}_fit.json": json.dumps(report, indent=2, sort_keys=True) + "\n"})
    return status


def cmd_identify(cfg) -> int:
    from .localization import identify, random_queries
    from .mapping.core import imprint_seed
    from .sensor_sim.sdf import resolve_model

    maps = _load_maps(cfg["maps"])
    specs = cfg["models"] or [extra.get("model") for _, extra in maps]
    if len(specs) != len(maps) or any(s is None for s in specs):
        raise UsageError("give one query model per map (--models)")
    cal = _calibration(cfg)
    pm = _photometric(cfg)
    tmaps = [m for m, _ in maps]
    ids = [m.object_id for m in tmaps]
    confusion = np.zeros((len(maps), len(maps)), dtype=int)
    rows = []
    for k, spec in enumerate(specs):
        model = resolve_model(spec)
        qs = random_queries(model, cfg["queries"], int(imprint_seed(cfg["seed"], k).generate_state(1)[0]), cal, pm=pm, max_yaw=cfg["max_yaw"])
        for j, (q, true_pose) in enumerate(qs):
            res = identify(q, tmaps, cfg["n"])
            pred = res.map_index
            confusion[k, pred] += 1
            err = res.result.with_truth(q, true_pose).rmse_vs_truth if pred == k else None
            rows.append({"true": ids[k], "predicted": res.object_id, "query": j, "pose_error_mm": err, "ambiguous": res.ambiguous})
            shown = f"{err:7.2f} mm" if err is not None else "      -   "
            print(f"{ids[k]:>12s} query {j:3d} -> {res.object_id:<12s} pose error {shown}")
    acc = np.trace(confusion) / confusion.sum()
    print("confusion (rows: true, columns: predicted)")
    width = max(len(i) for i in ids) + 2
    print(" " * width + "".join(f"{i:>{width}s}" for i in ids))
    for k, i in enumerate(ids):
        print(f"{i:>{width}s}" + "".join(f"{c:>{width}d}" for c in confusion[k]))
    print(f"accuracy {100 * acc:.1f}%")
    report = {"config": cfg, "objects": ids, "confusion": confusion.tolist(), "accuracy": acc, "queries": rows}
    _write_all({_out_dir(cfg) / "identify.json": json.dumps(report, indent=2, sort_keys=True) + "\n"})
    return EXIT_OK


def cmd_simulate_imprint(cfg) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .local_shape import estimate_local_shape, heightmap_rmse, load_calibration
    from .plotting import STYLE, _svg
    from .sensor_sim.contact import simulate_contact
    from .sensor_sim.grasps import grasp_at
    from .sensor_sim.photometric import render_tactile_image
    from .sensor_sim.sdf import resolve_model

    model = resolve_model(cfg["model"])
    intr = SensorIntrinsics()
    lo, hi = model.bounds()
    w = cfg["w"] if cfg["w"] is not None else float((lo[2] + hi[2]) / 2)
    g = grasp_at(model, cfg["face"], cfg["u"], w, cfg["yaw"], intr, press=cfg["press"])
    if g is None:
        raise TactileMapError("the grasp does not touch the object")
    hm = simulate_contact(model, g.sensor_pose, intr)
    img = render_tactile_image(hm, _photometric(cfg), seed=cfg["seed"])
    panels = [("tactile image", np.transpose(img.channels, (1, 2, 0))), ("heightmap (mm)", hm.depths)]
    print(f"opening {g.gripper_opening:.2f} mm, contact pixels {int(hm.mask.sum())}, max depth {float(hm.depths.max()):.3f} mm")
    if cfg["calibration"]:
        est = estimate_local_shape(img, load_calibration(cfg["calibration"]))
        panels.append(("estimate (mm)", est.depths))
        if not (est.is_empty and hm.is_empty):
            print(f"estimation RMSE {heightmap_rmse(est, hm):.4f} mm")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 2.6))
        for ax, (title, data) in zip(axes, panels):
            im = ax.imshow(data, vmin=0, vmax=max(float(hm.depths.max()), 1e-6) if data.ndim == 2 else None)
            ax.set_title(title)
            ax.set_axis_off()
            if data.ndim == 2:
                fig.colorbar(im, ax=ax, fraction=0.04)
        svg = _svg(fig)
    out_dir = _out_dir(cfg)
    rows = "\n".join(",".join(f"{v:.6f}" for v in row) for row in hm.depths.astype(float))
    _write_all(
        {
            out_dir / f"{model.name}_imprint.svg": svg,
            out_dir / f"{model.name}_heightmap.csv": f"# config={json.dumps(cfg, sort_keys=True)}\n{rows}\n",
        }
    )
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "build-map": cmd_build_map,
    "eval": cmd_eval,
    "fit-params": cmd_fit_params,
    "identify": cmd_identify,
    "simulate-imprint": cmd_simulate_imprint,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    try:
        cfg = resolve_config(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except (UsageError, ConfigurationError, ModelGrammarError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TactileMapError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
