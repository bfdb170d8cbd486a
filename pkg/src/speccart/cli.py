"""Reproducible experiment driver.

Subcommands: simulate | train | complete | eval | bench | bound.  Every
command reads a flat INI config plus explicit paths; all randomness is
seeded through the configs, so re-running a command overwrites its outputs
byte-identically.  The worker count for benchmark sweeps comes from the
SPECCART_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import storage
from .baseline import tps_interpolate
from .core import GridSpec
from .dowjons import DowJonsConfig, dowjons
from .metrics import MetricsRow, aligned_factor_errors, misdetection, sre, write_metrics_csv
from .nasdac import nasdac
from .neural import (
    SlfModel,
    TrainConfig,
    conv_autoencoder_specs,
    dense_autoencoder_specs,
    lipschitz_product,
    load_model,
    save_model,
    train_autoencoder,
)
from .simulate import CorpusConfig, SceneConfig, gen_scene, gen_training_corpus
from .theory import BoundInputs, format_report

WORKERS_ENV = "SPECCART_WORKERS"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config helpers


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    found = parser.read(path)
    if not found:
        raise ConfigError(f"config file {path} not found")
    return parser


def _check_keys(section, allowed: dict, name: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(
                f"unknown key {key!r} in [{name}]; allowed keys: {', '.join(sorted(allowed))}"
            )


def _parse_range(text: str) -> tuple[float, float]:
    parts = text.split(":")
    if len(parts) == 1:
        v = float(parts[0])
        return (v, v)
    if len(parts) == 2:
        return (float(parts[0]), float(parts[1]))
    raise ConfigError(f"range must be 'value' or 'lo:hi', got {text!r}")


_SCENE_KEYS = {
    "rows": int,
    "cols": int,
    "bins": int,
    "emitters": int,
    "rho": float,
    "seed": int,
    "snr_db": str,
    "sparse_occupancy": None,
    "gamma": _parse_range,
    "eta": _parse_range,
    "dcorr": _parse_range,
    "psd_extra_bands": int,
    "offgrid_margin": float,
}


def _scene_config(section) -> SceneConfig:
    _check_keys(section, _SCENE_KEYS, "scene")
    get = section.get
    grid = GridSpec(int(get("rows", 32)), int(get("cols", 32)), int(get("bins", 64)))
    snr_raw = get("snr_db", "").strip()
    return SceneConfig(
        grid=grid,
        n_emitters=int(get("emitters", 7)),
        sample_fraction=float(get("rho", 0.1)),
        seed=int(get("seed", 0)),
        gamma_range=_parse_range(get("gamma", "2:2.5")),
        eta_range=_parse_range(get("eta", "3:8")),
        dcorr_range=_parse_range(get("dcorr", "30:100")),
        sparse_occupancy=section.getboolean("sparse_occupancy", True),
        psd_extra_bands=int(get("psd_extra_bands", 16)),
        snr_db=float(snr_raw) if snr_raw else None,
        offgrid_margin=float(get("offgrid_margin", 0.0)),
    )


_CORPUS_KEYS = {
    "rows": int,
    "cols": int,
    "count": int,
    "seed": int,
    "gamma": _parse_range,
    "eta": _parse_range,
    "dcorr": _parse_range,
    "mask_fraction": _parse_range,
    "offgrid_margin": float,
}


def _corpus_config(section) -> tuple[CorpusConfig, int]:
    _check_keys(section, _CORPUS_KEYS, "corpus")
    get = section.get
    grid = GridSpec(int(get("rows", 32)), int(get("cols", 32)), 1)
    cfg = CorpusConfig(
        grid=grid,
        seed=int(get("seed", 0)),
        gamma_range=_parse_range(get("gamma", "2:2.5")),
        eta_range=_parse_range(get("eta", "3:8")),
        dcorr_range=_parse_range(get("dcorr", "30:100")),
        mask_fraction_range=_parse_range(get("mask_fraction", "0.01:0.2")),
        offgrid_margin=float(get("offgrid_margin", 0.0)),
    )
    return cfg, int(get("count", 10000))


_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "step_size": float,
    "beta1": float,
    "beta2": float,
    "val_fraction": float,
    "seed": int,
    "arch": str,
    "latent_dim": int,
    "base_channels": int,
    "hidden": int,
    "mask_channel": None,
}


def _train_config(parser: configparser.ConfigParser) -> dict:
    out = {
        "epochs": 30,
        "batch_size": 64,
        "step_size": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "val_fraction": 0.05,
        "seed": 0,
        "arch": "desk",
        "latent_dim": None,
        "base_channels": None,
        "hidden": 64,
        "mask_channel": False,
    }
    if parser.has_section("train"):
        section = parser["train"]
        _check_keys(section, _TRAIN_KEYS, "train")
        for key in ("epochs", "batch_size", "latent_dim", "base_channels", "hidden", "seed"):
            if key in section:
                out[key] = section.getint(key)
        for key in ("step_size", "beta1", "beta2", "val_fraction"):
            if key in section:
                out[key] = section.getfloat(key)
        if "arch" in section:
            out["arch"] = section.get("arch")
        if "mask_channel" in section:
            out["mask_channel"] = section.getboolean("mask_channel")
    return out


def _dowjons_config(parser) -> DowJonsConfig:
    if parser is None or not parser.has_section("dowjons"):
        return DowJonsConfig()
    section = parser["dowjons"]
    allowed = {"max_outer": int, "tol": float, "inner_steps": int, "step_size": float}
    _check_keys(section, allowed, "dowjons")
    return DowJonsConfig(
        max_outer=section.getint("max_outer", 10),
        tol=section.getfloat("tol", 0.003),
        inner_steps=section.getint("inner_steps", 10),
        step_size=section.getfloat("step_size", 0.01),
    )


def _build_specs(arch: str, rows: int, cols: int, opts: dict):
    if arch == "desk":
        return conv_autoencoder_specs(rows, cols, opts["latent_dim"] or 64, opts["base_channels"] or 16)
    if arch == "full":
        return conv_autoencoder_specs(rows, cols, opts["latent_dim"] or 256, opts["base_channels"] or 32)
    if arch == "dense":
        return dense_autoencoder_specs(rows, cols, opts["latent_dim"] or 16, hidden=opts["hidden"])
    raise ConfigError(f"unknown arch {arch!r}; allowed: desk, full, dense")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    parser = _read_ini(args.config)
    if parser.has_section("corpus"):
        cfg, count = _corpus_config(parser["corpus"])
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        n = storage.write_corpus(out, gen_training_corpus(cfg, count))
        print(f"wrote {n} training samples to {out}")
        return 0
    if not parser.has_section("scene"):
        raise ConfigError("config needs a [scene] or [corpus] section")
    cfg = _scene_config(parser["scene"])
    scene = gen_scene(cfg)
    storage.write_scene(scene, args.out)
    print(f"wrote scene ({cfg.grid.rows}x{cfg.grid.cols}x{cfg.grid.bins}, "
          f"R={cfg.n_emitters}, |obs|={len(scene.observations.mask)}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    parser = _read_ini(args.config) if args.config else configparser.ConfigParser()
    opts = _train_config(parser)
    samples = list(storage.read_corpus(args.corpus))
    rows, cols = samples[0][1].rows, samples[0][1].cols
    cfg = TrainConfig(
        epochs=opts["epochs"],
        batch_size=opts["batch_size"],
        step_size=opts["step_size"],
        beta1=opts["beta1"],
        beta2=opts["beta2"],
        val_fraction=opts["val_fraction"],
        seed=opts["seed"],
    )
    init = None
    if args.resume:
        prev = load_model(args.resume)
        init = (prev.encoder, prev.decoder)
        enc_specs, dec_specs = prev.encoder.specs, prev.decoder.specs
    else:
        enc_specs, dec_specs = _build_specs(opts["arch"], rows, cols, opts)
    result = train_autoencoder(
        samples, enc_specs, dec_specs, cfg, init=init, mask_channel=opts["mask_channel"]
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(SlfModel(result.encoder, result.decoder, result.stats, mask_channel=opts["mask_channel"]), out)
    loss_path = args.loss_csv or str(out) + ".loss.csv"
    with open(loss_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in result.trace:
            writer.writerow(row)
    final = result.trace[-1]
    print(f"trained {cfg.epochs} epochs; final train loss {final[1]:.6g}; model at {out}")
    return 0


def _metrics_for(method, scene_dir, est_tensor, est_factors, seed, runtime, rank):
    meta = storage.read_metadata(Path(scene_dir) / "metadata.txt")
    row = MetricsRow(
        method=method,
        seed=seed,
        rho=float(meta.get("rho", "nan")),
        eta=np.mean(_parse_range(meta.get("eta_range", "nan:nan"))),
        dcorr=np.mean(_parse_range(meta.get("dcorr_range", "nan:nan"))),
        rank=rank,
        snr_db=float(meta["snr_db"]) if meta.get("snr_db") else None,
        sre=None,
        nae_c=None,
        nae_s=None,
        misdetection=None,
        runtime_s=runtime,
    )
    tensor_path = Path(scene_dir) / "tensor.f32"
    if not tensor_path.exists():
        return row
    truth = storage.read_scene_tensor(scene_dir)
    row.sre = sre(est_tensor, truth)
    C_true, S_true = storage.read_scene_factors(scene_dir)
    if est_factors is not None and est_factors[0].shape[1] == C_true.shape[1]:
        try:
            row.nae_c, row.nae_s, _ = aligned_factor_errors(
                est_factors[0], est_factors[1], C_true, S_true
            )
        except ValueError:
            pass  # zero columns in an estimate; leave factor errors empty
    locations = [
        tuple(float(v) for v in item.split(":"))
        for item in meta.get("emitter_cells", "").split(";")
        if item
    ]
    if locations:
        psds = [C_true[:, r] for r in range(C_true.shape[1])]
        row.misdetection = misdetection(est_tensor, truth, locations, psds)
    return row


def cmd_complete(args) -> int:
    obs = storage.read_scene_observations(args.scene)
    parser = _read_ini(args.config) if args.config else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    est_factors = None
    t0 = time.perf_counter()
    if args.method == "tps":
        estimate = tps_interpolate(obs)
        diag_rows = [("runtime_s", time.perf_counter() - t0)]
        trace = None
    else:
        if not args.weights:
            raise ConfigError(f"method {args.method} needs --weights")
        if args.rank is None:
            raise ConfigError(f"method {args.method} needs --rank")
        model = load_model(args.weights)
        t0 = time.perf_counter()  # model load excluded from completion time
        if args.method == "nasdac":
            result = nasdac(obs, args.rank, model)
            d = result.diagnostics
            diag_rows = [
                ("stage1_seconds", d.stage1_seconds),
                ("stage2_seconds", d.stage2_seconds),
                ("spa_indices", " ".join(map(str, d.spa_indices))),
                ("spa_relative_residual", d.spa_relative_residual),
            ]
            trace = None
        else:
            result = dowjons(obs, args.rank, model, _dowjons_config(parser))
            trace = result.diagnostics.trace
            diag_rows = None
        estimate = result.tensor
        est_factors = (
            np.column_stack([p.values for p in result.psds]),
            np.stack([_vec_map(s.values) for s in result.slfs]),
        )
    runtime = time.perf_counter() - t0

    storage.write_f32(out / "xhat.f32", estimate.values)
    if est_factors is not None:
        storage.write_f32(
            out / "factors_est.f32",
            np.concatenate([est_factors[0].ravel(), est_factors[1].ravel()]),
        )
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        if trace is not None:
            writer.writerow(["outer", "objective", "z_grad_norm", "c_kkt_residual", "seconds"])
            for row in trace:
                writer.writerow([row.outer, row.objective, row.z_grad_norm, row.c_kkt_residual, row.seconds])
        else:
            writer.writerow(["key", "value"])
            for key, value in diag_rows:
                writer.writerow([key, value])
    if args.export_slab is not None:
        k = args.export_slab
        storage.write_pgm(out / f"slab_{k}.pgm", estimate.values[:, :, k])
        storage.write_f32(out / f"slab_{k}.f32", estimate.values[:, :, k])
    row = _metrics_for(
        args.method, args.scene, estimate, est_factors,
        seed=int(storage.read_metadata(Path(args.scene) / "metadata.txt").get("seed", 0)),
        runtime=runtime, rank=args.rank or 0,
    )
    write_metrics_csv(out / "metrics.csv", [row])
    print(f"{args.method}: runtime {runtime:.3f}s"
          + (f", SRE {row.sre:.4g}" if row.sre is not None else ""))
    return 0


def _vec_map(values: np.ndarray) -> np.ndarray:
    rows, cols = values.shape
    grid = GridSpec(rows, cols, 1)
    out = np.empty(rows * cols)
    for i in range(rows):
        for j in range(cols):
            out[grid.flat_index(i, j)] = values[i, j]
    return out


def cmd_eval(args) -> int:
    meta = storage.read_metadata(Path(args.scene) / "metadata.txt")
    grid = GridSpec(int(meta["rows"]), int(meta["cols"]), int(meta["bins"]))
    est = storage.read_f32(args.estimate, (grid.rows, grid.cols, grid.bins))
    row = _metrics_for(args.method, args.scene, est, None, seed=int(meta.get("seed", 0)),
                       runtime=None, rank=int(meta.get("emitters", 0)))
    write_metrics_csv(args.out, [row], append=Path(args.out).exists())
    print(f"appended metrics row for {args.method} to {args.out}")
    return 0


# --- bench ------------------------------------------------------------------

_SWEEP_KEYS = {"axis": str, "values": str, "methods": str, "trials": int, "seed": int}
_AXES = ("rho", "eta", "dcorr", "emitters", "snr", "rank_offset")


def _bench_trial(payload):
    """One (method, axis value, trial) cell; returns a MetricsRow."""
    (base, axis, value, method, trial, seed, weights, dj_opts) = payload
    cfg = _apply_axis(base, axis, value, seed + trial)
    rank = cfg.n_emitters + (int(value) if axis == "rank_offset" else 0)
    scene = gen_scene(cfg)
    row = MetricsRow(
        method=method, seed=cfg.seed, rho=cfg.sample_fraction,
        eta=float(np.mean(cfg.eta_range)), dcorr=float(np.mean(cfg.dcorr_range)),
        rank=rank, snr_db=cfg.snr_db, sre=None, nae_c=None, nae_s=None,
        misdetection=None, runtime_s=None,
    )
    try:
        t0 = time.perf_counter()
        if method == "tps":
            est = tps_interpolate(scene.observations)
            factors = None
        else:
            model = load_model(weights)
            solver = nasdac if method == "nasdac" else None
            if solver is not None:
                result = solver(scene.observations, rank, model)
            else:
                result = dowjons(scene.observations, rank, model, dj_opts)
            est = result.tensor
            factors = (
                np.column_stack([p.values for p in result.psds]),
                np.stack([_vec_map(s.values) for s in result.slfs]),
            )
        row.runtime_s = time.perf_counter() - t0
        row.sre = sre(est, scene.tensor)
        if factors is not None and factors[0].shape[1] == scene.factors.C.shape[1]:
            try:
                row.nae_c, row.nae_s, _ = aligned_factor_errors(
                    factors[0], factors[1], scene.factors.C, scene.factors.S
                )
            except ValueError:
                pass
        row.misdetection = misdetection(
            est, scene.tensor,
            [p.location for p in scene.emitters],
            [scene.factors.C[:, r] for r in range(scene.factors.C.shape[1])],
        )
    except Exception as err:  # sweep rows fail independently
        row.error = f"{type(err).__name__}: {err}"
    return row


def _apply_axis(base: SceneConfig, axis: str, value, seed: int) -> SceneConfig:
    from dataclasses import replace

    if axis == "rho":
        return replace(base, sample_fraction=float(value), seed=seed)
    if axis == "eta":
        return replace(base, eta_range=(float(value), float(value)), seed=seed)
    if axis == "dcorr":
        return replace(base, dcorr_range=(float(value), float(value)), seed=seed)
    if axis == "emitters":
        return replace(base, n_emitters=int(value), seed=seed)
    if axis == "snr":
        return replace(base, snr_db=float(value), seed=seed)
    if axis == "rank_offset":
        return replace(base, seed=seed)
    raise ConfigError(f"unknown sweep axis {axis!r}; allowed: {', '.join(_AXES)}")


def cmd_bench(args) -> int:
    parser = _read_ini(args.config)
    if not parser.has_section("sweep"):
        raise ConfigError("sweep config needs a [sweep] section")
    sweep = parser["sweep"]
    _check_keys(sweep, _SWEEP_KEYS, "sweep")
    axis = sweep.get("axis", "rho")
    if axis not in _AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; allowed: {', '.join(_AXES)}")
    values = [v.strip() for v in sweep.get("values", "").split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs a comma-separated 'values' list")
    methods = [m.strip() for m in sweep.get("methods", "nasdac,dowjons,tps").split(",") if m.strip()]
    trials = sweep.getint("trials", 30)
    seed0 = sweep.getint("seed", 0)
    if not parser.has_section("scene"):
        raise ConfigError("sweep config needs a [scene] section with the base scene")
    base = _scene_config(parser["scene"])
    weights = parser.get("model", "weights", fallback=None)
    dj_opts = _dowjons_config(parser)

    jobs = []
    for vi, value in enumerate(values):
        for method in methods:
            for trial in range(trials):
                jobs.append((base, axis, value, method, trial, seed0 + 10_000 * vi, weights, dj_opts))

    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            rows = pool.map(_bench_trial, jobs)
    else:
        rows = [_bench_trial(job) for job in jobs]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    order = np.argsort([f"{j[1]}|{j[2]}|{j[3]}|{j[4]:06d}" for j in jobs])
    rows = [rows[i] for i in order]
    jobs = [jobs[i] for i in order]
    write_metrics_csv(out / "rows.csv", rows)

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["schema", "axis", "value", "method", "trials", "failed", "mean_sre", "mean_nae_c", "mean_nae_s", "mean_misdetection", "mean_runtime_s"])
        for value in values:
            for method in methods:
                cell = [r for r, j in zip(rows, jobs) if j[2] == value and j[3] == method]
                ok = [r for r in cell if not r.error and r.sre is not None]
                def mean(attr):
                    vals = [getattr(r, attr) for r in ok if getattr(r, attr) is not None]
                    return float(np.mean(vals)) if vals else ""
                writer.writerow([
                    "speccart-bench-v1", axis, value, method, len(cell), len(cell) - len(ok),
                    mean("sre"), mean("nae_c"), mean("nae_s"), mean("misdetection"), mean("runtime_s"),
                ])
    print(f"wrote {len(rows)} rows to {out}/rows.csv (summary in summary.csv)")
    return 0


_BOUND_KEYS = {
    "rank": int, "bins": int, "latent_dim": int, "alpha": float, "beta": float,
    "lipschitz": float, "latent_radius": float, "signal_peak": float, "noise_peak": float,
    "delta": float, "n_obs": int, "rows": int, "cols": int, "scale_c": float,
    "err_rep": float, "noise_frob": float, "masked_noise_frob": float,
}


def cmd_bound(args) -> int:
    parser = _read_ini(args.config)
    if not parser.has_section("bound"):
        raise ConfigError("bound config needs a [bound] section")
    section = parser["bound"]
    _check_keys(section, _BOUND_KEYS, "bound")
    values = {}
    for key, cast in _BOUND_KEYS.items():
        if key in section:
            values[key] = cast(section.get(key))
    if args.weights:
        model = load_model(args.weights)
        values["lipschitz"] = lipschitz_product(model.decoder)
        values["latent_dim"] = model.decoder.latent_dim
        values.setdefault("latent_radius", model.decoder.latent_bound)
    missing = [k for k in ("rank", "bins", "latent_dim", "alpha", "beta", "lipschitz",
                           "latent_radius", "signal_peak", "noise_peak", "delta",
                           "n_obs", "rows", "cols") if k not in values]
    if missing:
        raise ConfigError(f"bound inputs missing: {', '.join(missing)}")
    inputs = BoundInputs(
        rank=values["rank"], bins=values["bins"], latent_dim=values["latent_dim"],
        alpha=values["alpha"], beta=values["beta"], lipschitz=values["lipschitz"],
        latent_radius=values["latent_radius"], signal_peak=values["signal_peak"],
        noise_peak=values["noise_peak"], delta=values["delta"], n_obs=values["n_obs"],
        rows=values["rows"], cols=values["cols"], scale_c=values.get("scale_c"),
        err_rep=values.get("err_rep"), noise_frob=values.get("noise_frob"),
        masked_noise_frob=values.get("masked_noise_frob"),
    )
    report = format_report(inputs)
    if args.out:
        Path(args.out).write_text(report)
        print(f"wrote bound report to {args.out}")
    else:
        print(report, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speccart", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scene directory or a training corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the SLF completion model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--resume", help="continue training from an existing model file")
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("complete", help="complete a scene with one method")
    p.add_argument("--scene", required=True)
    p.add_argument("--method", required=True, choices=("nasdac", "dowjons", "tps"))
    p.add_argument("--out", required=True)
    p.add_argument("--weights")
    p.add_argument("--rank", type=int)
    p.add_argument("--config")
    p.add_argument("--export-slab", type=int)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("eval", help="score an estimate file against a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--method", required=True, help="label recorded in the CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="Monte-Carlo sweep over one scene axis")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("bound", help="evaluate the recoverability bound report")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--weights")
    p.set_defaults(func=cmd_bound)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, storage.StorageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
