"""Batch command line: train, evaluate, forecast, ablate, report, replay, synth.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input validation
failure.  Each command that writes an output directory also writes a
manifest (``manifest.json`` for train/ablate, ``<command>.manifest.json``
for evaluate/forecast); ``dualvdt replay <manifest>`` reruns it.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import torch

from . import __version__
from . import config as configmod
from .config import ConfigError
from .core import Rng
from .data import (
    DataError,
    NormStats,
    RawSeries,
    fit_normalize,
    load_csv,
    make_windows,
    split_series,
    synth_sinusoids,
)
from .model import (
    DualVDT,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    ablate,
    ablation_markdown,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    write_ablation_csv,
    write_loss_csv,
)
from .samplers import SamplerSpec

SPLITS = ("train", "val", "test")
LOCK_NAME = ".dualvdt.lock"


@dataclass
class Prepared:
    series: RawSeries
    stats: NormStats
    windows: dict


def load_series(ds: dict) -> RawSeries:
    if ds["schema"] == "synthetic":
        syn = ds["synthetic"]
        return synth_sinusoids(Rng(syn["seed"]), syn["n"], syn["T"], syn["noise_std"])
    return load_csv(ds["path"], ds["schema"], ds["target"], ds.get("time_column"))


def prepare(ds: dict, stats: NormStats | None = None) -> Prepared:
    """Split chronologically, window each split, normalise with train-split statistics."""
    series = load_series(ds)
    parts = dict(zip(SPLITS, split_series(series, ds["split"])))
    raw = {k: make_windows(s, ds["T_x"], ds["T_y"], ds["stride"]) for k, s in parts.items()}
    if stats is None:
        if not raw["train"]:
            raise DataError(f"training split ({parts['train'].T} rows) is shorter than one window")
        stats = fit_normalize(raw["train"])
    return Prepared(series, stats, {k: [stats.apply(w) for w in v] for k, v in raw.items()})


def model_config(cfg: dict, series: RawSeries) -> ModelConfig:
    m = dict(cfg["model"])
    m["sampler"] = SamplerSpec(**m["sampler"])
    return ModelConfig(n=series.n, T_x=cfg["dataset"]["T_x"], T_y=cfg["dataset"]["T_y"],
                       target_index=series.target_index, **m)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["training"])


@contextlib.contextmanager
def locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out_dir} is locked by another dualvdt process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(out_dir: Path, command: str, args: dict, cfg: dict | None, seed: int, outputs: list[str]):
    manifest = {
        "command": command,
        "args": args,
        "config": cfg,
        "seed": seed,
        "code_version": __version__,
        "outputs": outputs,
    }
    # train/ablate own their directory; evaluate/forecast may share one with a run
    name = "manifest.json" if command in ("train", "ablate") else f"{command}.manifest.json"
    (out_dir / name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolve_out(cfg: dict, out_dir) -> Path:
    target = out_dir or cfg.get("output_dir")
    if not target:
        raise ConfigError("output_dir", "required (set it in the config or pass --out)")
    return Path(target).resolve()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: dict, out_dir=None, plot: bool = False, log=None) -> dict:
    out = _resolve_out(cfg, out_dir)
    prep = prepare(cfg["dataset"])
    mcfg = model_config(cfg, prep.series)
    tcfg = train_config(cfg)
    with locked(out):
        torch.manual_seed(cfg["seed"])
        model = DualVDT(mcfg, Rng(cfg["seed"]))
        _, history = train(model, prep.windows["train"], tcfg, Rng(cfg["seed"] + 1), log=log)
        extra = {
            "dataset": cfg["dataset"],
            "norm": prep.stats.to_dict(),
            "variables": prep.series.names,
            "target": prep.series.target,
            "seed": cfg["seed"],
            "training": cfg["training"],
        }
        save_checkpoint(out / "checkpoint.ckpt", model, extra)
        write_loss_csv(out / "loss.csv", history)
        outputs = ["checkpoint.ckpt", "loss.csv"]
        if plot:
            from .plotting import plot_loss_curves

            plot_loss_curves(out / "loss.csv", out / "loss.png")
            outputs.append("loss.png")
        cfg = dict(cfg, output_dir=str(out))
        write_manifest(out, "train", {}, cfg, cfg["seed"], outputs)
    return {"checkpoint": out / "checkpoint.ckpt", "loss_csv": out / "loss.csv", "history": history}


def _dataset_from_header(header: dict, data_path=None) -> dict:
    ds = dict(header["dataset"])
    if data_path is not None:
        ds["path"] = str(Path(data_path).resolve())
    return ds


def cmd_evaluate(checkpoint, split: str = "test", data_path=None, seed: int | None = None, out_dir=None) -> dict:
    if split not in SPLITS:
        raise ConfigError("split", f"must be one of {SPLITS}")
    model, header = load_checkpoint(checkpoint)
    seed = header["seed"] if seed is None else seed
    stats = NormStats.from_dict(header["norm"])
    prep = prepare(_dataset_from_header(header, data_path), stats)
    if prep.series.names != header["variables"]:
        raise DataError(f"dataset variables {prep.series.names} differ from checkpoint {header['variables']}")
    windows = prep.windows[split]
    if not windows:
        raise DataError(f"split {split!r} holds no complete window")
    model.eval()
    m = evaluate(model, windows, Rng(seed))
    report = {"mse": m.mse, "mae": m.mae, "mse_all": m.mse_all, "mae_all": m.mae_all,
              "n_windows": m.n_windows, "split": split, "seed": seed}
    if out_dir is not None:
        out = Path(out_dir).resolve()
        with locked(out):
            (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            args = {"checkpoint": str(Path(checkpoint).resolve()), "split": split,
                    "data_path": None if data_path is None else str(Path(data_path).resolve())}
            write_manifest(out, "evaluate", args, None, seed, ["metrics.json"])
    return report


def read_forecast_input(path, header: dict) -> RawSeries:
    ds = header["dataset"]
    names = header["variables"]
    if ds["schema"] == "ett":
        series = load_csv(path, "ett")
    else:
        with open(path, newline="") as fh:
            cols = [c.strip() for c in next(csv.reader(fh), [])]
        if not cols:
            raise DataError(f"{path}: missing header row")
        time_col = ds.get("time_column") or cols[0]
        got = [c for c in cols if c != time_col]
        missing = [c for c in names if c not in got]
        extra = [c for c in got if c not in names]
        if missing or extra:
            raise DataError(f"{path}: column mismatch with checkpoint (missing {missing}, unexpected {extra})")
        series = load_csv(path, "generic", header["target"], time_col)
    if series.names != names:
        if sorted(series.names) != sorted(names):
            raise DataError(f"{path}: columns {series.names} do not match checkpoint {names}")
        order = [series.names.index(c) for c in names]
        series = RawSeries(list(names), series.timestamps, series.values[:, order], header["target"])
    return series


def cmd_forecast(checkpoint, input_csv, out=None, seed: int | None = None, plot: bool = False) -> Path:
    """Forecast the T_y steps following the last T_x rows of ``input_csv``.

    Writes ``step,variable,forecast`` rows in original units; ``out`` is a
    directory (gets ``forecast.csv`` and a manifest) or a ``.csv`` path.
    """
    model, header = load_checkpoint(checkpoint)
    seed = header["seed"] if seed is None else seed
    series = read_forecast_input(input_csv, header)
    T_x = model.cfg.T_x
    if series.T < T_x:
        raise DataError(f"{input_csv}: need at least {T_x} rows of history, found {series.T}")
    stats = NormStats.from_dict(header["norm"])
    x = (series.values[-T_x:] - stats.mean) / stats.std
    model.eval()
    with torch.no_grad():
        y = model.forecast(torch.from_numpy(x).unsqueeze(0), Rng(seed))[0].numpy()
    y = stats.invert_array(y)

    out = Path(out).resolve() if out is not None else Path("forecast.csv").resolve()
    as_dir = out.suffix.lower() != ".csv"
    target = out / "forecast.csv" if as_dir else out
    ctx = locked(out) if as_dir else contextlib.nullcontext()
    with ctx:
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "variable", "forecast"])
            for h in range(y.shape[0]):
                for j, name in enumerate(header["variables"]):
                    w.writerow([h + 1, name, repr(float(y[h, j]))])
        if as_dir:
            outputs = ["forecast.csv"]
            if plot:
                from .plotting import plot_forecast

                plot_forecast(target, out / "forecast.png")
                outputs.append("forecast.png")
            args = {"checkpoint": str(Path(checkpoint).resolve()), "input_csv": str(Path(input_csv).resolve())}
            write_manifest(out, "forecast", args, None, seed, outputs)
    return target


GRID_AXES = {
    "encoder": ("FC", "CNN", "LT"),
    "score_model": ("FC", "CNN"),
    "dual": ("ON", "OFF"),
    "sampler": ("AS", "RD", "PF"),
}


def parse_grid(spec: str | None) -> list[dict]:
    """``"encoder=FC,LT;dual=ON"`` -> grid cells; omitted axes take every value (sampler: AS)."""
    axes = {k: list(v) for k, v in GRID_AXES.items()}
    axes["sampler"] = ["AS"]
    if spec:
        for part in filter(None, (p.strip() for p in spec.split(";"))):
            key, _, vals = part.partition("=")
            key = key.strip()
            if key not in GRID_AXES:
                raise ConfigError(f"grid.{key}", "unknown grid axis")
            chosen = [v.strip() for v in vals.split(",") if v.strip()]
            bad = [v for v in chosen if v not in GRID_AXES[key]]
            if bad or not chosen:
                raise ConfigError(f"grid.{key}", f"values must come from {GRID_AXES[key]}, got {chosen}")
            axes[key] = chosen
    return [
        {"encoder": e, "score_model": s, "dual": d == "ON", "sampler": a}
        for e in axes["encoder"]
        for s in axes["score_model"]
        for d in axes["dual"]
        for a in axes["sampler"]
    ]


def cmd_ablate(cfg: dict, grid: str | None = None, seeds=None, sweep_best=("RD", "PF"), out_dir=None,
               plot: bool = False, log=None) -> Path:
    out = _resolve_out(cfg, out_dir)
    cells = parse_grid(grid)
    seeds = [cfg["seed"]] if not seeds else [int(s) for s in seeds]
    for s in sweep_best:
        if s not in GRID_AXES["sampler"]:
            raise ConfigError("sweep_best", f"unknown sampler {s!r}")
    prep = prepare(cfg["dataset"])
    base = model_config(cfg, prep.series)
    name = "synthetic" if cfg["dataset"]["schema"] == "synthetic" else Path(cfg["dataset"]["path"]).stem
    test = prep.windows["test"]
    if not test:
        raise DataError("test split holds no complete window")
    with locked(out):
        rows = ablate(prep.windows["train"], test, cells, base, train_config(cfg), seeds, name,
                      tuple(sweep_best), log=log)
        write_ablation_csv(out / "ablation.csv", rows)
        (out / "ablation.md").write_text(ablation_markdown(rows))
        outputs = ["ablation.csv", "ablation.md"]
        if plot:
            from .plotting import plot_ablation

            plot_ablation(out / "ablation.csv", out / "ablation.png")
            outputs.append("ablation.png")
        args = {"grid": grid, "seeds": seeds, "sweep_best": list(sweep_best)}
        write_manifest(out, "ablate", args, dict(cfg, output_dir=str(out)), cfg["seed"], outputs)
    return out / "ablation.csv"


def cmd_replay(manifest_path, out_dir=None):
    man = json.loads(Path(manifest_path).read_text())
    cmd, args = man["command"], man["args"]
    if cmd == "train":
        return cmd_train(man["config"], out_dir)
    if cmd == "ablate":
        return cmd_ablate(man["config"], args["grid"], args["seeds"], tuple(args["sweep_best"]), out_dir)
    if cmd == "evaluate":
        return cmd_evaluate(args["checkpoint"], args["split"], args["data_path"], man["seed"], out_dir)
    if cmd == "forecast":
        return cmd_forecast(args["checkpoint"], args["input_csv"], out_dir, man["seed"])
    raise ConfigError("command", f"cannot replay {cmd!r}")


def cmd_synth(out_csv, n: int = 4, T: int = 512, noise_std: float = 0.1, seed: int = 0) -> Path:
    series = synth_sinusoids(Rng(seed), n, T, noise_std)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + series.names)
        for t, row in zip(series.timestamps, series.values):
            w.writerow([t] + [repr(float(v)) for v in row])
    return Path(out_csv)


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dualvdt",
        description="DualVDT time-series forecaster.",
        epilog=f"Seeds default to ${configmod.SEED_ENV} when the config omits 'seed'. "
        "Exit codes: 0 ok, 1 runtime failure, 2 config/validation failure.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a YAML run config")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--seed", type=int)
    t.add_argument("--plot", action="store_true", help="also render loss.png")

    e = sub.add_parser("evaluate", help="MSE/MAE of a checkpoint on a data split")
    e.add_argument("checkpoint")
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--data", help="dataset CSV (defaults to the one recorded in the checkpoint)")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="directory for metrics.json and a manifest")

    f = sub.add_parser("forecast", help="forecast the horizon after the last lookback rows of a CSV")
    f.add_argument("checkpoint")
    f.add_argument("input")
    f.add_argument("--out", help="output directory or .csv path (default ./forecast.csv)")
    f.add_argument("--seed", type=int)
    f.add_argument("--plot", action="store_true")

    a = sub.add_parser("ablate", help="train and score an encoder/score/dual/sampler grid")
    a.add_argument("config")
    a.add_argument("--grid", help='e.g. "encoder=FC,LT;score_model=FC;dual=ON,OFF;sampler=AS"')
    a.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    a.add_argument("--sweep-best", default="RD,PF", help="samplers tried at the best cell ('' to skip)")
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.add_argument("--plot", action="store_true")

    r = sub.add_parser("report", help="render figures next to the CSVs in a run directory")
    r.add_argument("run_dir")

    rp = sub.add_parser("replay", help="rerun a command from its manifest.json")
    rp.add_argument("manifest")
    rp.add_argument("--out")

    s = sub.add_parser("synth", help="write the synthetic sinusoid dataset as a generic CSV")
    s.add_argument("out")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--T", type=int, default=512)
    s.add_argument("--noise-std", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    return p


def _load_cfg(path, seed):
    cfg = configmod.load(path)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _print_epoch(epoch, rep):
    print(f"epoch {epoch:3d}  total {rep.total:.4f}  recon {rep.recon:.4f}  score {rep.score:.4f}  kl {rep.kl:.4f}",
          file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        if args.command == "train":
            res = cmd_train(_load_cfg(args.config, args.seed), args.out, args.plot, log=_print_epoch)
            print(res["checkpoint"])
        elif args.command == "evaluate":
            print(json.dumps(cmd_evaluate(args.checkpoint, args.split, args.data, args.seed, args.out),
                             indent=2, sort_keys=True))
        elif args.command == "forecast":
            print(cmd_forecast(args.checkpoint, args.input, args.out, args.seed, args.plot))
        elif args.command == "ablate":
            seeds = [s for s in (args.seeds or "").split(",") if s.strip()]
            sweep = tuple(s.strip() for s in args.sweep_best.split(",") if s.strip())
            print(cmd_ablate(_load_cfg(args.config, args.seed), args.grid, seeds, sweep, args.out, args.plot,
                             log=lambda row: print(row, file=sys.stderr)))
        elif args.command == "report":
            from .plotting import render_run

            made = render_run(args.run_dir)
            if not made:
                print(f"no known CSV outputs in {args.run_dir}", file=sys.stderr)
                return 1
            for path in made:
                print(path)
        elif args.command == "replay":
            res = cmd_replay(args.manifest, args.out)
            if isinstance(res, dict) and "checkpoint" in res:
                res = res["checkpoint"]
            print(json.dumps(res, indent=2, sort_keys=True) if isinstance(res, dict) else res)
        elif args.command == "synth":
            print(cmd_synth(args.out, args.n, args.T, args.noise_std, args.seed))
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
