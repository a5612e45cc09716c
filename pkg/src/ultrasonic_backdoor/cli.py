"""Command-line entry point: ``ultrabd <subcommand> [options]``.

Options resolve as defaults < ``--config`` JSON file < explicit flags, and the
resolved set is written to ``<out>/config.json`` on every run.  A config file
may hold flat keys or a section named after the subcommand.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .audio import AudioClip, read_wav, resample, write_wav
from .channel import ChannelConfig, simulate_attack, write_simulation_csv
from .classifier import (
    Architecture,
    ModelConfig,
    TrainConfig,
    evaluate_accuracy,
    load_model,
    save_model,
    train,
)
from .dataset import (
    MANIFEST_COLUMNS,
    TEST,
    TRAIN,
    VAL,
    FeatureExtractor,
    PoisonConfig,
    open_dataset,
    poison,
    poison_rate,
    save_dataset_index,
    stamp_test_set,
    trigger_to_dict,
    write_manifest,
)
from .errors import BackdoorError
from .evaluation import SweepSpec, accuracy_drop, attack_success_rate, run_sweep
from .features import MfccConfig
from .minidata import generate_mini_dataset
from .trigger import Placement, TriggerSpec, stamp

log = logging.getLogger("ultrasonic_backdoor")

GLOBAL_DEFAULTS = {"seed": None, "out": "out"}  # seed None: 0, or the grid's own master_seed

TRIGGER_DEFAULTS = {
    "freq": 21_000.0,
    "rate": 44_100,
    "duration_ms": 20.0,
    "amplitude": 0.1,
    "placement": "middle",
    "pulses": 1,
    "ramp_ms": 0.0,
}

DEFAULTS = {
    "synth": {**TRIGGER_DEFAULTS, "carrier": None, "resample_carrier": False, "output": "trigger.wav"},
    "poison": {**TRIGGER_DEFAULTS, "data": None, "target_class": "off", "n_poison": 0, "poison_rate": None,
               "min_duration": 1.0, "write_wavs": True},
    "gen-mini-dataset": {"n_per_class": 100, "n_short_per_class": 0},
    "train": {"data": None, "model": "small_conv", "epochs": 300, "patience": 20, "batch_size": 64,
              "lr": 1e-4, "l2": 1e-4, "min_duration": 1.0, "cache_dir": None},
    "eval": {**TRIGGER_DEFAULTS, "model": None, "data": None, "target_class": "off", "baseline": None,
             "baseline_model": None, "min_duration": 1.0, "cache_dir": None},
    "sweep": {"grid": None, "repeats": 5, "workers": 1, "cache_dir": None},
    "simulate": {**TRIGGER_DEFAULTS, "duration_ms": 1000.0, "model": None, "data": None, "target_class": "off",
                 "distances": "0,0.5,1,1.5", "trials": 15, "ref_level_db": -43.0, "rolloff": "free_field",
                 "db_per_m": 0.0, "ref_distance": 0.1, "speech_level_db": -20.0, "noise_floor_db": -90.0,
                 "defense_cutoff": None, "min_duration": 1.0},
}


def _trigger_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("trigger")
    g.add_argument("--freq", type=float, help="trigger frequency in Hz (21000)")
    g.add_argument("--rate", type=int, help="sample rate in Hz (44100)")
    g.add_argument("--duration-ms", type=float, help="total trigger duration in ms")
    g.add_argument("--amplitude", type=float, help="peak amplitude, fraction of full scale (0.1)")
    g.add_argument("--placement", choices=[p.value for p in Placement], help="continuous trigger position")
    g.add_argument("--pulses", type=int, help="1 = continuous, n > 1 = n evenly spread pulses")
    g.add_argument("--ramp-ms", type=float, help="raised-cosine ramp at each pulse edge (0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ultrabd", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (0)")
    common.add_argument("--out", help="output directory (out)")
    common.add_argument("--config", help="JSON file with option values; flags override it")
    common.add_argument("--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a trigger, bare or stamped on a carrier")
    _trigger_flags(p)
    p.add_argument("--carrier", help="WAV to stamp the trigger into")
    p.add_argument("--resample-carrier", action=argparse.BooleanOptionalAction,
                   help="up-sample the carrier to --rate instead of rejecting a rate mismatch")
    p.add_argument("--output", help="WAV file name inside --out (trigger.wav)")

    p = sub.add_parser("poison", parents=[common], help="split a dataset and poison its training split")
    _trigger_flags(p)
    p.add_argument("--data", help="dataset root (class-per-directory)")
    p.add_argument("--target-class")
    p.add_argument("--n-poison", type=int)
    p.add_argument("--poison-rate", type=float, help="fraction of the train split; overrides --n-poison")
    p.add_argument("--min-duration", type=float, help="drop clips shorter than this many seconds (1.0)")
    p.add_argument("--write-wavs", action=argparse.BooleanOptionalAction,
                   help="also write stamped training clips as WAV (default on)")

    p = sub.add_parser("gen-mini-dataset", parents=[common], help="synthesise the miniature 10-word dataset")
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--n-short-per-class", type=int)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--data", help="dataset root or poisoned dataset directory")
    p.add_argument("--model", choices=[a.value for a in Architecture])
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--min-duration", type=float)
    p.add_argument("--cache-dir")

    p = sub.add_parser("eval", parents=[common], help="clean accuracy and attack success rate of a model")
    _trigger_flags(p)
    p.add_argument("--model", help="model checkpoint")
    p.add_argument("--data")
    p.add_argument("--target-class")
    p.add_argument("--baseline", type=float, help="clean-model accuracy for the drop column")
    p.add_argument("--baseline-model", help="clean-model checkpoint; its accuracy becomes the baseline")
    p.add_argument("--min-duration", type=float)
    p.add_argument("--cache-dir")

    p = sub.add_parser("sweep", parents=[common], help="run an experiment grid from JSON")
    p.add_argument("--grid", help="sweep spec JSON")
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--cache-dir")

    p = sub.add_parser("simulate", parents=[common], help="over-the-air playback simulation")
    _trigger_flags(p)
    p.add_argument("--model")
    p.add_argument("--data", help="dataset whose test split supplies interfering speech")
    p.add_argument("--target-class")
    p.add_argument("--distances", help="comma-separated metres")
    p.add_argument("--trials", type=int)
    p.add_argument("--ref-level-db", type=float)
    p.add_argument("--rolloff", choices=["free_field", "linear_db"])
    p.add_argument("--db-per-m", type=float)
    p.add_argument("--ref-distance", type=float)
    p.add_argument("--speech-level-db", type=float)
    p.add_argument("--noise-floor-db", type=float)
    p.add_argument("--defense-cutoff", type=float, help="low-pass recordings at this frequency first")
    p.add_argument("--min-duration", type=float)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    cmd = args.command
    file_cfg: dict = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        file_cfg = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        file_cfg.update(raw.get(cmd, {}))
    file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    cfg = {}
    for key, default in {**GLOBAL_DEFAULTS, **DEFAULTS[cmd]}.items():
        flag = getattr(args, key, None)
        cfg[key] = flag if flag is not None else file_cfg.get(key, default)
    cfg["command"] = cmd
    if cmd != "sweep" and cfg["seed"] is None:
        cfg["seed"] = 0
    return cfg


def _trigger(cfg: dict) -> TriggerSpec:
    pulses = int(cfg["pulses"])
    return TriggerSpec(
        frequency=float(cfg["freq"]),
        sample_rate=int(cfg["rate"]),
        duration_ms=float(cfg["duration_ms"]),
        amplitude=float(cfg["amplitude"]),
        placement=Placement(cfg["placement"]),
        continuous=pulses <= 1,
        n_pulses=max(pulses, 1),
        ramp_ms=float(cfg["ramp_ms"]),
    )


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise BackdoorError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _dataset(cfg: dict):
    return open_dataset(cfg["data"], seed=int(cfg["seed"]), min_duration_s=float(cfg["min_duration"]))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg: dict, out: Path) -> None:
    spec = _trigger(cfg)
    target = out / cfg["output"]
    if cfg["carrier"]:
        carrier = read_wav(cfg["carrier"])
        if carrier.sample_rate != spec.sample_rate and cfg["resample_carrier"]:
            carrier = resample(carrier, spec.sample_rate)
        write_wav(stamp(carrier, spec), target)
        with open(out / "manifest.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerow({
                "original_path": cfg["carrier"],
                "original_label": "",
                "new_label": "",
                "trigger_duration_ms": f"{spec.duration_ms:g}",
                "placement": spec.placement_label,
                "continuity": spec.continuity_label,
            })
    else:
        n = spec.pulse_samples * spec.pulse_count
        if spec.continuous:
            clip = AudioClip(np.zeros(n), spec.sample_rate)
            clip = stamp(clip, replace(spec, placement=Placement.BEGINNING))
        else:
            # spread the pulses over one second, the carrier length they are defined for
            clip = stamp(AudioClip.silence(spec.sample_rate, spec.sample_rate), spec)
        write_wav(clip, target)
    print(target)


def cmd_poison(cfg: dict, out: Path) -> None:
    _require(cfg, "data", "target_class")
    ds = _dataset(cfg)
    n_train = len(ds.indices(TRAIN))
    n_poison = int(round(cfg["poison_rate"] * n_train)) if cfg["poison_rate"] is not None else int(cfg["n_poison"])
    spec = _trigger(cfg)
    pds = poison(ds, PoisonConfig(n_poison, cfg["target_class"], spec))
    save_dataset_index(pds, out / "dataset.json")
    n_rows = write_manifest(pds, out / "manifest.csv")
    if cfg["write_wavs"] and n_poison:
        wav_dir = out / "poisoned"
        wav_dir.mkdir(exist_ok=True)
        for k, i in enumerate(pds.indices(TRAIN)[:n_poison]):
            write_wav(pds.clip(i), wav_dir / f"{k:05d}_{Path(pds.items[i].path).stem}.wav")
    summary = {"n_poison": n_poison, "poison_rate": poison_rate(ds, n_poison), "manifest_rows": n_rows,
               "trigger": trigger_to_dict(spec), "skipped": list(ds.skipped)}
    _write_json(out / "poison.json", summary)
    print(f"poisoned {n_poison}/{n_train} training items -> {out / 'dataset.json'}")


def cmd_gen_mini_dataset(cfg: dict, out: Path) -> None:
    generate_mini_dataset(out, n_per_class=int(cfg["n_per_class"]), seed=int(cfg["seed"]),
                          n_short_per_class=int(cfg["n_short_per_class"]))
    print(out)


def cmd_train(cfg: dict, out: Path) -> None:
    _require(cfg, "data")
    ds = _dataset(cfg)
    mcfg_ = MfccConfig()
    fx = FeatureExtractor(mcfg_, cfg["cache_dir"])
    xtr, ytr = fx.split(ds, TRAIN)
    xv, yv = fx.split(ds, VAL)
    mcfg = ModelConfig(architecture=cfg["model"], n_classes=len(ds.classes), input_shape=xtr.shape[1:],
                       l2_lambda=float(cfg["l2"]))
    tcfg = TrainConfig(learning_rate=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                       max_epochs=int(cfg["epochs"]), early_stop_patience=int(cfg["patience"]),
                       seed=int(cfg["seed"]))
    model = train(xtr, ytr, xv, yv, mcfg, tcfg,
                  callback=lambda e, r: log.info("epoch %d train %.4f val %.4f acc %.4f",
                                                 e, r.train_loss, r.val_loss, r.val_accuracy))
    save_model(model, out / "model.ckpt")
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for e, r in enumerate(model.history):
            w.writerow([e, repr(r.train_loss), repr(r.val_loss), repr(r.val_accuracy)])
    xte, yte = fx.split(ds, TEST)
    summary = {"best_epoch": model.best_epoch, "epochs_run": model.epochs_run,
               "trainable_parameters": model.n_trainable(),
               "test_accuracy": evaluate_accuracy(model, xte, yte) if len(yte) else None}
    _write_json(out / "train.json", summary)
    print(f"{out / 'model.ckpt'}: best epoch {model.best_epoch}, test accuracy {summary['test_accuracy']}")


def cmd_eval(cfg: dict, out: Path) -> None:
    _require(cfg, "model", "data", "target_class")
    model = load_model(cfg["model"])
    ds = _dataset(cfg)
    fx = FeatureExtractor(MfccConfig(), cfg["cache_dir"])
    clean = replace(ds, items=tuple(replace(it, trigger=None, label=it.original_label) for it in ds.items))
    xte, yte = fx.split(clean, TEST)
    acc = evaluate_accuracy(model, xte, yte)
    spec = _trigger(cfg)
    xs, ys = fx.split(stamp_test_set(clean, spec), TEST)
    asrt_all, asrt_excl = attack_success_rate(model, xs, ys, ds.class_index(cfg["target_class"]))
    baseline = cfg["baseline"]
    if cfg["baseline_model"]:
        baseline = evaluate_accuracy(load_model(cfg["baseline_model"]), xte, yte)
    result = {
        "clean_accuracy": acc,
        "asrt_all": asrt_all,
        "asrt_excl": asrt_excl,
        "chance": 1.0 / len(ds.classes),
        "clean_baseline": baseline,
        "clean_accuracy_drop": None if baseline is None else accuracy_drop(baseline, acc),
        "trigger": trigger_to_dict(spec),
    }
    _write_json(out / "eval.json", result)
    print(json.dumps({k: v for k, v in result.items() if k != "trigger"}))


def cmd_sweep(cfg: dict, out: Path) -> None:
    _require(cfg, "grid")
    spec = SweepSpec.from_json(cfg["grid"])
    if cfg["seed"] is not None:
        spec = replace(spec, master_seed=int(cfg["seed"]))
    reports = run_sweep(spec, int(cfg["repeats"]), out, workers=int(cfg["workers"]), cache_dir=cfg["cache_dir"],
                        progress=log.info)
    print(f"{len(reports)} reports -> {out / 'reports.csv'}")


def cmd_simulate(cfg: dict, out: Path) -> None:
    _require(cfg, "model", "data", "target_class")
    model = load_model(cfg["model"])
    ds = _dataset(cfg)
    ch = ChannelConfig(
        distances_m=tuple(float(d) for d in str(cfg["distances"]).split(",") if d.strip()),
        ref_level_db=cfg["ref_level_db"],
        rolloff=cfg["rolloff"],
        db_per_m=float(cfg["db_per_m"]),
        ref_distance_m=float(cfg["ref_distance"]),
        speech_level_db=cfg["speech_level_db"],
        noise_floor_db=cfg["noise_floor_db"],
    )
    rows = simulate_attack(model, ch, int(cfg["trials"]), ds, _trigger(cfg), cfg["target_class"],
                           defense_cutoff=cfg["defense_cutoff"], seed=int(cfg["seed"]))
    write_simulation_csv(rows, out / "simulation.csv")
    for r in rows:
        print(f"{r['distance_m']:>5g} m  {r['condition']:<8} asrt={r['asrt']:.3f}  level={r['trigger_level_db']:.1f} dB")


COMMANDS = {
    "synth": cmd_synth,
    "poison": cmd_poison,
    "gen-mini-dataset": cmd_gen_mini_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
}

def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", cfg)
        COMMANDS[args.command](cfg, out)
    except (BackdoorError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
