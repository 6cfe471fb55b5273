"""``disttse`` command line: gen-rir, gen-data, train, finetune, eval, sweep, plot.

Every command reads one YAML config (``--config``), applies ``--set key=value``
overrides (dotted keys address nested sections), writes its outputs under
``--out`` and records a ``run_manifest.json`` there.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import dataset as ds
from .corpus import DATA_ROOT_ENV, SyntheticCorpus, WavCorpus
from .rir import GeometryError, RirStore, load_real_manifest, simulate_rir

log = logging.getLogger("disttse")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


# --- config handling -----------------------------------------------------

def _parse_value(text):
    return yaml.safe_load(text)


def apply_overrides(cfg: dict, pairs) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(value)
    return cfg


def load_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            with open(args.config) as f:
                cfg = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.setdefault("dataset", {})["seed"] = args.seed
        cfg.setdefault("train", {})["seed"] = args.seed
    return cfg


def dataset_spec(cfg) -> ds.DatasetSpec:
    try:
        return ds.DatasetSpec.from_dict(cfg.get("dataset", {}))
    except (ds.SpecError, GeometryError, TypeError) as err:
        raise ConfigError(f"dataset spec: {err}") from err


def make_corpus(cfg):
    c = dict(cfg.get("corpus", {}))
    kind = c.pop("type", "wav" if c.get("root") else "synthetic")
    try:
        if kind == "synthetic":
            return SyntheticCorpus(**c)
        if kind == "wav":
            return WavCorpus(**c)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"corpus: {err} (set corpus.root or {DATA_ROOT_ENV})") from err
    raise ConfigError(f"unknown corpus type {kind!r}")


def _stamp():
    stamp = {"version": __version__, "git": None}
    try:
        proc = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                              capture_output=True, text=True, timeout=5)
        if proc.returncode == 0:
            stamp["git"] = proc.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


def write_run_manifest(out: Path, args, cfg):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": args.config,
        "config": cfg,
        "seed": args.seed,
        "version": _stamp(),
        "out": str(out),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


# --- commands -----------------------------------------------------------

def _rir_job(args):
    spec_dict, idx = args
    spec = ds.DatasetSpec.from_dict(spec_dict)
    return _simulate_pool_rir(spec, idx)


def _simulate_pool_rir(spec, idx):
    """RIR ``idx`` of the recipe's pool, or None when placement is rejected."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 55, idx]))
    if spec.recipe == "D1":
        group, n_groups, split_n, split_i = 0, 1, spec.n_rirs, idx
    elif spec.recipe == "D2":
        group, n_groups = divmod(idx, spec.rirs_per_mic)[0], spec.n_mics
        split_n, split_i = spec.n_mics * spec.rirs_per_mic, idx
    else:
        group, n_groups = divmod(idx, spec.speakers_per_room)[0], spec.n_rooms
        split_n, split_i = n_groups, group  # D3 splits by room
    room, mic = ds.pool_room(spec, group)
    try:
        src = ds.place_speaker(rng, room, mic, spec.d_max)
    except GeometryError:
        return None
    r = simulate_rir(room, src, mic, rng=rng, fs=spec.sample_rate, rir_id=f"{spec.recipe}_{idx:07d}")
    r.meta.update(room_id=f"room{group:05d}", mic_id=f"mic{group:05d}")
    return r, ds.split_of(split_i, split_n, spec.splits)


def cmd_gen_rir(args, cfg):
    spec = dataset_spec(cfg)
    out = Path(args.out)
    if spec.recipe == "D4":
        real = cfg.get("real_manifest")
        if not real:
            raise ConfigError("D4 needs real_manifest: a JSON-lines file of measured RIRs")
        pairs = load_real_manifest(real)
        counts = {s: sum(1 for _, sp in pairs if sp == s) for s in ("train", "valid", "test")}
    else:
        total = {"D1": spec.n_rirs, "D2": spec.n_mics * spec.rirs_per_mic,
                 "D3": spec.n_rooms * spec.speakers_per_room}[spec.recipe]
        jobs = [(spec.to_dict(), i) for i in range(total)]
        if args.workers > 1:
            with ProcessPoolExecutor(args.workers) as ex:
                results = list(ex.map(_rir_job, jobs, chunksize=16))
        else:
            results = [_rir_job(j) for j in jobs]
        pairs = [r for r in results if r is not None]
        counts = {s: sum(1 for _, sp in pairs if sp == s) for s in ("train", "valid", "test")}
        counts["requested"] = total
        counts["rejected"] = total - len(pairs)
    RirStore.write(out, pairs)
    counts["written"] = len(pairs)
    (out / "counts.json").write_text(json.dumps(counts, indent=2, sort_keys=True))
    print(json.dumps(counts, sort_keys=True))


def cmd_gen_data(args, cfg):
    spec = dataset_spec(cfg)
    corpus = make_corpus(cfg)
    gen_cfg = cfg.get("generate", {})
    gen = ds.ExampleGenerator(spec, corpus)
    out = Path(args.out)
    written = {}
    for split, n in gen_cfg.get("counts", {"train": 100, "valid": 10, "test": 20}).items():
        reps = gen_cfg.get("test_reps", 5) if split == "test" else 1
        path = ds.write_examples(gen, out, split, int(n), reps=reps, workers=args.workers,
                                 presence_ratio=gen_cfg.get("presence_ratio", 0.9))
        written[split] = str(path)
    print(json.dumps(written, sort_keys=True))


def _train_cfgs(cfg):
    from .model import ModelConfig
    from .training import TrainConfig
    try:
        return ModelConfig(**cfg.get("model", {})), TrainConfig(**cfg.get("train", {}))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"model/train config: {err}") from err


def cmd_train(args, cfg):
    from .training import train
    spec = dataset_spec(cfg)
    model_cfg, train_cfg = _train_cfgs(cfg)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    train_cfg.workers = args.workers
    history = train(model_cfg, spec, train_cfg, make_corpus(cfg), args.out)
    print(json.dumps(history[-1] if history else {}))


def cmd_finetune(args, cfg):
    from .training import CheckpointError, finetune
    spec = dataset_spec(cfg)
    _, train_cfg = _train_cfgs(cfg)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    ckpt = args.checkpoint or cfg.get("checkpoint")
    if not ckpt:
        raise ConfigError("finetune needs --checkpoint")
    expected = None
    if "model" in cfg:
        expected, _ = _train_cfgs(cfg)
    try:
        history = finetune(ckpt, spec, train_cfg, make_corpus(cfg), args.out, model_cfg=expected)
    except CheckpointError as err:
        raise ConfigError(str(err)) from err
    print(json.dumps(history[-1] if history else {}))


def _load_extractor(name):
    from .evaluate import NullModel, OracleModel, PassthroughModel, TorchExtractor
    from .training import load_model
    stubs = {"oracle": OracleModel, "null": NullModel, "passthrough": PassthroughModel}
    if name in stubs:
        return stubs[name]()
    if not Path(name).exists():
        raise ConfigError(f"model must be a checkpoint path or one of {sorted(stubs)}, got {name!r}")
    return TorchExtractor(load_model(name))


def cmd_eval(args, cfg):
    from .evaluate import ExternalPesq, evaluate, reps_from_generator, reps_from_manifest
    model = _load_extractor(args.model)
    ev = cfg.get("eval", {})
    if args.manifest:
        reps = reps_from_manifest(args.manifest)
    else:
        gen = ds.ExampleGenerator(dataset_spec(cfg), make_corpus(cfg))
        reps = reps_from_generator(gen, ev.get("split", "test"), int(ev.get("n", 50)),
                                   int(ev.get("reps", 5)), float(ev.get("presence_ratio", 0.5)))
    pesq = ExternalPesq(ev["pesq_command"]) if ev.get("pesq_command") else None
    report = evaluate(model, reps, pesq=pesq, meta={"model": args.model})
    out = Path(args.out)
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    print(json.dumps(report.aggregate))


def cmd_sweep(args, cfg):
    from .audio import load_wav
    from .sweep import SweepConfig, detect_peaks, sweep
    model = _load_extractor(args.model)
    if hasattr(model, "for_example"):
        raise ConfigError("the oracle model needs ground truth; sweep takes a checkpoint, null or passthrough")
    sw = dict(cfg.get("sweep", {}))
    try:
        scfg = SweepConfig(**sw) if "d_min" in sw else SweepConfig.for_range(sw.pop("d_max", 5.0), **sw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"sweep config: {err}") from err
    curve = sweep(model, load_wav(args.mixture), scfg)
    peaks = detect_peaks(curve, scfg)
    out = Path(args.out)
    curve.save_csv(out / "sweep.csv")
    (out / "estimates.json").write_text(json.dumps(
        {"peaks": [{"distance": d, "score": s} for d, s in peaks],
         "estimate": peaks[0][0] if peaks else None}, indent=2))
    from .plots import plot_sweep
    plot_sweep(curve, peaks, out / "sweep.png", truths=args.truth)
    print(json.dumps({"estimate": peaks[0][0] if peaks else None, "n_peaks": len(peaks)}))


def cmd_plot(args, cfg):
    from .plots import plot_sweep_csv, plot_training_log
    out = Path(args.out)
    made = []
    for path in args.inputs:
        p = Path(path)
        if p.suffix == ".csv":
            made.append(plot_sweep_csv(p, out / (p.stem + ".png")))
        elif p.suffix == ".jsonl":
            made.append(plot_training_log(p, out / (p.stem + ".png")))
        else:
            raise ConfigError(f"don't know how to plot {p} (expected sweep .csv or training .jsonl)")
    print(json.dumps([str(m) for m in made]))


COMMANDS = {
    "gen-rir": cmd_gen_rir, "gen-data": cmd_gen_data, "train": cmd_train,
    "finetune": cmd_finetune, "eval": cmd_eval, "sweep": cmd_sweep, "plot": cmd_plot,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="disttse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-rir", parents=[common], help="simulate or ingest a RIR store")
    sub.add_parser("gen-data", parents=[common], help="materialise example manifests")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint (D4)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint")
    p = sub.add_parser("eval", parents=[common], help="evaluate SDR/SDRi/iSDR")
    p.add_argument("--model", required=True, help="checkpoint path or oracle|null|passthrough")
    p.add_argument("--manifest", help="materialised examples.jsonl (default: generate from config)")
    p = sub.add_parser("sweep", parents=[common], help="estimate speaker distances in a mixture")
    p.add_argument("--model", required=True)
    p.add_argument("--mixture", required=True, help="mixture WAV")
    p.add_argument("--truth", type=float, nargs="*", help="true distances to mark on the plot")
    p = sub.add_parser("plot", parents=[common], help="plot sweep CSVs / training logs")
    p.add_argument("inputs", nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = Path(args.out)
        write_run_manifest(out, args, cfg)
        COMMANDS[args.command](args, cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - uniform exit code for runtime failures
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
