"""Command-line pipelines: synth-data, extract, train, evaluate, metrics, param-count, grad-check.

Settings resolve as command-line flags > ``--config`` file > built-in
defaults.  The config file holds ``key = value`` lines whose keys are field
names of the relevant config objects (``epochs``, ``lr``, ``stages``,
``f_min``, ...); values are Python literals or bare strings.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import ast
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .blocks import ARCH_TO_GATE, BackboneConfig, build_backbone, expected_gate_params, model_param_count, param_breakdown
from .corpus import SynthConfig, load_checkpoint, parse_protocol, save_checkpoint, synth_corpus
from .features import CqtConfig, extract_features, load_features, read_wav, save_features
from .metrics import (
    ScoreRecord,
    accuracy_at_eer,
    eer,
    min_tdcf,
    read_scores,
    read_tdcf_params,
    write_report,
    write_scores,
)
from .training import AdamConfig, TrainConfig, label_index, score_batch, train, write_train_log

ARCHS = tuple(ARCH_TO_GATE)


class UsageError(Exception):
    pass


# --- configuration ---------------------------------------------------------


def read_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            try:
                values[key] = ast.literal_eval(raw)
            except (ValueError, SyntaxError):
                values[key] = raw
    return values


def resolve(cls, file_values: dict, flag_values: dict, base=None):
    """Build ``cls`` from defaults (or ``base``), then file values, then flags."""
    names = {f.name for f in fields(cls)}
    obj = base if base is not None else cls()
    updates = {k: v for k, v in file_values.items() if k in names}
    updates.update({k: v for k, v in flag_values.items() if k in names and v is not None})
    try:
        return replace(obj, **updates)
    except TypeError as e:
        raise UsageError(str(e)) from e


def _check_keys(file_values: dict, *classes) -> None:
    known = set()
    for cls in classes:
        known |= {f.name for f in fields(cls)}
    unknown = sorted(set(file_values) - known - {"arch"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")


def _load_config(args, *classes) -> dict:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    _check_keys(values, *classes)
    return values


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def write_manifest(path, command: str, argv, config: dict, seed, started: float) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": _jsonable(config),
        "seed": seed,
        "version": __version__,
        "backend": kernels.BACKEND,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def worker_count(requested) -> int:
    n = requested if requested else (os.cpu_count() or 1)
    cap = os.environ.get("GATED_RES2NET_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, int(n))


# --- commands --------------------------------------------------------------


def cmd_synth_data(args, argv) -> int:
    started = time.time()
    values = _load_config(args, SynthConfig)
    cfg = resolve(SynthConfig, values, {"seed": args.seed, "workers": worker_count(args.workers)})
    cfg.validate()
    out = Path(args.out)
    splits = synth_corpus(cfg, out)
    counts = {k: len(v) for k, v in splits.items()}
    resolved = cfg.to_dict()
    resolved.pop("workers")  # output does not depend on it
    write_manifest(out / "manifest.json", "synth-data", argv, resolved, cfg.seed, started)
    print(f"wrote {sum(counts.values())} utterances to {out} ({counts})")
    return 0


def _extract_one(job):
    wav, dest, cfg = job
    save_features(dest, extract_features(read_wav(wav), cfg))
    return dest


def cmd_extract(args, argv) -> int:
    started = time.time()
    values = _load_config(args, CqtConfig)
    cfg = resolve(CqtConfig, values, {"f_min": args.fmin, "hop": args.hop})
    list_path = Path(args.wav_list)
    root = list_path.parent
    wavs = []
    with open(list_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                p = Path(line)
                wavs.append(p if p.is_absolute() else root / p)
    if not wavs:
        raise RuntimeError(f"{list_path}: no audio files listed")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stems = [w.stem for w in wavs]
    if len(set(stems)) != len(stems):
        raise RuntimeError("audio file names must be unique")
    jobs = [(str(w), str(out / f"{w.stem}.feat"), cfg) for w in wavs]
    # validate once up front so a bad config fails before any work
    cfg.validate(read_wav(jobs[0][0]).sample_rate)
    workers = worker_count(args.workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_extract_one, jobs, chunksize=4))
    else:
        for job in jobs:
            _extract_one(job)
    write_manifest(out / "manifest.json", "extract", argv, asdict(cfg), None, started)
    print(f"extracted {len(jobs)} feature files to {out}")
    return 0


def _load_split(features_dir: Path, protocol) -> tuple:
    trials = parse_protocol(protocol)
    if not trials:
        raise RuntimeError(f"{protocol}: empty protocol")
    x = np.stack([load_features(features_dir / f"{t.trial_id}.feat") for t in trials])
    y = np.array([label_index(t.label) for t in trials], dtype=np.int64)
    return trials, x, y


def cmd_train(args, argv) -> int:
    started = time.time()
    values = _load_config(args, BackboneConfig, TrainConfig, AdamConfig)
    arch = args.arch or values.get("arch") or "res2net"
    if arch not in ARCHS:
        raise UsageError(f"unknown architecture {arch!r}")
    backbone = resolve(BackboneConfig, values, {}).with_arch(arch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = resolve(TrainConfig, values, {"epochs": args.epochs, "seed": args.seed, "batch_size": args.batch_size})
    ac = resolve(AdamConfig, values, {"lr": args.lr})
    tc = replace(tc, checkpoint_dir=None)
    ac.validate()
    feats = Path(args.features)
    protos = Path(args.protocols)
    _, x_tr, y_tr = _load_split(feats, protos / "train.txt")
    _, x_dev, y_dev = _load_split(feats, protos / "dev.txt")
    if tuple(x_tr.shape[1:]) != backbone.input_shape:
        backbone = replace(backbone, input_shape=tuple(x_tr.shape[1:]))
    model = build_backbone(backbone, seed=tc.seed)

    def report(epoch, loss, d):
        print(f"epoch {epoch:3d}  train_loss {loss:.5f}  dev_eer {d:.4f}", flush=True)

    result = train(model, (x_tr, y_tr), (x_dev, y_dev), tc, ac, log_path=out / "train_log.csv", on_epoch=report)
    write_train_log(out / "train_log.csv", result.log)
    save_checkpoint(model, out / "best.ckpt", None,
                    {"epoch": result.best_epoch, "dev_eer": result.best_dev_eer, "arch": arch})
    config = {"backbone": backbone.to_dict(), "train": asdict(tc), "adam": asdict(ac), "arch": arch}
    write_manifest(out / "manifest.json", "train", argv, config, tc.seed, started)
    print(f"best epoch {result.best_epoch} dev EER {result.best_dev_eer:.4f}; checkpoint {out / 'best.ckpt'}")
    return 0


def cmd_evaluate(args, argv) -> int:
    started = time.time()
    model, info = load_checkpoint(args.checkpoint)
    trials, x, _ = _load_split(Path(args.features), args.protocol)
    scores = score_batch(model, x, args.batch_size)
    records = [ScoreRecord(t.trial_id, t.label, float(s)) for t, s in zip(trials, scores)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(out, records)
    config = {"checkpoint": str(args.checkpoint), "protocol": str(args.protocol), "model": model.cfg.to_dict()}
    write_manifest(str(out) + ".manifest.json", "evaluate", argv, config, None, started)
    print(f"scored {len(records)} trials -> {out}")
    return 0


def cmd_metrics(args, argv) -> int:
    started = time.time()
    records = read_scores(args.scores)
    rate, threshold = eer(records)
    rows = [("summary", "eer", repr(rate)), ("summary", "threshold", repr(threshold))]
    print(f"EER {rate}")
    print(f"threshold {threshold}")
    if args.tdcf_params:
        t = min_tdcf(records, read_tdcf_params(args.tdcf_params))
        rows.append(("summary", "min_tdcf", repr(t)))
        print(f"min t-DCF {t}")
    if args.attacks:
        groups = {tr.trial_id: tr.attack_id for tr in parse_protocol(args.attacks)}
        table = accuracy_at_eer(records, threshold, groups)
        for key, (n, acc) in table.items():
            rows.append(("accuracy", key, repr(acc)))
            rows.append(("count", key, str(n)))
            print(f"accuracy {key} {acc:.4f} (n={n})")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_report(out, rows)
        config = {"scores": str(args.scores), "tdcf_params": args.tdcf_params, "attacks": args.attacks}
        write_manifest(str(out) + ".manifest.json", "metrics", argv, config, None, started)
    return 0


def cmd_param_count(args, argv) -> int:
    values = _load_config(args, BackboneConfig)
    arch = args.arch or values.get("arch") or "res2net"
    if arch not in ARCHS:
        raise UsageError(f"unknown architecture {arch!r}")
    cfg = resolve(BackboneConfig, values, {}).with_arch(arch)
    model = build_backbone(cfg)
    print(f"arch {arch}")
    print(f"total {model_param_count(model)}")
    print(f"gates {expected_gate_params(cfg)}")
    for name, n in param_breakdown(model).items():
        print(f"  {name} {n}")
    return 0


def cmd_grad_check(args, argv) -> int:
    from .gradcheck import run_suite

    results = run_suite(archs=(args.arch,), seeds=[args.seed])
    worst = 0.0
    for name, seed, err in results:
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{name:24s} seed {seed}  max rel err {err:.3e}  {status}")
        worst = max(worst, err)
    print(f"worst {worst:.3e} (tolerance {args.tol:.1e})")
    return 0 if worst <= args.tol else 1


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gated-res2net", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate the synthetic bonafide/spoof corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("extract", help="CQT features for every file in a WAV list")
    s.add_argument("--wav-list", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fmin", type=float)
    s.add_argument("--hop", type=float)
    s.add_argument("--config")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train a countermeasure model")
    s.add_argument("--features", required=True)
    s.add_argument("--protocols", required=True)
    s.add_argument("--arch", choices=ARCHS)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a protocol with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int, default=32)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("metrics", help="EER, min t-DCF and per-attack accuracy of a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--tdcf-params")
    s.add_argument("--attacks", help="protocol file mapping trials to attack ids")
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("param-count", help="parameter totals per component")
    s.add_argument("--arch", choices=ARCHS)
    s.add_argument("--config")
    s.set_defaults(func=cmd_param_count)

    s = sub.add_parser("grad-check", help="finite-difference gradient checks on a tiny configuration")
    s.add_argument("--arch", choices=ARCHS, default="mcg")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args, argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and map to exit code 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
