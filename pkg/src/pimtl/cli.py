"""``pimtl``: synth -> preprocess -> train -> personalize -> evaluate, or the
whole method matrix in one ``experiment`` run."""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, config as C, data as D, eval as E, model as M, nnet, synth, training as T

log = logging.getLogger("pimtl")

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5
EXIT_DIVERGED = 6
EXIT_IO = 7
EXIT_INTERNAL = 1


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# atomic output helpers

@contextlib.contextmanager
def atomic_dir(final):
    """Yield a scratch directory that replaces ``final`` on success."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if final.exists():
        old = final.with_name(f".{final.name}.old-{os.getpid()}")
        os.replace(final, old)
    os.replace(tmp, final)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def write_atomic(path, text: str):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# config + data plumbing

def resolve_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if getattr(args, "config", None) else C.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    syn = {}
    if getattr(args, "subjects", None) is not None:
        syn["n_subjects"] = args.subjects
    if getattr(args, "duration", None) is not None:
        syn["duration"] = args.duration
    if getattr(args, "format", None):
        syn["format"] = args.format
    if syn:
        cfg = cfg.replace("synth", **syn)
    ex = {}
    if getattr(args, "methods", None):
        ex["methods"] = tuple(args.methods)
    if getattr(args, "scenario", None):
        ex["scenario"] = args.scenario
    if getattr(args, "heldout", None) is not None:
        ex["heldout"] = args.heldout
    if getattr(args, "fractions", None):
        ex["fractions"] = tuple(args.fractions)
    if getattr(args, "seeds", None):
        ex["seeds"] = tuple(args.seeds)
    if ex:
        cfg = cfg.replace("experiment", **ex)
    return cfg


def synthesize(cfg: C.RunConfig):
    s = cfg.synth
    return synth.generate_dataset(cfg.population_config(), cfg.profile(), s.n_subjects,
                                  s.n_trials, cfg.seed, s.fs, s.fs_emg)


def load_subject_data(cfg: C.RunConfig, path=None):
    """Raw or preprocessed dataset on disk (or freshly synthesized) -> SubjectData."""
    if path is None:
        trials, subjects = synthesize(cfg)
    else:
        trials, subjects = synth.read_dataset(path)
    mvc = None
    if path is not None and (Path(path) / "preprocess.json").exists():
        mvc = json.loads((Path(path) / "preprocess.json").read_text()).get("mvc")
        mvc = {int(k): v for k, v in (mvc or {}).items()}
    env, _ = D.preprocess_trials(trials, subjects, cfg.chain(), mvc)
    return D.build_subject_data(env, subjects, cfg.sigproc.window, cfg.split())


def _heldout(cfg: C.RunConfig, data: dict) -> int:
    h = cfg.experiment.heldout or max(data)
    if h not in data:
        raise C.ConfigError(f"held-out subject {h} not in dataset (ids {sorted(data)})")
    return h


def _method(cfg: C.RunConfig, name: str, seed: int) -> T.MethodConfig:
    return T.MethodConfig(name, seed, train=cfg.train_config(), dropout=cfg.model.dropout)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> dict:
    cfg = resolve_config(args)
    trials, subjects = synthesize(cfg)
    out = Path(args.out)
    with atomic_dir(out) as tmp:
        synth.write_dataset(trials, subjects, tmp, cfg.synth.format,
                            extra={"config": cfg.to_dict(), "config_hash": cfg.digest()})
    return {"dataset": str(out), "subjects": len(subjects), "trials": len(trials),
            "samples": int(sum(len(t.t) for t in trials))}


def cmd_preprocess(args) -> dict:
    cfg = resolve_config(args)
    trials, subjects = synth.read_dataset(args.data)
    env, mvc = D.preprocess_trials(trials, subjects, cfg.chain())
    src = hashlib.sha256((Path(args.data) / "manifest.json").read_bytes()).hexdigest()
    fmt = args.format or synth.read_manifest(args.data)["format"]
    prov = {"source": str(Path(args.data).resolve()), "source_manifest_sha256": src,
            "chain": cfg.chain().__dict__, "clip": cfg.sigproc.clip, "fs_out": cfg.synth.fs,
            "mvc": {str(k): v for k, v in mvc.items()}, "pimtl_version": __version__}
    out = Path(args.out)
    with atomic_dir(out) as tmp:
        synth.write_dataset(env, subjects, tmp, fmt, extra={"preprocessed": True})
        (tmp / "preprocess.json").write_text(_json(prov))
    return {"dataset": str(out), "trials": len(env)}


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    data = load_subject_data(cfg, args.data)
    held = _heldout(cfg, data)
    method = _method(cfg, args.method, cfg.seed)
    if method.transfer:
        raise UsageError("train builds -1 or -2 networks; use 'personalize' for -KT")
    mc = cfg.model_config()
    ids = [held] if method.domain == "personal" else [i for i in sorted(data) if i != held]
    net, report = T.train_generic([data[i] for i in ids], mc, cfg.train_config(),
                                  method.weight, cfg.seed)
    out = Path(args.out)
    with atomic_dir(out) as tmp:
        nnet.save_checkpoint(tmp / "model.ckpt", net,
                             metadata={"method": method.method, "subjects": ids,
                                       "config_hash": cfg.digest()})
        (tmp / "report.json").write_text(_json(_report_dict(report)))
        (tmp / "config.json").write_text(cfg.to_json())
    return {"checkpoint": str(out / "model.ckpt"), "iterations": report.iterations,
            "wall_seconds": report.wall_seconds}


def cmd_personalize(args) -> dict:
    cfg = resolve_config(args)
    data = load_subject_data(cfg, args.data)
    held = _heldout(cfg, data)
    generic = M.load_checkpoint(args.checkpoint)
    method = _method(cfg, args.method, cfg.seed)
    net, report = T.personalize(generic, data[held], args.fraction, cfg.train_config(),
                                method.weight, cfg.seed, cfg.sigproc.window)
    out = Path(args.out)
    with atomic_dir(out) as tmp:
        nnet.save_checkpoint(tmp / "model.ckpt", net,
                             metadata={"method": method.method, "subjects": [held],
                                       "fraction": args.fraction, "config_hash": cfg.digest()})
        (tmp / "report.json").write_text(_json(_report_dict(report)))
        (tmp / "config.json").write_text(cfg.to_json())
    return {"checkpoint": str(out / "model.ckpt"), "iterations": report.iterations,
            "wall_seconds": report.wall_seconds}


def cmd_evaluate(args) -> dict:
    cfg = resolve_config(args)
    data = load_subject_data(cfg, args.data)
    held = _heldout(cfg, data)
    header, _ = nnet.read_checkpoint(args.checkpoint)
    meta = header.get("metadata", {})
    net = M.load_checkpoint(args.checkpoint)
    name = args.method or meta.get("method", "model")
    ids = [i for i in meta.get("subjects", []) if i != held]
    rec = E.evaluate(net, data[held], name, cfg.experiment.scenario, ids, seed=cfg.seed,
                     fraction=meta.get("fraction", 1.0))
    out = Path(args.out)
    with atomic_dir(out) as tmp:
        E.emit_reports([rec], tmp)
    return {"reports": str(out), "rmse": rec.rmse, "cc": rec.cc}


def _report_dict(r: T.TrainReport) -> dict:
    return {"iterations": r.iterations, "best_iteration": r.best_iteration,
            "stopped_early": r.stopped_early, "wall_seconds": r.wall_seconds,
            "val_curve": r.val_curve}


def experiment_jobs(cfg: C.RunConfig, ids: list[int], held: int) -> list[tuple]:
    """One job per (seed, generic subject set); methods and fractions share the
    generic networks inside a job."""
    others = [i for i in ids if i != held]
    if cfg.experiment.scenario == "single":
        sets = [[g] for g in (cfg.experiment.generic or others)]
    else:
        sets = [list(cfg.experiment.generic or others)]
    return [(seed, tuple(g)) for seed in cfg.experiment.seeds for g in sets]


def _run_job(cfg_dict: dict, data_path, seed: int, generic_ids: tuple):
    cfg = C.from_dict(cfg_dict)
    data = load_subject_data(cfg, data_path)
    held = _heldout(cfg, data)
    mc, cache, records = cfg.model_config(), {}, []
    for name in cfg.experiment.methods:
        method = _method(cfg, name, seed)
        fractions = cfg.experiment.fractions if method.transfer else (1.0,)
        for f in fractions:
            res = T.run_method(method, cfg.experiment.scenario, data, held, list(generic_ids),
                               mc, f, cache)
            log.info("%s seed=%d f=%.2f angle RMSE %.3f deg", name, seed, f, res.record.rmse["angle"])
            records.append(res.record)
    return records


def cmd_experiment(args) -> dict:
    cfg = resolve_config(args)
    data_path = args.data
    ids = sorted(load_subject_data(cfg, data_path)) if data_path else \
        [i + 1 for i in range(cfg.synth.n_subjects)]
    held = cfg.experiment.heldout or max(ids)
    if held not in ids:
        raise C.ConfigError(f"held-out subject {held} not in dataset (ids {ids})")
    jobs = experiment_jobs(cfg, ids, held)
    key = cfg.to_dict()
    if data_path:
        key["data_manifest"] = hashlib.sha256(
            (Path(data_path) / "manifest.json").read_bytes()).hexdigest()
    run_id = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:12]
    out = Path(args.out) / f"run-{run_id}"
    n_jobs = max(1, min(args.jobs or 1, len(jobs)))
    if n_jobs == 1:
        results = [_run_job(cfg.to_dict(), data_path, s, g) for s, g in jobs]
    else:
        with ProcessPoolExecutor(n_jobs) as pool:
            futs = [pool.submit(_run_job, cfg.to_dict(), data_path, s, g) for s, g in jobs]
            results = [f.result() for f in futs]
    records = [r for batch in results for r in batch]
    with atomic_dir(out) as tmp:
        E.emit_reports(records, tmp)
        (tmp / "config.json").write_text(cfg.to_json())
        (tmp / "timing.json").write_text(_json(T.timing_report(records)))
        (tmp / "summary.json").write_text(_json({
            "run_id": run_id, "heldout": held, "jobs": [list(map(_listify, j)) for j in jobs],
            "records": [{"method": r.method, "seed": r.seed, "fraction": r.fraction,
                         "generic_ids": r.generic_ids, "rmse": r.rmse, "cc": r.cc}
                        for r in records]}))
    return {"run_dir": str(out), "records": len(records)}


def _listify(x):
    return list(x) if isinstance(x, tuple) else x


# ---------------------------------------------------------------------------
# argument parsing

def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _methods(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [n for n in names if n not in T.METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown method(s) {bad or text!r}; choose from {', '.join(T.METHODS)}")
    return names


def _method_name(text: str) -> str:
    if text not in T.METHODS:
        raise argparse.ArgumentTypeError(f"unknown method {text!r}; choose from {', '.join(T.METHODS)}")
    return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", metavar="PATH", required=True, help="output directory")

    p = argparse.ArgumentParser(prog="pimtl", description=__doc__)
    p.add_argument("--version", action="version", version=f"pimtl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic raw dataset")
    s.add_argument("--subjects", type=int, help="number of subjects")
    s.add_argument("--duration", type=float, help="seconds per trial")
    s.add_argument("--format", choices=("csv", "binary"), help="trial file format")

    s = sub.add_parser("preprocess", parents=[common], help="EMG envelopes + provenance")
    s.add_argument("--data", required=True, metavar="PATH", help="raw dataset directory")
    s.add_argument("--format", choices=("csv", "binary"), help="output trial format")

    s = sub.add_parser("train", parents=[common], help="train a -1 (generic) or -2 network")
    s.add_argument("--data", metavar="PATH", help="dataset directory (default: synthesize)")
    s.add_argument("--method", type=_method_name, default="Pi-CNN-1", help="method name")
    s.add_argument("--heldout", type=int, help="held-out subject id (0 = last)")

    s = sub.add_parser("personalize", parents=[common], help="freeze conv, fine-tune dense")
    s.add_argument("--data", metavar="PATH", help="dataset directory (default: synthesize)")
    s.add_argument("--checkpoint", required=True, metavar="PATH", help="generic checkpoint")
    s.add_argument("--method", type=_method_name, default="Pi-CNN-KT", help="method name")
    s.add_argument("--heldout", type=int, help="held-out subject id (0 = last)")
    s.add_argument("--fraction", type=float, default=1.0, help="share of training data used")

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test split")
    s.add_argument("--data", metavar="PATH", help="dataset directory (default: synthesize)")
    s.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint to score")
    s.add_argument("--method", help="label used in the reports")
    s.add_argument("--heldout", type=int, help="held-out subject id (0 = last)")
    s.add_argument("--scenario", choices=T.SCENARIOS, help="scenario label")

    s = sub.add_parser("experiment", parents=[common], help="run the method matrix")
    s.add_argument("--data", metavar="PATH", help="dataset directory (default: synthesize)")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.add_argument("--scenario", choices=T.SCENARIOS, help="single or multiple")
    s.add_argument("--heldout", type=int, help="held-out subject id (0 = last)")
    s.add_argument("--methods", type=_methods, help="comma-separated method names")
    s.add_argument("--fractions", type=_csv_floats, help="comma-separated KT data fractions")
    s.add_argument("--seeds", type=_csv_ints, help="comma-separated seeds")
    return p


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "personalize": cmd_personalize, "evaluate": cmd_evaluate,
            "experiment": cmd_experiment}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (C.ConfigError, T.ConfigError, synth.ConfigError, D.DataError)):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, (synth.DatasetParseError, synth.DatasetVersionError, nnet.CheckpointError,
                        T.CompatibilityError)):
        return EXIT_FORMAT
    if isinstance(exc, T.TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_INTERNAL


def main(argv=None) -> int:
    level = os.environ.get("PIMTL_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error
        code = _exit_code(exc)
        if code == EXIT_INTERNAL:
            log.debug("unhandled error", exc_info=True)
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
               "command": args.command}
        sys.stderr.write(json.dumps(err) + "\n")
        return code
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
