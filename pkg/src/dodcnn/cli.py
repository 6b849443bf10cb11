"""Command-line entry point: ``python -m dodcnn <subcommand> ...``.

Subcommands are gen-data, train, eval, ablate and gradcheck. Progress goes to
standard error; results are JSON on standard output (or the ``--out`` file for
commands whose output is a single document). Exit status is 0 on success, 1
for invalid arguments or inputs, and 2 when a run fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, network
from .evaluation import average_precision, late_fusion
from .experiments import FUSION_WEIGHTS, evaluate, predict
from .gradcheck import run_suite
from .network import INJECTION_SITES, ArchConfig
from .serialize import FormatError
from .synth_data import DatasetError, SceneConfig, generate_split, make_manifest, read_dataset, write_dataset
from .trainer import PROFILES, TrainConfig, TrainSet, parse_config, run_stage, stage_configs

log = logging.getLogger("dodcnn")

TASKS = ("event", "rigid", "nonrigid")


class UsageError(Exception):
    """Bad flags or inputs, detected before anything is written."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _provenance(seed: int, config_hash: int | None) -> dict:
    out = {"seed": seed, "version": __version__}
    if config_hash is not None:
        out["config_hash"] = f"{config_hash:016x}"
    return out


def _emit(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "profile", None):
        cfg = replace(cfg, profile=args.profile, stages=stage_configs(args.profile))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = parse_config(path.read_text(), cfg)
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _read_data(args):
    if not args.data:
        raise UsageError("--data DIR is required")
    try:
        return read_dataset(args.data)
    except (DatasetError, FormatError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None


def _sites(text: str | None, default: tuple[str, ...]) -> tuple[str, ...]:
    if text is None:
        return default
    sites = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in sites if s not in INJECTION_SITES]
    if bad or not sites:
        raise UsageError(f"--injection takes a comma list of {', '.join(INJECTION_SITES)}; got {text!r}")
    return sites


def _sidecar_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".json")


def save_checkpoint(params, path: Path, extra: dict) -> None:
    """DODC file plus a JSON sidecar with the architecture and provenance."""
    network.save(params, path)
    meta = {"arch": params.config.to_dict(), **_provenance(params.metadata.get("seed", 0), params.config.hash()),
            "stage": params.metadata.get("stage"), "dtype": str(params.dtype), **extra}
    _sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> network.NetworkParams:
    path = Path(path)
    side = _sidecar_path(path)
    if not path.is_file() or not side.is_file():
        raise UsageError(f"checkpoint {path} or its sidecar {side.name} is missing")
    try:
        meta = json.loads(side.read_text())
        config = ArchConfig.from_dict(meta["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{side}: unreadable sidecar ({exc})") from None
    try:
        params = network.load(path, config)
    except FormatError as exc:
        raise UsageError(str(exc)) from None
    params.metadata = {"stage": meta.get("stage", 0), "seed": meta.get("seed", 0)}
    return params


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    if not args.out:
        raise UsageError("gen-data needs --out DIR")
    if args.n < 1:
        raise UsageError("--n must be positive")
    n_test = args.n if args.n_test is None else args.n_test
    scene = SceneConfig()
    log.info("generating %d train / %d test scenes (seed %d)", args.n, n_test, args.seed)
    splits = {"train": generate_split(args.n, args.seed, "train", scene),
              "test": generate_split(n_test, args.seed, "test", scene)}
    manifest = make_manifest(splits, args.seed, scene)
    manifest["version"] = __version__
    write_dataset(args.out, manifest, splits)
    _emit({"command": "gen-data", "out": str(args.out), **_provenance(args.seed, None),
           "splits": {k: len(v) for k, v in splits.items()}}, None)
    return 0


def _progress(stage):
    def report(it, loss):
        if it % 100 == 0:
            log.info("stage %d iteration %d loss %.4f", stage, it, loss)
    return report


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not args.out:
        raise UsageError("train needs --out DIR")
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    site = _sites(args.injection, (cfg.arch.injection_site,))
    if len(site) != 1:
        raise UsageError("train takes a single --injection site")
    cfg = replace(cfg, arch=replace(cfg.arch, injection_site=site[0]))
    if stages[0] > 1 and not args.init:
        raise UsageError(f"--stage {stages[0]} needs --init with the stage-{stages[0] - 1} checkpoint")
    manifest, splits = _read_data(args)
    if args.init:
        params = load_checkpoint(args.init)
        if params.metadata["stage"] != stages[0] - 1:
            raise UsageError(f"--init holds a stage-{params.metadata['stage']} checkpoint; "
                             f"stage {stages[0]} needs stage {stages[0] - 1}")
        params = params.copy(cfg.dtype)
    else:
        params = network.build(replace(cfg.arch, injection_site="none"), cfg.seed, cfg.dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = TrainSet(splits["train"], cfg)
    written = []
    t0 = time.perf_counter()
    for sid in stages:
        res = run_stage(cfg.stage(sid), params, data, cfg, progress=_progress(sid))
        params = res.params
        path = out / f"stage{sid}.dodc"
        save_checkpoint(params, path, {"dataset_seed": manifest.get("generator_seed"),
                                       "final_loss": float(np.mean(res.losses[-50:])) if len(res.losses) else None,
                                       "profile": cfg.profile, "precision": cfg.precision})
        written.append(str(path))
        log.info("stage %d written to %s", sid, path)
    _emit({"command": "train", "checkpoints": written, **_provenance(cfg.seed, params.config.hash()),
           "seconds": round(time.perf_counter() - t0, 3)}, None)
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint PATH")
    tasks = TASKS if args.task == "all" else (args.task,)
    params = load_checkpoint(args.checkpoint)
    _, splits = _read_data(args)
    records = evaluate(params, splits["test"], tasks, "test", fusion=args.fusion)
    doc = {"command": "eval", "records": records,
           **_provenance(params.metadata.get("seed", 0), params.config.hash())}
    _emit(doc, args.out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    sites = _sites(args.injection, INJECTION_SITES)
    _, splits = _read_data(args)
    t0 = time.perf_counter()
    data = TrainSet(splits["train"], cfg)
    params = network.build(replace(cfg.arch, injection_site="none"), cfg.seed, cfg.dtype)
    for sid in (1, 2):
        params = run_stage(cfg.stage(sid), params, data, cfg, progress=_progress(sid)).params
    stage2 = params
    test = splits["test"]
    labels = np.array([a.event_label for _, a in test], dtype=bool)
    rows = []
    for site in sites:
        log.info("stage 3 with injection site %s", site)
        p3 = run_stage(cfg.stage(3), stage2, data, cfg, site=site, progress=_progress(3)).params
        row = {"injection_site": site, "config_hash": f"{p3.config.hash():016x}",
               "event_fc_in": p3.config.event_fc_in}
        if args.fusion:
            pred = predict(p3, test, TASKS)
            row["event_ap"] = average_precision(pred.event_scores, labels)
            fused = late_fusion([pred.event_scores, pred.image_scores["rigid"], pred.image_scores["nonrigid"]],
                                FUSION_WEIGHTS)
            row["event_fused_ap"] = average_precision(fused, labels)
        else:
            row["event_ap"] = evaluate(p3, test, ("event",))[0]["ap"]
        rows.append(row)
        log.info("site %s: event AP %.4f", site, row["event_ap"])
    doc = {"command": "ablate", "rows": rows, **_provenance(cfg.seed, stage2.config.hash()),
           "seconds": round(time.perf_counter() - t0, 3)}
    _emit(doc, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    reports, seconds = run_suite(args.instances, args.seed)
    for r in reports:
        log.info("%-22s %-22s max rel err %.2e", r.op, r.status, r.max_rel_error)
    doc = {"command": "gradcheck", "ops": [r.as_dict() for r in reports], "tolerance": 1e-4,
           **_provenance(args.seed, None), "seconds": round(seconds, 3)}
    _emit(doc, args.out)
    return 0 if all(r.ok for r in reports) else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dodcnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, config=True):
        sp.add_argument("--out", help="output path")
        sp.add_argument("--seed", type=int, default=None if config else 0)
        if data:
            sp.add_argument("--data", help="dataset directory written by gen-data")
        if config:
            sp.add_argument("--config", help="key = value training config file")
            sp.add_argument("--profile", choices=sorted(PROFILES))

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g, data=False, config=False)
    g.add_argument("--n", type=int, default=400, help="training images")
    g.add_argument("--n-test", type=int, help="test images (default: same as --n)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stages and write checkpoints")
    common(t)
    t.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    t.add_argument("--init", help="checkpoint of the previous stage (for --stage 2 or 3)")
    t.add_argument("--injection", help="injection site for stage 3")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(e, config=False)
    e.add_argument("--checkpoint", help="DODC checkpoint with its JSON sidecar")
    e.add_argument("--task", choices=(*TASKS, "all"), default="all")
    e.add_argument("--fusion", action="store_true", help="also report late-fused event AP")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="stage 3 once per injection site from one stage-2 network")
    common(a)
    a.add_argument("--injection", help="comma list of sites (default: all four)")
    a.add_argument("--fusion", action="store_true")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op")
    common(c, data=False, config=False)
    c.add_argument("--instances", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"dodcnn: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any failure after validation
        log.exception("dodcnn: run failed: %s", exc)
        return 2


def main() -> None:
    sys.exit(run())
