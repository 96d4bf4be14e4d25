"""Command-line entry point: ``megc <command> --config run.yaml``.

Every command writes into ``$MEGC_RUN_DIR/<command>-<hash>`` (default root:
``runs/`` next to the config file) together with the fully resolved config.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import CorpusIndex, ManifestError, SampleCache, load_manifest, write_manifest, CorpusRecord
from .cues import CueError, cue_path, dome_depth, providers_from_dir, random_paste_geometry, save_map, composite_boundary, zero_map
from .evaluator import (
    ABLATABLE,
    compute_hter,
    dev_split,
    dump_map_grid,
    run_protocol,
    score_samples,
    select_threshold,
    split_scores,
)
from .model import BackboneConfig, MEGCNet
from .moire_net import MoireNet, MoireNetConfig, MoireNetProvider, build_moire_net, extract_moire_map, make_moire_pairs, pretrain_demoire, train_moire_net
from .trainer import TrainConfig, TrainingError, load_model, train_megc

log = logging.getLogger("megc")

COMMANDS = ("synth-cues", "train-moire", "extract-moire", "train", "eval", "ablate", "summarize", "make-toy")
EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3

DEFAULTS = {
    "train_manifest": None,
    "test_manifest": None,
    "cue_dir": "cues",
    "seed": 0,
    "desk_scale": True,
    "moire_checkpoint": None,
    "checkpoint": None,
    "video_level": False,
    "synth": {"composites": 16, "write_depth": True},
    "moire": {
        "pairs": 64,
        "pretrain_steps": 400,
        "steps": 200,
        "batch_size": 8,
        "lr": 3e-3,
        "alpha": 0.3,
        "clean_fraction": 0.25,
        "net": {},
    },
    "train": {},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None) -> tuple[dict, Path]:
    if path is None:
        return copy.deepcopy(DEFAULTS), Path.cwd()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {' '.join(str(e).split())}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return _merge(DEFAULTS, raw), path.parent.resolve()


def resolve(cfg: dict, base: Path, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "desk_scale", False):
        cfg["desk_scale"] = True
    for key in ("train_manifest", "test_manifest", "cue_dir", "moire_checkpoint", "checkpoint"):
        override = getattr(args, key, None)
        if override is not None:
            cfg[key] = str(Path(override).resolve())
        elif cfg.get(key) is not None:
            cfg[key] = str((base / cfg[key]).resolve())
    return cfg


def train_config(cfg: dict, drop=()) -> TrainConfig:
    t = dict(cfg.get("train") or {})
    t.setdefault("seed", cfg["seed"])
    t.setdefault("desk_scale", cfg["desk_scale"])
    if drop:
        t["drop"] = list(drop)
    try:
        return TrainConfig.from_dict(t)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from None


def run_dir_for(command: str, cfg: dict, base: Path, extra: dict | None = None) -> Path:
    payload = json.dumps({"command": command, "config": cfg, **(extra or {})}, sort_keys=True)
    digest = hashlib.sha256(payload.encode()).hexdigest()[:12]
    root = Path(os.environ.get("MEGC_RUN_DIR") or base / "runs")
    d = root / f"{command}-{digest}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return d


def _need(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"config key {key!r} is required for this command")
    return cfg[key]


def _manifest(cfg: dict, key: str) -> CorpusIndex:
    return load_manifest(_need(cfg, key))


def _supervision(cfg: dict):
    fallback = None
    if cfg.get("moire_checkpoint"):
        fallback = MoireNetProvider(load_moire(cfg["moire_checkpoint"]))
    return providers_from_dir(cfg.get("cue_dir"), moire_fallback=fallback)


def load_moire(path: str | Path) -> MoireNet:
    payload = load_checkpoint(path, kind="moire")
    net = MoireNet(MoireNetConfig(**payload["config"]))
    net.load_state_dict(payload["state"])
    net.eval()
    return net


# -- commands ---------------------------------------------------------------


def cmd_synth_cues(cfg: dict, args, run_dir: Path) -> None:
    index = _manifest(cfg, "train_manifest")
    cue_dir = Path(_need(cfg, "cue_dir"))
    comp_dir = cue_dir / "composites"
    comp_dir.mkdir(parents=True, exist_ok=True)
    cache = SampleCache(index)
    written = 0
    for r in index.samples:
        s = cache.get(r)
        if cfg["synth"].get("write_depth", True):
            save_map(dome_depth(s), cue_path(cue_dir, r.sample_id, "depth"))
        save_map(zero_map(s), cue_path(cue_dir, r.sample_id, "reflection"))
        written += 2
    rng = np.random.default_rng([cfg["seed"], 3])
    live = [r for r in index.samples if r.label == "live" and r.split == "train"]
    spoof = [r for r in index.samples if r.label == "spoof" and r.spoof_type != "composite" and r.split == "train"]
    if not live or not spoof:
        raise ManifestError("synth-cues needs live and spoof training records for composites")
    records = list(index.samples)
    from PIL import Image

    for k in range(int(cfg["synth"]["composites"])):
        lv = cache.get(live[int(rng.integers(len(live)))])
        sp = cache.get(spoof[int(rng.integers(len(spoof)))])
        comp, boundary = composite_boundary(lv, sp, random_paste_geometry(rng))
        sid = f"composite_{k:04d}"
        img_path = comp_dir / f"{sid}.png"
        Image.fromarray((comp.rgb * 255).round().astype(np.uint8)).save(img_path)
        save_map(boundary, cue_path(cue_dir, sid, "boundary"), binary=True)
        save_map(zero_map(comp), cue_path(cue_dir, sid, "reflection"))
        records.append(
            CorpusRecord(
                path=str(img_path),
                label="spoof",
                spoof_type="composite",
                face_box=tuple(int(round(v)) for v in comp.crop_box),
                sample_id=sid,
                split="train",
                prepared=True,
                source_spoof_type=comp.source_spoof_type,
            )
        )
        written += 2
    resolved = [
        CorpusRecord(**{**r.__dict__, "path": str(index.resolve(r)) if not Path(r.path).is_absolute() else r.path})
        for r in records
    ]
    out = run_dir / "manifest.jsonl"
    write_manifest(resolved, out)
    print(f"wrote {written} cue maps to {cue_dir}; manifest with composites: {out}")


def cmd_train_moire(cfg: dict, args, run_dir: Path) -> None:
    index = _manifest(cfg, "train_manifest")
    m = cfg["moire"]
    cache = SampleCache(index)
    live = [cache.get(r) for r in index.samples if r.label == "live" and r.split == "train"]
    pairs = make_moire_pairs(live, int(m["pairs"]), seed=cfg["seed"], alpha=float(m["alpha"]), clean_fraction=float(m["clean_fraction"]))
    try:
        net_cfg = MoireNetConfig(**m.get("net", {}))
    except TypeError as e:
        raise ConfigError(f"invalid moire.net config: {e}") from None
    net = build_moire_net(net_cfg, seed=cfg["seed"])
    pre = pretrain_demoire(net, pairs, steps=int(m["pretrain_steps"]), batch_size=int(m["batch_size"]), lr=float(m["lr"]), seed=cfg["seed"])
    if not net_cfg.freeze_backbone:
        net.set_frozen(False)
    hist = train_moire_net(net, pairs, steps=int(m["steps"]), batch_size=int(m["batch_size"]), lr=float(m["lr"]), seed=cfg["seed"])
    path = run_dir / "moire.pt"
    digest = save_checkpoint(path, "moire", net, net.cfg.to_dict(), pretrain_history=pre, history=hist)
    (run_dir / "moire_history.json").write_text(json.dumps({"pretrain": pre, "train": hist}))
    print(f"moire net: mse {hist[0]:.4f} -> {hist[-1]:.4f}; checkpoint {path} sha256={digest[:12]}")


def cmd_extract_moire(cfg: dict, args, run_dir: Path) -> None:
    net = load_moire(_need(cfg, "moire_checkpoint"))
    index = load_manifest(args.manifest) if args.manifest else _manifest(cfg, "train_manifest")
    cue_dir = Path(_need(cfg, "cue_dir"))
    cue_dir.mkdir(parents=True, exist_ok=True)
    cache = SampleCache(index)
    n = 0
    for r in index.samples:
        replay_like = r.spoof_type == "replay" or (r.spoof_type == "composite" and r.source_spoof_type == "replay")
        if not replay_like:
            continue
        save_map(extract_moire_map(net, cache.get(r).image), cue_path(cue_dir, r.sample_id, "moire"))
        n += 1
    print(f"extracted {n} moire maps into {cue_dir}")


def cmd_train(cfg: dict, args, run_dir: Path) -> None:
    tc = train_config(cfg, args.drop)
    index = load_manifest(args.manifest) if args.manifest else _manifest(cfg, "train_manifest")
    train_part, _ = dev_split(index)
    try:
        result = train_megc(train_part, _supervision(cfg), tc, run_dir=run_dir)
    except CueError as e:
        raise TrainingError(str(e)) from e
    (run_dir / "history.json").write_text(json.dumps(result.history))
    last = result.history[-1]
    print(f"trained {len(result.history)} steps: l_overall {result.history[0]['l_overall']:.4f} -> {last['l_overall']:.4f}")
    print(f"checkpoint {result.checkpoint} sha256={result.digest}")


def cmd_eval(cfg: dict, args, run_dir: Path) -> None:
    model = load_model(_need(cfg, "checkpoint"))
    train_index = _manifest(cfg, "train_manifest")
    _, dev = dev_split(train_index)
    dev_cache = SampleCache(dev)
    dev_scores = score_samples(model, [dev_cache.get(r) for r in dev.samples])
    threshold = select_threshold(*split_scores(dev_scores, {r.sample_id: r.label for r in dev.samples}))
    test = _manifest(cfg, "test_manifest")
    test_cache = SampleCache(test)
    samples = [test_cache.get(r) for r in test.samples]
    scores = score_samples(model, samples)
    labels = {r.sample_id: r.label for r in test.samples}
    if cfg.get("video_level"):
        from .evaluator import aggregate_by_video

        scores = aggregate_by_video(scores, {r.sample_id: r.video_id for r in test.samples})
        for r in test.samples:
            labels.setdefault(r.video_id or r.sample_id, r.label)
    report = compute_hter(*split_scores(scores, labels), threshold)
    (run_dir / "report.json").write_text(json.dumps({"checkpoint": cfg["checkpoint"], "report": report.to_dict()}, indent=2))
    with (run_dir / "scores.jsonl").open("w") as f:
        for sid, s in scores:
            f.write(json.dumps({"id": sid, "score": s, "label": labels[sid]}) + "\n")
    if args.dump_maps:
        dump_map_grid(model, samples[:16], run_dir / "maps.png")
    print(report.table())


def cmd_ablate(cfg: dict, args, run_dir: Path) -> None:
    tc = train_config(cfg)
    train_index = load_manifest(args.manifest) if args.manifest else _manifest(cfg, "train_manifest")
    test_index = _manifest(cfg, "test_manifest")
    res = run_protocol(train_index, test_index, _supervision(cfg), tc, ablation=args.drop, run_dir=run_dir, video_level=cfg.get("video_level", False))
    if args.dump_maps:
        cache = SampleCache(test_index)
        dump_map_grid(res.trainer.model, [cache.get(r) for r in test_index.samples[:16]], run_dir / "maps.png")
    name = "full" if not args.drop else "wo/" + ",".join(sorted(args.drop))
    print(f"[{name}] config {res.manifest['config_hash']}")
    print(res.report.table())


def cmd_summarize(cfg: dict, args, run_dir: Path) -> None:
    if args.runs:
        rows = []
        for rep in sorted(Path(args.runs).glob("*/report.json")):
            d = json.loads(rep.read_text())
            r = d["report"]
            name = "wo/" + ",".join(d.get("ablation", [])) if d.get("ablation") else "full"
            rows.append(f"{name:<22} {r['far']:>8.4f} {r['frr']:>8.4f} {r['hter']:>8.4f}  {rep.parent.name}")
        print(f"{'run':<22} {'FAR':>8} {'FRR':>8} {'HTER':>8}")
        print("\n".join(rows) if rows else "(no reports found)")
        return
    model = MEGCNet(BackboneConfig.preset(desk_scale=cfg["desk_scale"], drop=args.drop))
    total = 0
    print(f"{'module':<24} {'output shape':<22} {'params':>10}")
    for name, shape, n in model.summary():
        total += n
        print(f"{name:<24} {str(shape):<22} {n:>10d}")
    print(f"{'total':<24} {'':<22} {sum(p.numel() for p in model.parameters()):>10d}")


def cmd_make_toy(cfg: dict, args, run_dir: Path) -> None:
    from .toy import make_toy_corpus

    out = Path(args.out)
    a = make_toy_corpus(out / "source", seed=cfg["seed"], palette=0, prefix="src", dev_every=4)
    b = make_toy_corpus(out / "target", seed=cfg["seed"] + 1, palette=2, prefix="tgt")
    config = {
        "train_manifest": str(a.relative_to(out)),
        "test_manifest": str(b.relative_to(out)),
        "cue_dir": "cues",
        "seed": cfg["seed"],
        "desk_scale": True,
        "train": {"steps": 300, "lr": 1e-3, "batch_size": 8},
    }
    (out / "run.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    print(f"toy corpora in {out}; config {out / 'run.yaml'}")


HANDLERS = {
    "synth-cues": cmd_synth_cues,
    "train-moire": cmd_train_moire,
    "extract-moire": cmd_extract_moire,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "summarize": cmd_summarize,
    "make-toy": cmd_make_toy,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="megc", description="Multi-cue face anti-spoofing pipeline.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--desk-scale", action="store_true")
        sp.add_argument("--drop", action="append", choices=ABLATABLE, default=[], help="cue branch to remove (repeatable)")
        sp.add_argument("--dump-maps", action="store_true", help="write predicted auxiliary maps as a PNG grid")
        sp.add_argument("--manifest", help="override the manifest this command reads")
        sp.add_argument("--checkpoint", help="MEGC checkpoint (eval)")
        sp.add_argument("--moire-checkpoint", dest="moire_checkpoint")
        if name == "summarize":
            sp.add_argument("--runs", help="directory of runs whose reports to tabulate")
        if name == "make-toy":
            sp.add_argument("--out", required=True)
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, ManifestError):
        return "manifest"
    if isinstance(exc, CueError):
        return "supervision"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, FloatingPointError):
        return "numerics"
    if isinstance(exc, (FileNotFoundError, OSError)):
        return "io"
    return "internal"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        raw, base = load_config(args.config)
        cfg = resolve(raw, base, args)
        extra = {"drop": sorted(args.drop), "manifest": args.manifest}
        if args.command == "make-toy" and args.config is None:
            # no config yet: keep the run record next to the corpora being written
            base = Path(args.out).resolve()
        run_dir = run_dir_for(args.command, cfg, base, extra)
        HANDLERS[args.command](cfg, args, run_dir)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - one-line category for every failure
        log.debug("command failed", exc_info=True)
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {_category(e)}: {msg}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
