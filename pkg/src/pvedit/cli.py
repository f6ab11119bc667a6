"""Command-line entry points: ``pvedit <command> [flags]``.

Exit status: 0 success, 2 unknown command or bad usage, 3 invalid
configuration, 4 pipeline failure. Every successful run writes
``manifest.json`` (resolved config, seeds, outputs) and ``metrics.json`` to
its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .core import Purpose, RngStream, atomic_write_bytes, export_frames, load_tensor, save_tensor
from .errors import ConfigError, PipelineError, PveError

log = logging.getLogger("pvedit")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n").encode())


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (tuple, set)):
        return list(x)
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not serializable: {type(x).__name__}")


def _finish(out: Path, command: str, argv, cfg: RunConfig, metrics: dict, outputs: list) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": cfg["seeds"],
        "outputs": sorted(str(o) for o in outputs),
    }
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "manifest.json", manifest)


def _apply_threads() -> None:
    raw = os.environ.get("PVE_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PVE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PVE_THREADS must be a positive integer, got {raw!r}")
    import torch
    torch.set_num_threads(n)


def _load_model(path):
    from .denoiser.dit import load_checkpoint
    try:
        model, _ = load_checkpoint(path)
    except FileNotFoundError as e:
        raise PipelineError(f"checkpoint not found: {path}") from e
    model.eval()
    return model


def _load_video(path) -> np.ndarray:
    try:
        return load_tensor(path)
    except FileNotFoundError as e:
        raise PipelineError(f"video not found: {path}") from e


def _manifest_record(video_path: Path) -> dict | None:
    """The dataset manifest entry describing ``video_path``, when it has one."""
    from .synth import read_manifest
    manifest = video_path.parent / "manifest.jsonl"
    if not manifest.exists():
        return None
    for rec in read_manifest(manifest):
        if rec.get("video") == video_path.name:
            return rec
    return None


def _source_spec(cfg: RunConfig, video: np.ndarray, video_path: Path | None):
    """Scene description of the source: manifest record, then edit.source overrides."""
    import dataclasses
    from .synth import SLOTS, SceneSpec
    fields = {f.name for f in dataclasses.fields(SceneSpec)}
    rec = _manifest_record(video_path) if video_path is not None else None
    base = {k: v for k, v in (rec or {}).items() if k in fields}
    for key in ("origin", "dot"):
        if base.get(key) is not None:
            base[key] = tuple(base[key])
    base.update(frames=video.shape[0], height=video.shape[1], width=video.shape[2])
    for k, v in cfg["edit.source"].items():
        if k not in SLOTS:
            raise ConfigError(f"edit.source has unknown slot {k!r}")
        base[k] = v
    spec = SceneSpec(**base)
    try:
        spec.validate()
    except PveError as e:
        raise ConfigError(f"edit.source: {e}") from e
    return spec, rec is not None


def _target_spec(cfg: RunConfig, source):
    from .synth import SLOTS
    target = cfg["edit.target"]
    bad = [k for k in target if k not in SLOTS]
    if bad:
        raise ConfigError(f"edit.target has unknown slots {bad}")
    spec = source.with_attributes(**target)
    try:
        spec.validate()
    except PveError as e:
        raise ConfigError(f"edit.target: {e}") from e
    return spec


def _plan(cfg: RunConfig, src_prompt, dst_prompt):
    from .editing import plan_progression
    K = cfg["edit.max_subtasks"] if cfg["edit.progression"] else 1
    return plan_progression(src_prompt, dst_prompt, K)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: RunConfig):
    from .synth import make_dataset, write_dataset
    if args.count is not None:
        cfg.set("data.count", args.count)
    if args.seed is not None:
        cfg.set("seeds.data", args.seed)
    d = cfg["data"]
    if d["count"] < 1:
        raise ConfigError("data.count must be >= 1")
    items = make_dataset(d["count"], RngStream(cfg["seeds.data"], Purpose.DATASET), d["frames"], d["height"],
                         d["width"])
    manifest = write_dataset(items, args.out)
    return {"count": len(items)}, [manifest] + [args.out / f"video_{i:05d}.vten" for i in range(len(items))]


def cmd_train(args, cfg: RunConfig):
    from .denoiser.dit import save_checkpoint
    from .denoiser.training import moving_average, train
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    t0 = time.perf_counter()
    result = train(mcfg, cfg.schedule(), tcfg)
    elapsed = time.perf_counter() - t0
    ckpt = args.out / "model.vckp"
    save_checkpoint(result.model, ckpt, extra={"train": cfg["model"], "seed": tcfg.seed})
    losses = np.asarray(result.losses, dtype=np.float32)
    atomic_write_bytes(args.out / "losses.f32", losses.tobytes())
    ma = moving_average(losses)
    return ({"steps": len(losses), "initial_smoothed_loss": float(ma[0]), "final_smoothed_loss": float(ma[-1]),
             "seconds": elapsed}, [ckpt, args.out / "losses.f32"])


def cmd_invert(args, cfg: RunConfig):
    from .editing import invert_for
    from .inversion import save_track
    video = _load_video(args.video)
    if args.alpha is not None:
        cfg.set("edit.alpha", args.alpha)
    ccfg = cfg.control_config()
    model = _load_model(args.checkpoint)
    spec, _ = _source_spec(cfg, video, args.video)
    from .synth import encode_prompt
    prompt = encode_prompt(spec)
    track = invert_for(video, prompt, ccfg, model, cfg.schedule(), cfg["seeds.noise"])
    path = args.out / "track.vtrk"
    save_track(track, path)
    save_tensor(video, args.out / "source.vten")
    _write_json(args.out / "track.json", {"prompt": list(prompt), "guidance_scale": ccfg.guidance_scale,
                                          "source": "source.vten"})
    return ({"alpha_steps": track.alpha_steps, "sampler": track.sampler, "stride": track.stride},
            [path, args.out / "source.vten", args.out / "track.json"])


def cmd_replay(args, cfg: RunConfig):
    from .editing import _PairedView
    from .inversion import load_track, replay
    try:
        track = load_track(args.track)
    except FileNotFoundError as e:
        raise PipelineError(f"track not found: {args.track}") from e
    side = args.track.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    model = _load_model(args.checkpoint)
    prompt = tuple(meta.get("prompt", model.null_prompt))
    s = meta.get("guidance_scale", cfg["edit.guidance_scale"])
    video = replay(track, _PairedView(model, s), prompt, cfg.schedule())
    out = args.out / "replay.vten"
    save_tensor(video, out)
    metrics = {"alpha_steps": track.alpha_steps}
    src = args.track.parent / meta["source"] if "source" in meta else None
    if src is not None and src.exists():
        metrics["max_abs_error"] = float(np.max(np.abs(video - load_tensor(src))))
    return metrics, [out]


def _subtask_metrics(res, source_video, masks) -> dict:
    from .synth import psnr_masked
    m = {"index": res.index, "prompt_orig": list(res.prompt_orig), "prompt_edit": list(res.prompt_edit),
         "active_steps": len(res.active_steps())}
    if masks is not None and masks["background"].any():
        m["background_psnr"] = psnr_masked(res.output, source_video, masks["background"])
    return m


def cmd_edit(args, cfg: RunConfig):
    from .editing import run_progression
    from .synth import encode_prompt, fulfillment_score, gen_video
    ccfg = cfg.control_config()
    video = _load_video(args.video)
    model = _load_model(args.checkpoint)
    src, exact = _source_spec(cfg, video, args.video)
    dst = _target_spec(cfg, src)
    plan = _plan(cfg, encode_prompt(src), encode_prompt(dst))
    result = run_progression(video, plan, ccfg, model, cfg.schedule(), seed=cfg["seeds.noise"])
    outputs = []
    for res in result.subtasks:
        d = args.out / f"subtask_{res.index}"
        outputs += export_frames(res.output, d)
        save_tensor(res.output, d / "video.vten")
        outputs.append(d / "video.vten")
    save_tensor(result.video, args.out / "final.vten")
    outputs.append(args.out / "final.vten")
    # masks need the scene geometry, known only for manifest-backed videos
    masks = gen_video(src).masks if exact else None
    metrics = {"waypoints": [list(w) for w in plan.waypoints],
               "subtasks": [_subtask_metrics(r, video, masks) for r in result.subtasks]}
    if exact:
        changed = [k for k in cfg["edit.target"] if getattr(src, k) != getattr(dst, k)]
        if changed:
            region = np.zeros(video.shape[:3], bool)
            for k in changed:
                region |= gen_video(dst).masks[k] | masks[k]
            if region.any():
                metrics["fulfillment"] = fulfillment_score(result.video, dst, region)
    return metrics, outputs


def _load_path(path):
    from .rer import CameraPath
    try:
        doc = json.loads(Path(path).read_text())
        return CameraPath(doc["windows"], doc["frame_size"], bool(doc.get("loop", False)))
    except FileNotFoundError as e:
        raise PipelineError(f"camera path not found: {path}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise PipelineError(f"camera path {path} is malformed: {e}") from e


def cmd_rer(args, cfg: RunConfig):
    from .rer import PlanarScene, consistency_metric, render, rer_edit
    from .synth import SceneSpec, encode_prompt
    ccfg = cfg.control_config()
    tex = _load_video(args.scene)
    if tex.shape[0] != 1:
        raise PipelineError(f"scene tensor must hold a single texture frame, got {tex.shape[0]}")
    scene = PlanarScene(tex[0])
    path = _load_path(args.path)
    model = _load_model(args.checkpoint)
    src = SceneSpec().with_attributes(**cfg["edit.source"])
    dst = _target_spec(cfg, src)
    plan = _plan(cfg, encode_prompt(src), encode_prompt(dst))
    res = rer_edit(scene, path, plan, ccfg, model, cfg.schedule(), seed=cfg["seeds.noise"],
                   use_hook=cfg["edit.rer_hook"])
    outputs = []
    save_tensor(res.scene.texture[None], args.out / "scene.vten")
    save_tensor(res.coverage[None, ..., None].astype(np.float32), args.out / "coverage.vten")
    save_tensor(res.video, args.out / "final.vten")
    outputs += [args.out / "scene.vten", args.out / "coverage.vten", args.out / "final.vten"]
    for t, s in enumerate(res.subtask_scenes):
        save_tensor(s.texture[None], args.out / f"subtask_{t}" / "scene.vten")
        outputs += export_frames(render(s, path), args.out / f"subtask_{t}")
        outputs.append(args.out / f"subtask_{t}" / "scene.vten")
    metrics = {"final_consistency": consistency_metric(res.video, path),
               "raw_final_consistency": consistency_metric(res.raw_final, path),
               "subtasks": len(res.progression.subtasks)}
    return metrics, outputs


def cmd_attnbench(args, cfg: RunConfig):
    from .bench import format_report, run_bench
    if args.grid:
        try:
            cfg.set("bench.sizes", [int(x) for x in args.grid.split(",") if x.strip()])
        except ValueError as e:
            raise ConfigError(f"--grid must be comma-separated integers: {args.grid!r}") from e
    b = cfg["bench"]
    report = run_bench(b["sizes"], b["d"], b["dv"], b["reps"], b["block"], b["fixed_n"])
    (args.out / "bench.txt").write_text(format_report(report) + "\n")
    return report, [args.out / "bench.txt"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "invert": cmd_invert,
    "edit": cmd_edit,
    "rer": cmd_rer,
    "attnbench": cmd_attnbench,
    "replay": cmd_replay,
}


def build_parser(command: str) -> argparse.ArgumentParser:
    p = _Parser(prog=f"pvedit {command}")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    if command == "gen-data":
        p.add_argument("--count", type=int)
        p.add_argument("--seed", type=int)
    if command in ("invert", "edit"):
        p.add_argument("--video", type=Path, required=True)
    if command == "invert":
        p.add_argument("--alpha", type=float)
    if command in ("invert", "edit", "rer", "replay"):
        p.add_argument("--checkpoint", type=Path, required=True)
    if command == "rer":
        p.add_argument("--scene", type=Path, required=True)
        p.add_argument("--path", type=Path, required=True)
    if command == "replay":
        p.add_argument("--track", type=Path, required=True)
    if command == "attnbench":
        p.add_argument("--grid", type=str, default=None)
    return p


def dispatch(command: str, argv=()) -> int:
    if command not in COMMANDS:
        print(f"pvedit: unknown command {command!r}; expected one of {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = build_parser(command).parse_args(list(argv))
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = RunConfig.load(args.config, args.set)
        _apply_threads()
        args.out.mkdir(parents=True, exist_ok=True)
        metrics, outputs = COMMANDS[command](args, cfg)
        _finish(args.out, command, argv, cfg, metrics, outputs)
    except ConfigError as e:
        print(f"pvedit {command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PveError, OSError) as e:
        print(f"pvedit {command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if not argv or argv[0] in ("-h", "--help"):
        print(__doc__.strip())
        print("commands:", ", ".join(COMMANDS))
        return EXIT_OK if argv else EXIT_USAGE
    return dispatch(argv[0], argv[1:])


if __name__ == "__main__":
    sys.exit(main())
