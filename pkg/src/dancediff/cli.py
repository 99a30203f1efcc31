"""Command-line entry point: synth-data, train, generate, edit, evaluate, render.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Run configs are JSON; values resolve as preset defaults < config file < flags.
``DANCEDIFF_OUTPUT_ROOT`` prefixes every relative output path.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import control, datagen, metrics
from .conditioning import PROMPT_KINDS, AudioCondition, encode_style
from .denoiser import (PRESET_STEPS, PRESETS, Denoiser, DenoiserConfig, NonFiniteLossError,
                       SequenceTooLongError, load_checkpoint, preset, save_checkpoint)
from .diffusion import Trainer, TrainingConfig, TrainingData, guided_sample
from .render import render_motion
from .skeleton import Skeleton

log = logging.getLogger("dancediff")

OUTPUT_ROOT_ENV = "DANCEDIFF_OUTPUT_ROOT"


class UsageError(Exception):
    """Bad arguments or invalid inputs; exits with status 2."""


@dataclass
class RunConfig:
    preset: str = "desk"
    model: dict = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    prompt_kind: str = "one_hot"
    window_s: float = datagen.TRAIN_WINDOW_S
    stride_s: float = datagen.TRAIN_STRIDE_S
    w: float = 1.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise UsageError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.prompt_kind not in PROMPT_KINDS:
            raise UsageError(f"unknown prompt kind {self.prompt_kind!r}")

    def model_config(self) -> DenoiserConfig:
        try:
            return preset(self.preset, **self.model)
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad model override: {e}") from e

    def to_dict(self) -> dict:
        return {"preset": self.preset, "model": dict(self.model), "training": self.training.to_dict(),
                "prompt_kind": self.prompt_kind, "window_s": self.window_s, "stride_s": self.stride_s,
                "w": self.w}


def resolve_run_config(config_path=None, **flags) -> RunConfig:
    """Merge the config file and non-None flags over the defaults.

    Flags named after TrainingConfig fields land in ``training``; flags named
    after DenoiserConfig fields land in ``model``; the rest are top-level.
    """
    data: dict = {}
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text())
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {config_path}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"{config_path}: line {e.lineno}: {e.msg}") from e
    training = dict(data.get("training", {}))
    model = dict(data.get("model", {}))
    top = {k: v for k, v in data.items() if k not in ("training", "model")}
    train_fields = set(TrainingConfig.__dataclass_fields__)
    model_fields = set(DenoiserConfig.__dataclass_fields__)
    for key, value in flags.items():
        if value is None:
            continue
        if key in train_fields:
            training[key] = value
        elif key in model_fields:
            model[key] = value
        else:
            top[key] = value
    unknown = set(top) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    name = top.get("preset", RunConfig.__dataclass_fields__["preset"].default)
    if "T" not in training and name in PRESET_STEPS:
        training["T"] = PRESET_STEPS[name]
    try:
        return RunConfig(model=model, training=TrainingConfig.from_dict(training), **top)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def style_embedding_fn(kind: str, d_s: int, n_styles: int = 10, embedding_file=None):
    def fn(style_id):
        return encode_style(kind, int(style_id), n_styles, d_s, embedding_file).embedding
    return fn


# -- commands ----------------------------------------------------------------

def cmd_synth_data(args) -> int:
    if args.styles < 1 or args.clips < 1:
        raise UsageError("--styles and --clips must be at least 1")
    if args.styles > 10:
        raise UsageError("at most 10 styles are available")
    out = output_path(args.out)
    try:
        manifest = datagen.synth_corpus(out, args.styles, args.clips, args.seconds, args.fps, args.seed)
    except OSError as e:
        log.error("cannot write corpus: %s", e)
        return 1
    log.info("wrote %d clips to %s", len(manifest["clips"]), out)
    return 0


def _training_windows(data_dir: Path, rc: RunConfig, max_clips: int | None = None):
    clips = datagen.load_corpus(data_dir, "train")
    if max_clips:
        clips = clips[:max_clips]
    windows = []
    for clip in clips:
        windows.extend(datagen.slice_windows(clip, rc.window_s, rc.stride_s))
    if not windows:
        raise UsageError(f"no training windows of {rc.window_s} s in {data_dir}")
    return windows, clips[0].skeleton


def cmd_train(args) -> int:
    data_dir = _require(args.data, "data directory")
    if not (data_dir / datagen.MANIFEST_NAME).exists():
        raise UsageError(f"{data_dir} has no {datagen.MANIFEST_NAME}")
    rc = resolve_run_config(args.config, preset=args.preset, max_iters=args.iters, seed=args.seed,
                            lr=args.lr, batch_size=args.batch_size, prompt_kind=args.prompt_kind,
                            window_s=args.window_s, stride_s=args.stride_s)
    cfg = rc.model_config()
    windows, skel = _training_windows(data_dir, rc, args.max_clips)
    if skel.n_joints != cfg.n_joints:
        cfg = replace(cfg, n_joints=skel.n_joints)
    data = TrainingData.from_clips(windows, style_embedding_fn(rc.prompt_kind, cfg.d_s))
    if data.x.shape[1] > cfg.max_frames:
        raise UsageError(f"windows of {data.x.shape[1]} frames exceed max_frames={cfg.max_frames}")

    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(rc.to_dict(), indent=1))
    torch.manual_seed(rc.training.seed)
    model = Denoiser(cfg)
    trainer = Trainer(model, data, rc.training, skel)
    if args.resume:
        trainer.load_state(_require(args.resume, "resume checkpoint"))
    try:
        trainer.run(run_dir=out, log_every=args.log_every)
    except NonFiniteLossError as e:
        log.error("%s", e)
        return 1
    trainer.save(out / "final.npz")
    save_checkpoint(out / "model.npz", model, skel,
                    {"prompt_kind": rc.prompt_kind, "T": rc.training.T, "schedule": rc.training.schedule,
                     "noise_coeff": rc.training.noise_coeff, "w": rc.w})
    log.info("trained %d iterations; final loss %.5f", trainer.iteration, trainer.history[-1]["L"])
    return 0


def _load_model(path):
    model, header = load_checkpoint(_require(path, "checkpoint"))
    if header.get("skeleton") is None:
        raise UsageError(f"{path}: checkpoint carries no skeleton")
    extra = header.get("extra", {})
    cfg = extra.get("training_config", extra)
    tcfg = TrainingConfig.from_dict({k: cfg[k] for k in ("T", "schedule", "noise_coeff") if k in cfg})
    return model, Skeleton.from_dict(header["skeleton"]), tcfg.schedule_obj(), extra


def _read_audio(path) -> tuple[AudioCondition, int | None]:
    raw = json.loads(_require(path, "audio file").read_text())
    style = raw.get("style_id")
    if "audio" in raw:
        raw = raw["audio"]
    try:
        return AudioCondition.from_dict(raw), style
    except (KeyError, ValueError) as e:
        raise UsageError(f"{path}: invalid audio file ({e})") from e


def _prompt(args, model, extra, style):
    kind = args.prompt_kind or extra.get("prompt_kind", "one_hot")
    if style is None:
        raise UsageError("no style given (--style) and none recorded in the input")
    try:
        genre = int(style) if str(style).isdigit() else style
        prompt = encode_style(kind, genre, 10, model.cfg.d_s, args.embedding_file)
    except (KeyError, ValueError) as e:
        raise UsageError(f"cannot build style prompt: {e}") from e
    log.info("style prompt [%s]: %s", kind, prompt.text)
    return prompt


def _write_motion(motion, skel, path, audio=None, style=None):
    d = motion.to_dict(skel)
    if audio is not None:
        d["audio"] = audio.to_dict()
    if style is not None:
        d["style_id"] = int(style) if str(style).isdigit() else style
    path = output_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(d))
    return path


def cmd_generate(args) -> int:
    model, skel, sched, extra = _load_model(args.checkpoint)
    audio, file_style = _read_audio(args.audio)
    style = args.style if args.style is not None else file_style
    prompt = _prompt(args, model, extra, style)
    w = args.w if args.w is not None else extra.get("w", 1.0)
    F = audio.n_frames
    if F > model.cfg.max_frames:
        if not args.long_form:
            raise UsageError(f"audio has {F} frames but the model handles at most {model.cfg.max_frames}; "
                             "rerun with --long-form")
        motion = control.generate_long(audio, prompt, w, model, sched, args.seed)
    else:
        motion = guided_sample(audio, prompt, w, model, sched, F, args.seed, audio.fps)
    path = _write_motion(motion, skel, args.out, audio, style)
    log.info("wrote %d frames to %s", motion.n_frames, path)
    return 0


def cmd_edit(args) -> int:
    model, skel, sched, extra = _load_model(args.checkpoint)
    try:
        task = control.load_task(_require(args.task, "task file"))
    except control.UnknownTaskError as e:
        raise UsageError(str(e)) from e
    except (KeyError, ValueError) as e:
        raise UsageError(f"invalid task file: {e}") from e
    if task.known_motion.n_joints != skel.n_joints:
        raise UsageError("known motion does not match the checkpoint skeleton")
    prompt = _prompt(args, model, extra, args.style if args.style is not None else task.style)
    w = args.w if args.w is not None else extra.get("w", 1.0)
    c = task.audio
    if c is not None and c.n_frames != task.known_motion.n_frames:
        raise UsageError("task audio and known motion differ in length")
    motion, mask = control.edit(task, c, prompt, w, model, sched, task.seed, skel)
    path = _write_motion(motion, skel, args.out, task.audio, task.style)
    mask_path = path.with_suffix(".mask.json")
    mask_path.write_text(json.dumps(mask.to_dict()))
    log.info("wrote %s and %s", path, mask_path)
    return 0


def _load_motion_dir(d: Path):
    files = sorted(p for p in d.glob("*.json") if p.name != datagen.MANIFEST_NAME
                   and not p.name.endswith(".mask.json"))
    motions, beats, skel = [], [], None
    for f in files:
        raw = json.loads(f.read_text())
        motion, skel = datagen.motion_from_dict(raw, f)
        motions.append(motion)
        beats.append(np.asarray(raw["audio"]["beat_times"]) if "audio" in raw else None)
    return motions, beats, skel


def cmd_evaluate(args) -> int:
    gen_dir = _require(args.generated, "generated directory")
    ref_dir = _require(args.reference, "reference directory")
    trial_dirs = sorted(p for p in gen_dir.glob("trial_*") if p.is_dir()) or [gen_dir]
    reference, _, skel = _load_motion_dir(ref_dir)
    if not reference:
        raise UsageError(f"no motion files in {ref_dir}")
    reports = []
    for d in trial_dirs:
        generated, beats, _ = _load_motion_dir(d)
        if not generated:
            raise UsageError(f"no motion files in {d}")
        reports.append(metrics.evaluate(generated, reference, skel, beats))
    report = metrics.average_reports(reports) if len(reports) > 1 else reports[0]
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    print(report.to_json())
    return 0


def cmd_render(args) -> int:
    motion, skel = datagen.load_motion(_require(args.motion, "motion file"))
    paths = render_motion(motion, skel, output_path(args.out))
    log.info("wrote %d frames to %s", len(paths), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dancediff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic corpus and manifest")
    s.add_argument("--styles", type=int, default=4)
    s.add_argument("--clips", type=int, default=8, help="clips per style")
    s.add_argument("--seconds", type=float, default=8.0)
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a denoiser on a corpus")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--prompt-kind", choices=PROMPT_KINDS)
    s.add_argument("--window-s", type=float)
    s.add_argument("--stride-s", type=float)
    s.add_argument("--max-clips", type=int)
    s.add_argument("--resume")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("generate", cmd_generate, "sample a dance for an audio file"),
                                 ("edit", cmd_edit, "run a masked editing task")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        if name == "generate":
            s.add_argument("--audio", required=True, help="audio JSON or clip file")
            s.add_argument("--long-form", action="store_true")
        else:
            s.add_argument("--task", required=True)
        s.add_argument("--style", help="style id (1-based) or genre name")
        s.add_argument("--prompt-kind", choices=PROMPT_KINDS)
        s.add_argument("--embedding-file")
        s.add_argument("--w", type=float)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="compute the metric report")
    s.add_argument("--generated", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="write one SVG per frame")
    s.add_argument("--motion", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return 2
    except datagen.ClipFormatError as e:
        log.error("invalid input: %s", e)
        return 2
    except SequenceTooLongError as e:
        log.error("%s", e)
        return 2
    except Exception as e:  # noqa: BLE001
        log.error("failed: %s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
