import json
import logging

import numpy as np
import pytest
import torch

from dancediff import cli
from dancediff.conditioning import encode_style, make_audio
from dancediff.control import build_mask, load_task
from dancediff.datagen import load_clip, save_clip, synth_clip
from dancediff.denoiser import Denoiser, load_checkpoint, preset, save_checkpoint
from dancediff.diffusion import guided_sample, make_schedule
from dancediff.skeleton import desk_skeleton


@pytest.fixture(autouse=True)
def _no_output_root(monkeypatch):
    monkeypatch.delenv(cli.OUTPUT_ROOT_ENV, raising=False)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    """Untrained small model on the desk skeleton; 5 s window, 5 diffusion steps."""
    torch.manual_seed(0)
    model = Denoiser(preset("tiny", n_joints=9, d_c=16, d_s=10, max_frames=150))
    path = tmp_path_factory.mktemp("ckpt") / "model.npz"
    save_checkpoint(path, model, desk_skeleton(), {"prompt_kind": "one_hot", "T": 5})
    return path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.main(["synth-data", "--styles", "2", "--clips", "2", "--seconds", "2", "--out", str(out)]) == 0
    return out


def _audio_file(path, seconds):
    path.write_text(json.dumps(make_audio(120, seconds, 30, 16, seed=1).to_dict()))
    return path


# -- synth-data ----------------------------------------------------------------

def test_synth_data_default_counts(tmp_path):
    assert cli.main(["synth-data", "--out", str(tmp_path / "a"), "--seconds", "1"]) == 0
    files = sorted((tmp_path / "a").glob("clip_*.json"))
    assert len(files) == 32 and (tmp_path / "a" / "manifest.json").exists()


def test_synth_data_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["synth-data", "--styles", "1", "--clips", "2", "--seconds", "1",
                         "--seed", "5", "--out", str(tmp_path / d)]) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_synth_data_usage_errors(tmp_path):
    assert cli.main(["synth-data", "--styles", "0", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["synth-data"])
    assert e.value.code == 2


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["synth-data", "--styles", "1", "--clips", "1", "--seconds", "1", "--out", "rel"]) == 0
    assert (tmp_path / "rel" / "manifest.json").exists()


# -- config --------------------------------------------------------------------

def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "tiny", "model": {"d_model": 16},
                               "training": {"lr": 0.5, "batch_size": 3}, "w": 2.0}))
    rc = cli.resolve_run_config(cfg, lr=0.25, d_model=None, n_heads=4)
    assert rc.training.lr == 0.25 and rc.training.batch_size == 3 and rc.w == 2.0
    m = rc.model_config()
    assert m.d_model == 16 and m.n_heads == 4 and m.decoder_depth == preset("tiny").decoder_depth
    assert cli.resolve_run_config().model_config() == preset("desk")


def test_large_preset_implies_long_schedule(tmp_path):
    assert cli.resolve_run_config(preset="large").training.T == 1000
    assert cli.resolve_run_config(preset="large", T=50).training.T == 50
    assert cli.resolve_run_config(preset="micro").training.T == 50


def test_config_errors(tmp_path):
    with pytest.raises(cli.UsageError, match="unknown config keys"):
        cli.resolve_run_config(None, colour="red")
    with pytest.raises(cli.UsageError, match="unknown preset"):
        cli.resolve_run_config(None, preset="giant")
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(cli.UsageError, match="line 1"):
        cli.resolve_run_config(bad)


# -- train ---------------------------------------------------------------------

def _train_cfg(tmp_path, **training):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"preset": "tiny", "model": {"max_frames": 30, "d_c": 16, "d_s": 10},
                             "window_s": 1.0, "stride_s": 0.5,
                             "training": {"batch_size": 4, "T": 5, "checkpoint_every": 2, **training}}))
    return p


def _losses(run):
    return [row.split(",") for row in (run / "loss.csv").read_text().splitlines()[1:]]


def test_train_and_resume(tmp_path, corpus):
    cfg = _train_cfg(tmp_path)
    full, part = tmp_path / "full", tmp_path / "part"
    assert cli.main(["train", "--config", str(cfg), "--data", str(corpus), "--out", str(full), "--iters", "4"]) == 0
    assert json.loads((full / "config.json").read_text())["training"]["max_iters"] == 4
    model, header = load_checkpoint(full / "model.npz")
    assert header["skeleton"]["names"][0] == "pelvis" and model.cfg.n_joints == 9

    assert cli.main(["train", "--config", str(cfg), "--data", str(corpus), "--out", str(part), "--iters", "2"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(corpus), "--out", str(part), "--iters", "4",
                     "--resume", str(part / "ckpt_000002.npz")]) == 0
    assert _losses(part) == _losses(full) and len(_losses(full)) == 4


def test_train_missing_data(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_train_reports_nan_iteration(tmp_path, corpus, caplog):
    cfg = _train_cfg(tmp_path, lr=1e30)
    with caplog.at_level(logging.ERROR, logger="dancediff"):
        rc = cli.main(["train", "--config", str(cfg), "--data", str(corpus), "--out", str(tmp_path / "o"),
                       "--iters", "20"])
    assert rc == 1
    assert "non-finite loss at iteration" in caplog.text


# -- generate ------------------------------------------------------------------

def test_generate_deterministic_and_logged(tmp_path, ckpt, caplog):
    audio = _audio_file(tmp_path / "a.json", 2)
    outs = []
    with caplog.at_level(logging.INFO, logger="dancediff"):
        for name in ("a", "b"):
            out = tmp_path / f"{name}.json"
            assert cli.main(["generate", "--checkpoint", str(ckpt), "--audio", str(audio), "--style", "3",
                             "--prompt-kind", "description", "--w", "1", "--out", str(out)]) == 0
            outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert "[description]" in caplog.text and "Lock" in caplog.text


def test_generate_w1_matches_conditional_sampler(tmp_path, ckpt):
    audio = _audio_file(tmp_path / "a.json", 2)
    out = tmp_path / "g.json"
    assert cli.main(["generate", "--checkpoint", str(ckpt), "--audio", str(audio), "--style", "2",
                     "--seed", "4", "--out", str(out)]) == 0
    model, _ = load_checkpoint(ckpt)
    c = make_audio(120, 2, 30, 16, seed=1)
    ref = guided_sample(c, encode_style("one_hot", 2, 10, 10), 1.0, model, make_schedule(5), 60, 4, 30)
    got = json.loads(out.read_text())
    np.testing.assert_array_equal(got["rotations_6d"], ref.rotations)


def test_generate_overflow_and_long_form(tmp_path, ckpt, caplog):
    audio = _audio_file(tmp_path / "a10.json", 10)
    out = tmp_path / "long.json"
    with caplog.at_level(logging.ERROR, logger="dancediff"):
        assert cli.main(["generate", "--checkpoint", str(ckpt), "--audio", str(audio), "--style", "1",
                         "--out", str(out)]) == 2
    assert "--long-form" in caplog.text
    assert cli.main(["generate", "--checkpoint", str(ckpt), "--audio", str(audio), "--style", "1",
                     "--long-form", "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["root_translation"]) == 300


def test_generate_bad_inputs(tmp_path, ckpt):
    audio = _audio_file(tmp_path / "a.json", 1)
    base = ["generate", "--checkpoint", str(ckpt), "--out", str(tmp_path / "o.json")]
    assert cli.main(base + ["--audio", str(tmp_path / "missing.json"), "--style", "1"]) == 2
    assert cli.main(base + ["--audio", str(audio), "--style", "Polka"]) == 2
    assert cli.main(base + ["--audio", str(audio)]) == 2


# -- edit ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def known_clip(tmp_path_factory):
    d = tmp_path_factory.mktemp("known")
    save_clip(synth_clip(2, 110, 5, 30, 3), d / "clip.json")
    return d


def _edit(tmp_path, ckpt, known_clip, kind, **extra):
    task = known_clip / f"{kind}.json"
    task.write_text(json.dumps({"kind": kind, "known_motion_path": "clip.json", "seed": 2, **extra}))
    out = tmp_path / f"{kind}_out.json"
    rc = cli.main(["edit", "--checkpoint", str(ckpt), "--task", str(task), "--out", str(out)])
    return rc, out, task


def test_edit_in_betweening(tmp_path, ckpt, known_clip):
    rc, out, _ = _edit(tmp_path, ckpt, known_clip, "in_betweening")
    assert rc == 0
    got, known = json.loads(out.read_text()), load_clip(known_clip / "clip.json").motion
    for key, arr in (("root_translation", known.root_translation), ("rotations_6d", known.rotations)):
        np.testing.assert_array_equal(np.asarray(got[key])[[0, -1]], arr[[0, -1]])
    grid = np.array(json.loads(out.with_suffix(".mask.json").read_text())["grid"])
    assert grid.shape == (150, 10) and grid[[0, -1]].all() and not grid[1:-1].any()


def test_edit_inpainting_keeps_105_frames(tmp_path, ckpt, known_clip):
    rc, out, task = _edit(tmp_path, ckpt, known_clip, "inpainting")
    assert rc == 0
    got = np.asarray(json.loads(out.read_text())["rotations_6d"])
    known = load_clip(known_clip / "clip.json").motion.rotations
    same = np.all(got == known, axis=(1, 2))
    mask = build_mask(load_task(task), 150, desk_skeleton())
    assert len(mask.known_frames()) == 105
    assert same[mask.known_frames()].all()


def test_edit_upper_body_keeps_lower_channels(tmp_path, ckpt, known_clip):
    rc, out, _ = _edit(tmp_path, ckpt, known_clip, "upper_body")
    assert rc == 0
    got = json.loads(out.read_text())
    known = load_clip(known_clip / "clip.json").motion
    lower = sorted(desk_skeleton().lower_body)
    np.testing.assert_array_equal(np.asarray(got["rotations_6d"])[:, lower], known.rotations[:, lower])
    np.testing.assert_array_equal(got["root_translation"], known.root_translation)


def test_edit_invalid_kind(tmp_path, ckpt, known_clip):
    assert _edit(tmp_path, ckpt, known_clip, "moonwalk")[0] == 2


# -- evaluate and render -----------------------------------------------------------

def _clip_dir(path, specs):
    path.mkdir(parents=True)
    for i, (style, seed) in enumerate(specs):
        save_clip(synth_clip(style, 120, 5, 30, seed), path / f"c{i:02d}.json")
    return path


def test_evaluate_self_is_zero(tmp_path):
    ref = _clip_dir(tmp_path / "ref", [(1, 0), (2, 1), (3, 2)])
    out = tmp_path / "report.json"
    assert cli.main(["evaluate", "--generated", str(ref), "--reference", str(ref), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["FID_k"] == pytest.approx(0, abs=1e-6) and rep["FID_g"] == pytest.approx(0, abs=1e-6)
    assert {"BeatAlign", "PFC", "FID_k", "FID_g", "Div_k", "Div_g"} <= set(rep)


def test_evaluate_twenty_clips_over_ten_styles_with_trials(tmp_path):
    ref = _clip_dir(tmp_path / "ref", [(s, s) for s in range(1, 11)])
    gen = tmp_path / "gen"
    for t in range(2):
        _clip_dir(gen / f"trial_{t}", [(s % 10 + 1, 100 + 20 * t + s) for s in range(20)])
    out = tmp_path / "r.json"
    assert cli.main(["evaluate", "--generated", str(gen), "--reference", str(ref), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["n_generated"] == 20 and rep["n_trials"] == 2 and np.isfinite(rep["BeatAlign"])


def test_evaluate_empty_dir(tmp_path):
    ref = _clip_dir(tmp_path / "ref", [(1, 0), (2, 1)])
    (tmp_path / "empty").mkdir()
    assert cli.main(["evaluate", "--generated", str(tmp_path / "empty"), "--reference", str(ref),
                     "--out", str(tmp_path / "r.json")]) == 2


def test_render_writes_one_svg_per_frame(tmp_path):
    save_clip(synth_clip(1, 120, 1, 30, 0), tmp_path / "m.json")
    assert cli.main(["render", "--motion", str(tmp_path / "m.json"), "--out", str(tmp_path / "frames")]) == 0
    frames = sorted((tmp_path / "frames").glob("*.svg"))
    assert len(frames) == 30
    svg = frames[0].read_text()
    assert svg.count("<circle") == 9 and svg.count('class="bone"') == 8
