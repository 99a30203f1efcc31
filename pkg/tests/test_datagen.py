import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dancediff.datagen import (ClipFormatError, UnknownStyleError, clip_to_dict, load_clip, load_corpus,
                               save_clip, slice_windows, synth_clip, synth_corpus, window_count)
from dancediff.metrics import geometric_features


@pytest.fixture(scope="module")
def clip13():
    return synth_clip(1, 120, seconds=13, fps=30, seed=5)


def test_synth_is_deterministic():
    a, b = synth_clip(2, 110, 3, 30, 9), synth_clip(2, 110, 3, 30, 9)
    assert json.dumps(clip_to_dict(a)) == json.dumps(clip_to_dict(b))


def test_styles_share_audio_but_not_motion():
    a, b = synth_clip(1, 120, 4, 30, 3), synth_clip(2, 120, 4, 30, 3)
    np.testing.assert_array_equal(a.audio.features, b.audio.features)
    ga, gb = geometric_features(a.motion, a.skeleton), geometric_features(b.motion, b.skeleton)
    assert np.linalg.norm(ga - gb) > 0


def test_beats_half_second_apart_at_120_bpm():
    c = synth_clip(3, 120, 4, 30, 0)
    np.testing.assert_allclose(np.diff(c.audio.beat_times), 0.5, rtol=0, atol=1e-12)


def test_synth_motion_is_plausible():
    c = synth_clip(4, 100, 6, 30, 1)
    rate = c.motion.contacts.mean()
    assert 0.05 < rate < 0.95
    assert c.motion.rotations.shape == (180, 9, 6)


def test_unknown_style():
    with pytest.raises(UnknownStyleError):
        synth_clip(0)
    with pytest.raises(UnknownStyleError):
        synth_clip(5, n_styles=4)


@pytest.mark.parametrize("duration, window, stride, expected", [
    (13, 5, 0.5, 17), (5, 5, 0.5, 1), (5, 5, 2.5, 1), (7, 5, 2.5, 1), (4.9, 5, 0.5, 0),
])
def test_window_counts(duration, window, stride, expected):
    assert window_count(duration, window, stride) == expected


@settings(max_examples=200)
@given(window=st.floats(0.5, 10), extra=st.floats(0, 30), stride=st.floats(0.1, 5))
def test_window_count_formula(window, extra, stride):
    duration = window + extra
    n = window_count(duration, window, stride)
    assert n >= 1
    # the last window fits and one more would not (up to float slack)
    assert window + (n - 1) * stride <= duration + 1e-6
    assert window + n * stride > duration - 1e-6
    assert n == math.floor((duration - window) / stride + 1e-9) + 1


def test_slice_windows(clip13):
    w = slice_windows(clip13, 5, 0.5)
    assert len(w) == 17 and not w.too_short
    assert all(c.motion.n_frames == 150 and c.audio.n_frames == 150 for c in w)
    np.testing.assert_array_equal(w[3].motion.root_translation, clip13.motion.root_translation[45:195])
    short = slice_windows(synth_clip(1, 120, 4, 30, 0), 5, 0.5)
    assert len(short) == 0 and short.too_short


def test_save_load_roundtrip(tmp_path):
    c = synth_clip(2, 90, 2, 30, 4)
    save_clip(c, tmp_path / "c.json")
    back = load_clip(tmp_path / "c.json")
    assert back.skeleton == c.skeleton and back.style_id == 2 and back.seed == 4
    np.testing.assert_array_equal(back.motion.features(), c.motion.features())
    np.testing.assert_array_equal(back.audio.features, c.audio.features)


def _write_variant(tmp_path, edit):
    d = clip_to_dict(synth_clip(1, 120, 1, 30, 0))
    edit(d)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    return p


def test_missing_field_named(tmp_path):
    p = _write_variant(tmp_path, lambda d: d.pop("rotations_6d"))
    with pytest.raises(ClipFormatError, match="rotations_6d"):
        load_clip(p)
    p = _write_variant(tmp_path, lambda d: d["audio"].pop("beat_times"))
    with pytest.raises(ClipFormatError, match="audio.beat_times"):
        load_clip(p)


def test_fractional_contact_rejected(tmp_path):
    def half(d):
        d["contacts"][0][0] = 0.5
    with pytest.raises(ClipFormatError, match="contacts"):
        load_clip(_write_variant(tmp_path, half))


def test_malformed_json_reports_position(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"fps": 30,\n "skeleton": }')
    with pytest.raises(ClipFormatError, match="line 2"):
        load_clip(p)


def test_corpus(tmp_path):
    m = synth_corpus(tmp_path / "a", n_styles=2, clips_per_style=4, seconds=1, seed=3)
    synth_corpus(tmp_path / "b", n_styles=2, clips_per_style=4, seconds=1, seed=3)
    assert len(m["clips"]) == 8
    for e in m["clips"]:
        assert (tmp_path / "a" / e["path"]).read_bytes() == (tmp_path / "b" / e["path"]).read_bytes()
    assert [e["split"] for e in m["clips"][:4]] == ["train"] * 3 + ["test"]
    assert m["train_stride_s"] == 0.5 and m["test_stride_s"] == 2.5
    assert len(load_corpus(tmp_path / "a", "train")) == 6
    assert len(load_corpus(tmp_path / "a", "test")) == 2
