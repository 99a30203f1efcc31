import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_model
from dancediff.denoiser import (PRESETS, NonFiniteLossError, SequenceTooLongError, denoise, film,
                                gradients, load_checkpoint, preset, read_checkpoint, save_checkpoint,
                                style_modulation)
from dancediff.skeleton import desk_skeleton

t64 = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))  # noqa: E731


def test_style_modulation_oracle():
    # FC(s) = [5, 5] via zero weight and bias [5, 5]
    out = style_modulation(t64([[3.0, 4.0]]), t64([1.0]), t64([[0.0], [0.0]]), t64([5.0, 5.0]), 1.0)
    np.testing.assert_allclose(out.numpy(), [[3.0, 4.0]], rtol=0, atol=1e-12)


def test_style_modulation_cancels_on_unit_rows():
    z = t64(np.random.default_rng(0).normal(size=(5, 4)))
    z = z / z.norm(dim=-1, keepdim=True)
    r = 2.5
    out = style_modulation(z, t64([0.0]), t64(np.zeros((4, 1))), t64(np.full(4, r)), r)
    np.testing.assert_allclose(out.numpy(), z.numpy(), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(z=arrays(np.float64, (3, 4), elements=st.floats(-100, 100)),
       c=st.floats(1e-3, 1e3), seed=st.integers(0, 100))
def test_style_modulation_scale_invariance(z, c, seed):
    g = np.random.default_rng(seed)
    args = (t64(g.normal(size=5)), t64(g.normal(size=(4, 5))), t64(g.normal(size=4)), 1.3)
    norms = np.linalg.norm(z, axis=-1)
    a = style_modulation(t64(z), *args).numpy()
    b = style_modulation(t64(c * z), *args).numpy()
    # rows the guard touches in either call are the only exception
    ok = (norms >= 1e-8) & (c * norms >= 1e-8)
    np.testing.assert_allclose(b[ok], a[ok], rtol=1e-12, atol=1e-12)


def test_style_modulation_zero_row_is_zero():
    out = style_modulation(t64(np.zeros((2, 3))), t64([1.0]), t64(np.ones((3, 1))), t64(np.ones(3)), 1.0)
    assert torch.all(out == 0)


def test_film_identity_and_shift():
    g = np.random.default_rng(1)
    z, te = t64(g.normal(size=(6, 4))), t64(g.normal(size=4))
    zero_w, zero_b = t64(np.zeros((4, 4))), t64(np.zeros(4))
    np.testing.assert_array_equal(film(z, te, zero_w, zero_b, zero_w, zero_b).numpy(), z.numpy())
    b = t64([1.0, -2.0, 0.5, 3.0])
    np.testing.assert_allclose(film(z, te, zero_w, zero_b, zero_w, b).numpy(), z.numpy() + b.numpy(), atol=0)


def test_film_matches_elementwise_oracle():
    g = np.random.default_rng(2)
    z, te = g.normal(size=(5, 3)), g.normal(size=3)
    sw, sb, hw, hb = g.normal(size=(3, 3)), g.normal(size=3), g.normal(size=(3, 3)), g.normal(size=3)
    out = film(t64(z), t64(te), t64(sw), t64(sb), t64(hw), t64(hb)).numpy()
    ref = np.empty_like(z)
    for f in range(5):
        for k in range(3):
            scale = sum(sw[k, i] * te[i] for i in range(3)) + sb[k]
            shift = sum(hw[k, i] * te[i] for i in range(3)) + hb[k]
            ref[f, k] = z[f, k] * (1 + scale) + shift
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("F", [1, 7, 16])
def test_denoise_shape_and_purity(F):
    m = tiny_model()
    g = np.random.default_rng(F)
    D, cfg = m.cfg.feature_width, m.cfg
    x, c, s = g.normal(size=(F, D)), g.normal(size=(F, cfg.d_c)), g.normal(size=cfg.d_s)
    a = denoise(x, 3, c, s, m, T=50)
    assert a.shape == (F, D)
    np.testing.assert_array_equal(a, denoise(x, 3, c, s, m, T=50))
    assert not np.array_equal(a, denoise(x, 3, None, s, m, T=50))


def test_denoise_rejects_bad_inputs():
    m = tiny_model()
    D = m.cfg.feature_width
    with pytest.raises(SequenceTooLongError, match="long-form"):
        denoise(np.zeros((17, D)), 1, None, None, m)
    with pytest.raises(ValueError, match="outside"):
        denoise(np.zeros((4, D)), 0, None, None, m, T=50)


def test_presets_resolve():
    assert set(PRESETS) >= {"tiny", "micro", "desk", "large"}
    assert preset("large").d_model == 512 and preset("large").decoder_depth == 8
    assert preset("micro", d_model=16).d_model == 16
    with pytest.raises(KeyError):
        preset("huge")


def test_checkpoint_roundtrip(tmp_path):
    m = tiny_model(torch.float32, seed=3)
    path = tmp_path / "m.npz"
    save_checkpoint(path, m, desk_skeleton(), {"note": 1}, {"extra/thing": np.arange(3)})
    back, header = load_checkpoint(path)
    assert header["extra"] == {"note": 1} and header["config"]["d_model"] == 8
    assert back.dtype == torch.float32
    np.testing.assert_array_equal(header["arrays"]["extra/thing"], np.arange(3))
    x = np.random.default_rng(0).normal(size=(5, m.cfg.feature_width))
    np.testing.assert_array_equal(m.predict(x, 2), back.predict(x, 2))


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "junk.npz"
    np.savez(p, __header__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError, match="not a"):
        read_checkpoint(p)


def _l_d(model, batch):
    x, t = batch
    return ((model(x, t) - x) ** 2).sum(-1).mean()


def test_zero_residual_gives_zero_head_bias_gradient():
    m = tiny_model()
    x = torch.zeros(2, 4, m.cfg.feature_width, dtype=torch.float64)
    with torch.no_grad():
        m.out_proj.weight.zero_()
        m.out_proj.bias.zero_()
    g = gradients(_l_d, m, (x, torch.tensor([1, 2])))
    assert np.all(g["out_proj.bias"] == 0)


def test_style_fc_gradient_nonzero():
    m = tiny_model()
    g = np.random.default_rng(0)
    x = torch.as_tensor(g.normal(size=(2, 4, m.cfg.feature_width)))
    s = torch.as_tensor(g.normal(size=(2, m.cfg.d_s)))

    def loss(model, batch):
        return ((model(batch, torch.tensor([1, 2]), style=s) - batch) ** 2).sum()

    grads = gradients(loss, m, x)
    assert np.abs(grads["blocks.0.style.fc.weight"]).max() > 0
    assert np.abs(grads["blocks.0.style.fc.bias"]).max() > 0


def test_nonfinite_loss_names_parameter():
    m = tiny_model()
    with torch.no_grad():
        m.out_proj.bias[0] = np.nan
    x = torch.zeros(1, 3, m.cfg.feature_width, dtype=torch.float64)
    with pytest.raises(NonFiniteLossError, match="out_proj.bias"):
        gradients(_l_d, m, (x, torch.tensor([1])))
