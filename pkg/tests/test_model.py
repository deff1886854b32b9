import math
from dataclasses import replace

import pytest
import torch

from fptlab.model import (
    ACTIVATION_ALIASES,
    ExecMode,
    ModelConfig,
    ModelParams,
    OutlierSpec,
    forward,
    init_model,
    kurtosis,
    max_to_rms,
    random_tokens,
    resolve_locations,
    rms,
    rms_norm,
    rope_embed,
    standard_outlier_specs,
)
from fptlab.quant import fake_quantize, set_range_lp, RangeSettingSpec

F64 = torch.float64


def test_config_validation():
    with pytest.raises(ValueError, match="multiple"):
        ModelConfig(n_q_heads=8, n_kv_heads=3)
    with pytest.raises(ValueError, match="even"):
        ModelConfig(d_model=24, n_q_heads=8, d_head=3)
    with pytest.raises(ValueError, match="d_model"):
        ModelConfig(d_model=60)
    with pytest.raises(ValueError, match="positive"):
        ModelConfig(n_blocks=0)
    with pytest.raises(ValueError, match="rope_thetas"):
        ModelConfig(rope_thetas=(1.0,))
    cfg = ModelConfig(rope_thetas=(1.0, 0.5, 0.25, 0.125))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_default_thetas():
    th = ModelConfig().thetas
    assert th[0] == 1.0
    assert th[-1].item() == pytest.approx(1e4 ** (-6 / 8))


def test_rope_quarter_turn_and_norm():
    x = torch.tensor([[1.0, 0.0]], dtype=F64)
    out = rope_embed(x, position_offset=1, thetas=[math.pi / 2])
    torch.testing.assert_close(out, torch.tensor([[0.0, 1.0]], dtype=F64), atol=1e-15, rtol=0)
    y = torch.randn(7, 8, dtype=F64)
    r = rope_embed(y, 3, ModelConfig().thetas)
    torch.testing.assert_close(r.norm(dim=-1), y.norm(dim=-1))


def test_rope_inner_product_depends_on_relative_position():
    thetas = ModelConfig().thetas
    q, k = torch.randn(1, 8, dtype=F64), torch.randn(1, 8, dtype=F64)
    a = rope_embed(q, 5, thetas) @ rope_embed(k, 2, thetas).T
    b = rope_embed(q, 13, thetas) @ rope_embed(k, 10, thetas).T
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)
    with pytest.raises(ValueError):
        rope_embed(torch.zeros(2, 3, dtype=F64), 0, [1.0])


def test_rms_norm_with_scale_matches_unscaled():
    x = torch.randn(3, 5, 16, dtype=F64)
    s = torch.rand(3, 5, 1, dtype=F64) * 10 + 0.01
    gamma = torch.rand(16, dtype=F64)
    torch.testing.assert_close(rms_norm(s * x, gamma, scale=s), rms_norm(x, gamma), atol=1e-14, rtol=1e-13)


def test_forward_shapes_and_token_validation(default_model):
    cfg = default_model.config
    out = forward(default_model, random_tokens(cfg, 2, 9, 0), taps=["q", (1, "aw")])
    assert out.logits.shape == (2, 9, cfg.vocab)
    assert set(out.tape) == {(0, "q"), (1, "q"), (1, "aw")}
    assert out.tape[(1, "aw")].shape == (2, cfg.n_q_heads, 9, 9)
    assert forward(default_model, [1, 2, 3]).logits.shape == (1, 3, cfg.vocab)
    with pytest.raises(ValueError, match="token ids"):
        forward(default_model, [[0, cfg.vocab]])
    with pytest.raises(ValueError, match="unknown quantizer location"):
        forward(default_model, [[0]], taps=["zz"])
    with pytest.raises(ValueError):
        resolve_locations([(5, "q")], cfg.n_blocks)


def test_forward_is_causal(default_model):
    t = random_tokens(default_model.config, 1, 12, 1)
    t2 = t.clone()
    t2[0, 8:] = (t2[0, 8:] + 1) % default_model.config.vocab
    a, b = forward(default_model, t).logits, forward(default_model, t2).logits
    torch.testing.assert_close(a[:, :8], b[:, :8], atol=1e-12, rtol=0)
    assert not torch.allclose(a[:, 8:], b[:, 8:])


def test_gqa_equals_mha_with_repeated_kv_heads(small_config):
    gqa = init_model(small_config)
    c = small_config
    mha_cfg = replace(c, n_kv_heads=c.n_q_heads)

    def repeat_heads(w):
        return w.reshape(c.d_model, c.n_kv_heads, c.d_head).repeat_interleave(c.group_size, 1).reshape(c.d_model, -1)

    blocks = tuple(replace(b, wk=repeat_heads(b.wk), wv=repeat_heads(b.wv)) for b in gqa.blocks)
    mha = ModelParams(mha_cfg, gqa.embed, blocks, gqa.norm_final, gqa.head)
    t = random_tokens(c, 2, 10, 0)
    torch.testing.assert_close(forward(gqa, t).logits, forward(mha, t).logits, atol=1e-12, rtol=0)


def test_residual_scaling_matches_unrolled_norms(default_model):
    t = random_tokens(default_model.config, 2, 16, 3)
    plain = forward(default_model, t, taps=["ra", "rm"])
    scaled_params = replace(default_model, mode=ExecMode(residual_scaling=True))
    scaled = forward(scaled_params, t, taps=["ra", "rm"])
    torch.testing.assert_close(scaled.logits, plain.logits, atol=1e-10, rtol=0)
    residuals = [default_model.embed[t]]
    for i in range(default_model.config.n_blocks):
        residuals += [plain.tape[(i, "ra")], plain.tape[(i, "rm")]]
    assert len(scaled.residual_scales) == len(residuals)
    for s, x in zip(scaled.residual_scales, residuals):
        torch.testing.assert_close(s, 1.0 / rms(x), atol=1e-10, rtol=1e-12)
    # the carried residual is normalized
    torch.testing.assert_close(rms(scaled.tape[(0, "rm")]), torch.ones(2, 16, 1, dtype=F64))


def test_tape_records_value_before_its_quantizer(default_model):
    t = random_tokens(default_model.config, 2, 8, 5)
    tape = forward(default_model, t, taps=["q"]).tape
    grid = set_range_lp(tape[(0, "q")], RangeSettingSpec(), 4, symmetric=False)
    quantized = forward(default_model, t, taps=[(0, "q")], quantizers={(0, "q"): grid})
    torch.testing.assert_close(quantized.tape[(0, "q")], tape[(0, "q")], atol=0, rtol=0)
    assert not torch.equal(quantized.logits, forward(default_model, t).logits)
    fine = set_range_lp(tape[(0, "q")], RangeSettingSpec(), 16, symmetric=False)
    assert (fake_quantize(tape[(0, "q")], fine) - tape[(0, "q")]).abs().max() < 1e-3


def test_outlier_injection_touches_only_requested_channels(default_model):
    cfg = default_model.config
    spec = OutlierSpec((2, 9), 50.0, "Wu")
    inj = init_model(cfg, spec)
    for clean, dirty in zip(default_model.blocks, inj.blocks):
        diff_cols = (clean.wu != dirty.wu).any(0).nonzero().flatten().tolist()
        assert diff_cols == [2, 9]
        torch.testing.assert_close(dirty.wu[:, 2], clean.wu[:, 2] * 50)
        assert torch.equal(clean.wg, dirty.wg)
    rows = init_model(cfg, OutlierSpec((1,), 3.0, "Wd", axis="rows"))
    assert (rows.blocks[0].wd != default_model.blocks[0].wd).any(1).nonzero().flatten().tolist() == [1]
    with pytest.raises(ValueError):
        OutlierSpec((1,), 2.0, "Wx")


def test_standard_fixture_has_heavy_tailed_residual(fixture_model, default_model):
    t = random_tokens(fixture_model.config, 4, 32, 0)
    dirty = forward(fixture_model, t, taps=["rm", "mm"]).tape
    clean = forward(default_model, t, taps=["rm", "mm"]).tape
    assert max_to_rms(dirty[(1, "rm")]) > 3 * max_to_rms(clean[(1, "rm")])
    assert kurtosis(dirty[(0, "mm")]) > kurtosis(clean[(0, "mm")])
    assert len(standard_outlier_specs()) == 6


def test_params_check_and_dtype_cast(default_model):
    default_model.check()
    f32 = default_model.to(torch.float32)
    assert f32.dtype == torch.float32 and f32.config == default_model.config
    bad = default_model.replace_block(0, wq=torch.zeros(3, 3, dtype=F64))
    with pytest.raises(ValueError, match="wq"):
        bad.check()


def test_all_activation_aliases_are_tappable(default_model):
    out = forward(default_model, random_tokens(default_model.config, 1, 4, 0), taps=ACTIVATION_ALIASES)
    assert {a for _, a in out.tape} == set(ACTIVATION_ALIASES)
