from dataclasses import replace

import pytest
import torch

from fptlab.model import forward, init_model, max_to_rms, random_tokens, rope_embed
from fptlab.numerics import BlockHadamardPlan, SkewParam, lp_norm, matmul
from fptlab.optimize import OptimizeConfig, local_optimize_transforms
from fptlab.transforms import (
    PreRopeTransform,
    ResidualRotation,
    TransformSet,
    UpScaler,
    ValueTransform,
    apply_transforms,
    attach_online_hadamard,
    fold_norm_scales,
    merge_prerope,
    merge_rotation,
    merge_up_scaler,
    merge_value_transform,
    verify_preservation,
)

F64 = torch.float64


def _random_set(params, seed=0):
    c = params.config
    L = c.n_blocks
    return TransformSet(
        prerope=tuple(PreRopeTransform.random(c.n_kv_heads, c.d_head, seed + i) for i in range(L)),
        value=tuple(ValueTransform.random(c.n_kv_heads, c.d_head, seed + 10 + i) for i in range(L)),
        upscaler=tuple(UpScaler(torch.exp(torch.randn(c.d_ffn, dtype=F64))) for _ in range(L)),
        rotation=ResidualRotation.random(c.d_model, seed),
        hadamard=BlockHadamardPlan.for_dim(c.d_ffn),
        residual_scaling=True,
    )


def test_fold_norm_scales_preserves_function(normed_model, batches):
    folded = fold_norm_scales(normed_model)
    assert folded.norms_folded() and not normed_model.norms_folded()
    assert verify_preservation(normed_model, folded, batches) < 1e-12


@pytest.mark.parametrize("family", ["prerope", "value", "upscaler", "rotation", "hadamard", "resscale"])
def test_each_family_preserves_function(normed_model, batches, family):
    full = _random_set(normed_model)
    only = TransformSet(**{
        "prerope": {"prerope": full.prerope},
        "value": {"value": full.value},
        "upscaler": {"upscaler": full.upscaler},
        "rotation": {"rotation": full.rotation},
        "hadamard": {"hadamard": full.hadamard},
        "resscale": {"residual_scaling": True},
    }[family])
    assert verify_preservation(normed_model, apply_transforms(normed_model, only), batches) < 1e-12


def test_full_stack_preserves_function(normed_model, batches):
    out = apply_transforms(normed_model, _random_set(normed_model, seed=3))
    assert verify_preservation(normed_model, out, batches) < 1e-11
    assert out.mode.residual_scaling and out.mode.hadamard is not None


def test_identity_transforms_are_exact_no_ops(default_model):
    tset = TransformSet.identity(default_model, ["prerope", "value", "upscaler", "rotation"])
    out = apply_transforms(default_model, tset)
    for (name, a), (_, b) in zip(default_model.named_tensors(), out.named_tensors()):
        assert torch.equal(a, b), name


# -- negative controls: break one side of each merge ------------------------


def _neg_prerope(params):
    c = params.config
    t = PreRopeTransform.random(c.n_kv_heads, c.d_head, 1)
    b = params.blocks[0]
    return params.replace_block(0, wk=matmul(b.wk, t.key_full()))  # W_q left untouched


def _neg_value(params):
    c = params.config
    t = ValueTransform.random(c.n_kv_heads, c.d_head, 2)
    b = params.blocks[0]
    return params.replace_block(0, wv=b.wv @ torch.block_diag(*t.matrices))  # inverse omitted


def _neg_upscaler(params):
    s = torch.linspace(0.5, 2.0, params.config.d_ffn, dtype=F64)
    b = params.blocks[0]
    return params.replace_block(0, wu=b.wu * s)


def _neg_rotation(params):
    folded = fold_norm_scales(params)
    rotated = merge_rotation(folded, ResidualRotation.random(params.config.d_model, 0))
    return replace(rotated, head=folded.head)  # head not counter-rotated


def _neg_hadamard(params):
    plan = BlockHadamardPlan.for_dim(params.config.d_ffn)
    return replace(params, mode=replace(params.mode, hadamard=plan))  # H^T not merged into W_d


@pytest.mark.parametrize("breaker", [_neg_prerope, _neg_value, _neg_upscaler, _neg_rotation, _neg_hadamard])
def test_negative_controls_detected(default_model, batches, breaker):
    assert verify_preservation(default_model, breaker(default_model), batches) > 1e-2


def test_prerope_reflection_breaks_rope_commutation(default_model, batches):
    c = default_model.config
    refl = torch.tensor([[1.0, 0.0], [0.0, -1.0]], dtype=F64)
    b = default_model.blocks[0]
    tk = torch.block_diag(*([refl] * (c.n_kv_heads * c.d_head // 2)))
    tq = torch.block_diag(*([refl] * (c.n_q_heads * c.d_head // 2)))
    broken = default_model.replace_block(0, wq=matmul(b.wq, tq), wk=matmul(b.wk, tk))
    assert verify_preservation(default_model, broken, batches) > 1e-2


# -- RoPE commutation identity ----------------------------------------------


@pytest.mark.parametrize("m", [1, 2])
def test_prerope_inner_product_identity(m):
    g = torch.Generator().manual_seed(m)
    dh, H = 8, 2
    d = 12
    thetas = 10000.0 ** (-2.0 * torch.arange(dh // 2, dtype=F64) / dh)
    t = PreRopeTransform.random(H, dh, seed=m)
    wq = torch.randn(d, H * m * dh, dtype=F64, generator=g)
    wk = torch.randn(d, H * dh, dtype=F64, generator=g)
    xi, xj = torch.randn(1, d, dtype=F64, generator=g), torch.randn(1, d, dtype=F64, generator=g)
    i, j = 17, 5
    q = (xi @ wq).reshape(H * m, dh)
    k = (xj @ wk).reshape(H, dh).repeat_interleave(m, 0)
    q2 = (xi @ wq @ t.query_full(m)).reshape(H * m, dh)
    k2 = (xj @ wk @ t.key_full()).reshape(H, dh).repeat_interleave(m, 0)

    def scores(qq, kk):
        return (rope_embed(qq[:, None], i, thetas) * rope_embed(kk[:, None], j, thetas)).sum(-1)

    torch.testing.assert_close(scores(q2, k2), scores(q, k), atol=1e-10, rtol=0)


# -- validation -----------------------------------------------------------------


def test_merge_rotation_needs_folded_norms(normed_model):
    with pytest.raises(ValueError, match="folded"):
        merge_rotation(normed_model, ResidualRotation.identity(normed_model.config.d_model))


def test_value_transform_conditioning_guard(default_model):
    c = default_model.config
    m = torch.eye(c.d_head, dtype=F64).repeat(c.n_kv_heads, 1, 1)
    m[0, 0, 0] = 1e-12
    with pytest.raises(ValueError, match="ill-conditioned"):
        merge_value_transform(default_model, ValueTransform(m))
    with pytest.raises(ValueError, match="head layout"):
        merge_value_transform(default_model, ValueTransform.identity(c.n_kv_heads + 1, c.d_head))


def test_shape_and_value_validation(default_model):
    c = default_model.config
    with pytest.raises(ValueError):
        PreRopeTransform(torch.ones(2, 4, dtype=F64), torch.zeros(2, 3, dtype=F64))
    with pytest.raises(ValueError, match="nonzero"):
        PreRopeTransform(torch.zeros(2, 4, dtype=F64), torch.zeros(2, 4, dtype=F64))
    with pytest.raises(ValueError):
        merge_prerope(default_model, PreRopeTransform.identity(c.n_kv_heads, c.d_head + 2))
    with pytest.raises(ValueError):
        UpScaler(torch.zeros(3, dtype=F64))
    with pytest.raises(ValueError, match="d_ffn"):
        merge_up_scaler(default_model, UpScaler.identity(c.d_ffn + 1))
    with pytest.raises(ValueError, match="does not match"):
        attach_online_hadamard(default_model, BlockHadamardPlan.for_dim(16))
    once = attach_online_hadamard(default_model, BlockHadamardPlan.for_dim(c.d_ffn))
    with pytest.raises(ValueError, match="already"):
        attach_online_hadamard(once, BlockHadamardPlan.for_dim(c.d_ffn))
    with pytest.raises(ValueError, match="unknown transforms"):
        TransformSet.identity(default_model, ["flip"])


def test_verify_preservation_rejects_config_mismatch(default_model, small_config):
    with pytest.raises(ValueError, match="config"):
        verify_preservation(default_model, init_model(small_config), [[0, 1]])


def test_rotation_matrix_with_skew_is_orthogonal():
    r = ResidualRotation(torch.eye(4, dtype=F64), SkewParam(4, torch.linspace(-1, 1, 6, dtype=F64)))
    q = r.matrix()
    torch.testing.assert_close(q @ q.T, torch.eye(4, dtype=F64), atol=1e-14, rtol=0)
    h = ResidualRotation.hadamard(8).matrix()
    torch.testing.assert_close(h @ h.T, torch.eye(8, dtype=F64), atol=1e-14, rtol=0)


def test_hadamard_and_upscaler_flatten_outlier_fixture(fixture_model):
    """On the outlier fixture the optimized up-scaler + online Hadamard lowers
    the down-projection input's max/RMS and the merged weights' L4 norms."""
    tset = TransformSet.identity(fixture_model, ["upscaler", "hadamard"])
    tuned, _ = local_optimize_transforms(fixture_model, tset, OptimizeConfig(steps=100, lr=0.1))
    merged = apply_transforms(fixture_model, tuned)
    t = random_tokens(fixture_model.config, 4, 32, 9)
    before = forward(fixture_model, t, taps=["mm"]).tape
    after = forward(merged, t, taps=["mm"]).tape
    for i in range(fixture_model.config.n_blocks):
        assert max_to_rms(after[(i, "mm")]) < max_to_rms(before[(i, "mm")])
        l4_before = lp_norm(fixture_model.blocks[i].wu, 4) + lp_norm(fixture_model.blocks[i].wd, 4)
        l4_after = lp_norm(merged.blocks[i].wu, 4) + lp_norm(merged.blocks[i].wd, 4)
        assert l4_after < l4_before
    assert verify_preservation(fixture_model, merged, [t]) < 1e-12
