"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The end-of-run summary (see ``conftest.py``) prints ``criterion N: PASS|FAIL``
for every criterion that ran.
"""
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from click.testing import CliRunner

import fptlab.transforms as T
from fptlab.cli import main, run_fit
from fptlab.harness import ExperimentConfig, sensitivity_sweep
from fptlab.model import ACTIVATION_ALIASES, ExecMode, ModelConfig, forward, init_model, random_tokens, rms, rope_embed
from fptlab.numerics import BlockHadamardPlan, SkewParam, finite_diff_grad, hadamard_apply, hadamard_op_count
from fptlab.optimize import OptimizeConfig, local_objective_rotation, local_optimize_transforms
from fptlab.quant import INF, RangeSettingSpec, quant_error, set_range_lp
from fptlab.transforms import (
    PreRopeTransform,
    ResidualRotation,
    TransformSet,
    UpScaler,
    ValueTransform,
    apply_transforms,
    fold_norm_scales,
    verify_preservation,
)

F64 = torch.float64
FAMILIES = ("prerope", "value", "upscaler", "rotation", "hadamard", "resscale")


def _random_set(params, names=FAMILIES, seed=0):
    c = params.config
    L = c.n_blocks
    g = torch.Generator().manual_seed(seed)
    return TransformSet(
        prerope=tuple(PreRopeTransform.random(c.n_kv_heads, c.d_head, seed + i) for i in range(L)) if "prerope" in names else None,
        value=tuple(ValueTransform.random(c.n_kv_heads, c.d_head, seed + 10 + i) for i in range(L)) if "value" in names else None,
        upscaler=tuple(UpScaler(torch.exp(torch.randn(c.d_ffn, dtype=F64, generator=g))) for _ in range(L)) if "upscaler" in names else None,
        rotation=ResidualRotation.random(c.d_model, seed) if "rotation" in names else None,
        hadamard=BlockHadamardPlan.for_dim(c.d_ffn) if "hadamard" in names else None,
        residual_scaling="resscale" in names,
    )


# -- 1 ----------------------------------------------------------------------------


def test_criterion_1_function_preservation(normed_model, batches, acceptance_log):
    start = time.perf_counter()
    devs = {f: verify_preservation(normed_model, apply_transforms(normed_model, _random_set(normed_model, (f,))), batches) for f in FAMILIES}
    devs["full stack"] = verify_preservation(normed_model, apply_transforms(normed_model, _random_set(normed_model)), batches)
    elapsed = time.perf_counter() - start
    worst = max(devs.values())
    ok = worst < 1e-7 and elapsed < 10
    acceptance_log(1, ok, f"max deviation {worst:.2e} over {len(devs)} cases in {elapsed:.1f}s")
    assert worst < 1e-7, devs
    assert elapsed < 10


# -- 2 ----------------------------------------------------------------------------


def test_criterion_2_rope_commutation_identity(acceptance_log):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for draw in range(100):
        m = int(rng.integers(1, 3))
        H = int(rng.integers(1, 4))
        dh = 2 * int(rng.integers(1, 5))
        d = int(rng.integers(4, 17))
        thetas = torch.as_tensor(rng.uniform(1e-3, 1.5, dh // 2), dtype=F64)
        i, j = (int(p) for p in rng.integers(0, 512, 2))
        wq = torch.as_tensor(rng.standard_normal((d, H * m * dh)), dtype=F64)
        wk = torch.as_tensor(rng.standard_normal((d, H * dh)), dtype=F64)
        xi = torch.as_tensor(rng.standard_normal((1, d)), dtype=F64)
        xj = torch.as_tensor(rng.standard_normal((1, d)), dtype=F64)
        t = PreRopeTransform.random(H, dh, seed=draw)

        def scores(q_w, k_w):
            q = (xi @ q_w).reshape(H * m, dh)
            k = (xj @ k_w).reshape(H, dh).repeat_interleave(m, 0)
            return (rope_embed(q, i, thetas) * rope_embed(k, j, thetas)).sum(-1)

        lhs = scores(wq @ t.query_full(m), wk @ t.key_full())
        rhs = scores(wq, wk)
        worst = max(worst, float((lhs - rhs).abs().max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 5
    acceptance_log(2, ok, f"max |lhs - rhs| {worst:.2e} over 100 draws in {elapsed:.2f}s")
    assert worst < 1e-10 and elapsed < 5


# -- 3 ----------------------------------------------------------------------------


def test_criterion_3_residual_scaling_recursion(acceptance_log):
    worst_scale, worst_logit = 0.0, 0.0
    for n_blocks in (1, 2, 3, 4):
        params = init_model(ModelConfig(n_blocks=n_blocks, seed=n_blocks))
        t = random_tokens(params.config, 2, 24, n_blocks)
        plain = forward(params, t, taps=["ra", "rm"])
        scaled = forward(replace(params, mode=ExecMode(residual_scaling=True)), t)
        unrolled = [params.embed[t]]
        for i in range(n_blocks):
            unrolled += [plain.tape[(i, "ra")], plain.tape[(i, "rm")]]
        assert len(scaled.residual_scales) == 2 * n_blocks + 1
        for s, x in zip(scaled.residual_scales, unrolled):
            worst_scale = max(worst_scale, float((s - 1.0 / rms(x)).abs().max()))
        worst_logit = max(worst_logit, float((scaled.logits - plain.logits).abs().max()))
    ok = worst_scale < 1e-10 and worst_logit < 1e-8
    acceptance_log(3, ok, f"scale error {worst_scale:.2e}, logits on/off {worst_logit:.2e} (1-4 blocks)")
    assert ok


# -- 4 ----------------------------------------------------------------------------


def test_criterion_4_block_hadamard(acceptance_log):
    worst_fast, worst_orth, cost_ok = 0.0, 0.0, True
    for dim in (4, 8, 172, 256, 768):
        plan = BlockHadamardPlan.for_dim(dim)
        dense = plan.matrix()
        x = torch.as_tensor(np.random.default_rng(dim).standard_normal((16, dim)), dtype=F64)
        worst_fast = max(worst_fast, float((hadamard_apply(plan, x) - x @ dense).abs().max()))
        worst_orth = max(worst_orth, float((dense @ dense.T - torch.eye(dim, dtype=F64)).abs().max()))
        bound = 2 * sum(b * math.log2(b) for b in plan.blocks)
        cost_ok &= hadamard_op_count(plan) <= bound
    ok = worst_fast < 1e-12 and worst_orth < 1e-12 and cost_ok
    acceptance_log(4, ok, f"fast vs dense {worst_fast:.2e}, orthogonality {worst_orth:.2e}, op-count bound {'met' if cost_ok else 'violated'}")
    assert ok


# -- 5 ----------------------------------------------------------------------------


def test_criterion_5_l3_range_setting(acceptance_log):
    rng = np.random.default_rng(5)
    not_worse, strictly = 0, 0
    for k in range(20):
        df = (1.5, 2.0, 3.0, 4.0)[k % 4]
        x = torch.as_tensor(rng.standard_t(df, 4096) * rng.uniform(0.1, 10), dtype=F64)
        symmetric = k % 2 == 0
        l3 = set_range_lp(x, RangeSettingSpec(p=3), 4, symmetric=symmetric)
        mm = set_range_lp(x, RangeSettingSpec(p=INF), 4, symmetric=symmetric)
        e3, em = quant_error(x, l3, 3).lp, quant_error(x, mm, 3).lp
        not_worse += e3 <= em
        strictly += e3 < em
    ok = not_worse == 20 and strictly >= 18
    acceptance_log(5, ok, f"L3 <= minmax on {not_worse}/20, strictly better on {strictly}/20")
    assert ok


# -- 6 ----------------------------------------------------------------------------


def test_criterion_6_local_optimization(fixture_model, acceptance_log):
    tset = TransformSet.identity(fixture_model, ["rotation"])
    _, traces = local_optimize_transforms(fixture_model, tset, OptimizeConfig(p=4, steps=200, lr=0.1))
    tr = traces["rotation"]
    reduction = 1 - tr.values[-1] / tr.initial
    vals = [tr.initial] + tr.values
    monotone = all(b <= a for a, b in zip(vals, vals[1:]))

    # autograd gradient versus central differences at 10 random points (16 random coordinates each)
    folded = fold_norm_scales(fixture_model)
    n = folded.config.d_model
    rng = np.random.default_rng(6)
    worst_rel = 0.0
    for _ in range(10):
        x0 = torch.as_tensor(rng.normal(0, 0.1, n * (n - 1) // 2), dtype=F64)
        idx = rng.choice(x0.numel(), 16, replace=False)

        def f(x):
            return local_objective_rotation(folded, ResidualRotation(torch.eye(n, dtype=F64), SkewParam(n, x)), 4.0)

        x = x0.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(f(x), x)

        def f_sub(v):
            y = x0.clone()
            y[idx] = torch.as_tensor(v, dtype=F64)
            return f(y).item()

        fd = finite_diff_grad(f_sub, x0[idx].numpy(), h=1e-6)
        worst_rel = max(worst_rel, float(np.linalg.norm(g[idx].numpy() - fd) / np.linalg.norm(fd)))
    ok = reduction >= 0.2 and monotone and len(tr.values) <= 200 and worst_rel < 1e-4
    acceptance_log(
        6, ok, f"objective -{100 * reduction:.1f}% in {len(tr.values)} steps, monotone={monotone}, grad rel err {worst_rel:.1e}"
    )
    assert ok


# -- 7 ----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_end_to_end_efficacy(acceptance_log):
    base = ExperimentConfig(fixture="standard", setting="linears_kv", bits_w=4, bits_a=4, bits_kv=4)
    runs = {
        "full": replace(base, transforms=("prerope", "value", "upscaler", "rotation", "hadamard")),
        "grid_only": base,
        "none": replace(base, e2e_steps=0),
    }
    start = time.perf_counter()
    jsd = {}
    for name, cfg in runs.items():
        report, _ = run_fit(cfg.build_model(), cfg, name=name)
        jsd[name] = report["metrics"]["jsd_after"]
    elapsed = time.perf_counter() - start
    ok = jsd["full"] < jsd["grid_only"] and jsd["full"] < jsd["none"] and elapsed < 15 * 60
    detail = ", ".join(f"{k} {v:.5f}" for k, v in jsd.items())
    acceptance_log(7, ok, f"held-out JSD {detail} ({elapsed:.0f}s)")
    assert ok


# -- 8 ----------------------------------------------------------------------------


def test_criterion_8_sensitivity_worst_quartile(fixture_model, acceptance_log):
    rows = sensitivity_sweep(fixture_model, bits=4, locations=ACTIVATION_ALIASES)
    k = math.ceil(len(rows) / 4)
    worst = {r["location"] for r in rows if r["rank"] <= k}
    ok = {"d", "mm", "ra", "rm"} <= worst
    ranked = [r["location"] for r in sorted(rows, key=lambda r: r["rank"])]
    acceptance_log(8, ok, f"worst quartile (top {k}) = {ranked[:k]}")
    assert ok


# -- 9 ----------------------------------------------------------------------------


def test_criterion_9_cli_determinism(tmp_path, acceptance_log):
    small = {"d_model": 16, "n_blocks": 1, "n_q_heads": 4, "n_kv_heads": 2, "d_head": 4, "d_ffn": 24, "vocab": 31, "seed": 3}
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": small, "n_calibration": 8, "batch": 2, "seq_len": 16, "n_eval": 2,
                               "local_steps": 10, "e2e_steps": 6, "transforms": ["prerope", "value", "upscaler", "rotation", "hadamard"]}))
    runner = CliRunner()

    def run(args):
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output

    d = tmp_path / "run"
    model = str(d / "gen" / "model.json")
    files = ["gen/model.json", "gen/model.bin", "sens.json", "fit/report.json", "fit/model.bin", "fit/transforms.bin",
             "fit/grids.bin", "fit/grids.json", "fit8/report.json", "cmp.csv", "cmp.json", "verify.json"]
    snapshots = []
    for _ in range(2):  # identical command lines, identical output paths
        run(["gen-model", "--config", str(cfg), "--ffn-outlier-channels", "3", "--out", str(d / "gen")])
        run(["sensitivity", "--model", model, "--config", str(cfg), "--seed", "7", "--out", str(d / "sens.json")])
        run(["fit", "--model", model, "--config", str(cfg), "--seed", "7", "--out", str(d / "fit")])
        run(["fit", "--model", model, "--config", str(cfg), "--seed", "7", "--bits-a", "8", "--out", str(d / "fit8")])
        run(["compare", str(d / "fit" / "report.json"), str(d / "fit8" / "report.json"), "--out", str(d / "cmp")])
        run(["verify", model, str(d / "fit" / "model.json"), "--out", str(d / "verify.json")])
        snapshots.append({f: (d / f).read_bytes() for f in files})
    differ = [f for f in files if snapshots[0][f] != snapshots[1][f]]
    ok = not differ
    acceptance_log(9, ok, f"{len(files) - len(differ)}/{len(files)} artifacts byte-identical across repeated runs")
    assert ok, differ


# -- 10 ---------------------------------------------------------------------------


def _omit_prerope_inverse(params, t, layer=None):
    b = params.blocks[layer]
    return params.replace_block(layer, wk=b.wk @ t.key_full())


def _omit_value_inverse(params, t, layer=None):
    b = params.blocks[layer]
    return params.replace_block(layer, wv=b.wv @ torch.block_diag(*t.matrices))


def _omit_upscaler_inverse(params, t, layer=None):
    b = params.blocks[layer]
    return params.replace_block(layer, wu=b.wu * t.s)


_real_merge_rotation = T.merge_rotation
_real_attach_hadamard = T.attach_online_hadamard


def _omit_rotation_inverse(params, t):
    return replace(_real_merge_rotation(params, t), head=params.head)


def _omit_hadamard_inverse(params, plan):
    return replace(params, mode=replace(params.mode, hadamard=plan))


def _omit_norm_fold(params):
    one = torch.ones_like(params.norm_final)
    for i in range(params.config.n_blocks):
        params = params.replace_block(i, norm_attn=one, norm_mlp=one)
    return replace(params, norm_final=one)


BROKEN = {
    "prerope": ("merge_prerope", _omit_prerope_inverse),
    "value": ("merge_value_transform", _omit_value_inverse),
    "upscaler": ("merge_up_scaler", _omit_upscaler_inverse),
    "rotation": ("merge_rotation", _omit_rotation_inverse),
    "hadamard": ("attach_online_hadamard", _omit_hadamard_inverse),
    "norm-fold": ("fold_norm_scales", _omit_norm_fold),
}


def test_criterion_10_negative_controls(normed_model, batches, monkeypatch, acceptance_log):
    devs = {}
    for family, (attr, broken) in BROKEN.items():
        names = ("rotation",) if family == "norm-fold" else (family,)
        with monkeypatch.context() as mp:
            mp.setattr(T, attr, broken)
            merged = T.apply_transforms(normed_model, _random_set(normed_model, names))
        devs[family] = verify_preservation(normed_model, merged, batches)
    # sanity: the intact merges pass the same check
    intact = verify_preservation(normed_model, apply_transforms(normed_model, _random_set(normed_model)), batches)
    ok = min(devs.values()) > 1e-2 and intact < 1e-7
    acceptance_log(10, ok, f"smallest broken-merge deviation {min(devs.values()):.2e} over {len(devs)} merges; intact {intact:.1e}")
    assert ok, devs
