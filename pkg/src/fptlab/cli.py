"""Command line interface: ``fptlab gen-model | sensitivity | fit | compare | verify``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import click
import torch

from . import __version__
from .harness import PRESETS, ExperimentConfig, TransformQuantizer, StageError, build_grids, evaluate, sensitivity_sweep
from .io import load_model, save_grids, save_model, save_transforms
from .model import (
    ACTIVATION_ALIASES,
    ModelConfig,
    ffn_outlier_specs,
    init_model,
    random_tokens,
    residual_outlier_specs,
    standard_outlier_specs,
)
from .optimize import NumericalError
from .report import compare_reports, make_report, read_report, to_csv, write_report
from .transforms import apply_transforms, preservation_batches, verify_preservation
from .validation import check_bits, parse_list

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
_NUMERICAL = (NumericalError, FloatingPointError, ArithmeticError)


class _Failure(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _guard(fn):
    """Map library errors to the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except StageError as exc:
            code = EXIT_NUMERICAL if isinstance(exc.error, _NUMERICAL) else EXIT_INVALID
            raise _Failure(str(exc), code) from exc
        except _NUMERICAL as exc:
            raise _Failure(f"numerical failure: {exc}", EXIT_NUMERICAL) from exc
        except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
            raise _Failure(f"invalid input: {exc}", EXIT_INVALID) from exc

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def _experiment_config(config_path, **overrides) -> ExperimentConfig:
    d = _load_json(config_path)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


def _setting(text: str | None):
    if text is None:
        return None
    items = parse_list(text)
    return items[0] if len(items) == 1 and items[0] in PRESETS else list(items)


@click.group()
@click.version_option(__version__, prog_name="fptlab")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Function-preserving transforms and quantization experiments on toy models."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-model")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON model config.")
@click.option("--seed", type=int, default=None, help="Weight seed (overrides the config).")
@click.option("--outlier-channels", default="", help="Comma list of residual channels made massive.")
@click.option("--outlier-factor", type=float, default=50.0, show_default=True)
@click.option("--ffn-outlier-channels", default="", help="Comma list of gate/up channels scaled up.")
@click.option("--ffn-outlier-factor", type=float, default=6.0, show_default=True)
@click.option("--fixture", type=click.Choice(["clean", "standard"]), default="clean", show_default=True,
              help="'standard' injects the seeded outlier fixture used in the tests.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@_guard
def gen_model(config_path, seed, outlier_channels, outlier_factor, ffn_outlier_channels, ffn_outlier_factor, fixture, out):
    """Generate a toy model and write model.json / model.bin."""
    d = _load_json(config_path)
    d = d.get("model", d)
    if seed is not None:
        d["seed"] = seed
    cfg = ModelConfig.from_dict(d)
    specs = standard_outlier_specs() if fixture == "standard" else []
    res = tuple(int(c) for c in parse_list(outlier_channels))
    ffn = tuple(int(c) for c in parse_list(ffn_outlier_channels))
    if res:
        specs += residual_outlier_specs(res, outlier_factor)
    if ffn:
        specs += ffn_outlier_specs(ffn, ffn_outlier_factor)
    for s in specs:
        limit = cfg.d_ffn if s.target in ("Wu", "Wg") else cfg.d_model
        if any(not 0 <= c < limit for c in s.channels):
            raise ValueError(f"outlier channel out of range for {s.target} (size {limit})")
    params = init_model(cfg, specs or None)
    path = save_model(params, Path(out) / "model.json", extra={"outliers": [s.to_dict() for s in specs]})
    click.echo(f"wrote {path} (d_model={cfg.d_model}, blocks={cfg.n_blocks}, outlier specs={len(specs)})")


def _model_for(model_path, cfg: ExperimentConfig):
    """The model to work on and the config echo matching it."""
    if not model_path:
        return cfg.build_model(), cfg
    model = load_model(model_path)
    return model, replace(cfg, model=model.config, fixture="clean")


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), help="Model manifest (.json).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--bits", type=int, default=4, show_default=True)
@click.option("--locations", default=None, help="Comma list of aliases (default: all activation locations).")
@click.option("--out", type=click.Path(dir_okay=False), help="Report path (default: print to stdout).")
@_guard
def sensitivity(model_path, config_path, seed, bits, locations, out):
    """Quantize one location at a time and rank output deviations."""
    cfg = _experiment_config(config_path, seed=seed)
    check_bits(bits, allowed=(4, 8, 16))
    params, cfg = _model_for(model_path, cfg)
    params = params.to(torch.float64)
    locs = parse_list(locations) or ACTIVATION_ALIASES
    rows = sensitivity_sweep(
        params, bits, locs, seed=cfg.seed, n_calibration=cfg.n_calibration, n_eval=cfg.n_eval, seq_len=cfg.seq_len,
        p=cfg.range_p,
    )
    quartile = math.ceil(len(rows) / 4)
    worst = [r["location"] for r in sorted(rows, key=lambda r: r["rank"])[:quartile]]
    report = make_report(
        "sensitivity",
        f"sensitivity-int{bits}",
        cfg.seed,
        {**cfg.to_dict(), "bits": bits, "locations": list(locs), "model_file": model_path},
        results=rows,
        worst_quartile=worst,
    )
    _emit(report, out)


def _emit(report, out):
    if out:
        write_report(report, out)
        click.echo(f"wrote {out}")
    else:
        from .io import dumps_json

        click.echo(dumps_json(report), nl=False)


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), help="Model manifest (.json).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--bits-w", type=int, default=None)
@click.option("--bits-a", type=int, default=None)
@click.option("--bits-kv", type=int, default=None)
@click.option("--setting", default=None, help="linears_kv | plus_bmm | all_except_residual | comma list of aliases.")
@click.option("--transforms", default=None, help="Comma list from prerope,value,upscaler,rotation,hadamard,resscale.")
@click.option("--local-steps", type=int, default=None)
@click.option("--e2e-steps", type=int, default=None)
@click.option("--name", default=None, help="Report name (column header in compare).")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@_guard
def fit(model_path, config_path, seed, bits_w, bits_a, bits_kv, setting, transforms, local_steps, e2e_steps, name, out):
    """Run the full pipeline and write the report plus fitted artifacts."""
    cfg = _experiment_config(
        config_path, seed=seed, bits_w=bits_w, bits_a=bits_a, bits_kv=bits_kv, setting=_setting(setting),
        transforms=None if transforms is None else list(parse_list(transforms)),
        local_steps=local_steps, e2e_steps=e2e_steps,
    )
    model, cfg = _model_for(model_path, cfg)
    report, est = run_fit(model, cfg, name=name, model_file=model_path)
    out = Path(out)
    write_report(report, out / "report.json")
    student = est.student_
    save_model(apply_transforms(est.teacher_, student.transforms), out / "model.json")
    save_transforms(student.transforms, out / "transforms.json")
    save_grids(student.grids, out / "grids.json")
    m = report["metrics"]
    click.echo(f"wrote {out}: jsd {m['jsd_before']:.6g} -> {m['jsd_after']:.6g}, preservation {m['preservation']:.3g}")


def default_name(cfg: ExperimentConfig) -> str:
    setting = cfg.setting if isinstance(cfg.setting, str) else "+".join(cfg.setting)
    stack = "+".join(cfg.transforms) or "none"
    return f"{setting}-W{cfg.bits_w}A{cfg.bits_a}KV{cfg.bits_kv}-{stack}"


def run_fit(model, cfg: ExperimentConfig, name: str | None = None, model_file: str | None = None):
    """Fit on seeded calibration data and evaluate on a held-out stream."""
    n_train = max(cfg.n_calibration, cfg.batch)
    X = random_tokens(model.config, n_train, cfg.seq_len, cfg.seed)
    X_eval = random_tokens(model.config, cfg.n_eval, cfg.seq_len, cfg.seed + 1_000_003)
    est = TransformQuantizer.from_config(model, cfg).fit(X)
    before, after = est.evaluate(X_eval, initial=True), est.evaluate(X_eval)
    rtn_grids = build_grids(
        est.teacher_.to(est.student_.dtype), X[: cfg.n_calibration], est.aliases_, cfg.bits_a, cfg.bits_kv,
        cfg.bits_w if cfg.quantize_weights else None, p=cfg.range_p,
    )
    rtn = evaluate(est.teacher_, est.teacher_.to(est.student_.dtype), rtn_grids, X_eval)
    metrics = {
        "jsd_rtn": rtn["jsd"],
        "mse_rtn": rtn["mse"],
        "jsd_before": before["jsd"],
        "mse_before": before["mse"],
        "jsd_after": after["jsd"],
        "mse_after": after["mse"],
        "preservation": est.preservation_,
    }
    report = make_report(
        "fit",
        name or default_name(cfg),
        cfg.seed,
        {**cfg.to_dict(), "model_file": model_file},
        metrics=metrics,
        locations=est.quant_errors(X_eval),
        traces={k: v.to_dict() for k, v in sorted(est.traces_.items())},
    )
    return report, est


@main.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Output prefix; writes <out>.csv and <out>.json (default: CSV to stdout).")
@_guard
def compare(reports, out):
    """Tabulate reports side by side (columns ordered by report name)."""
    table = compare_reports([read_report(p) for p in reports])
    if out:
        Path(out + ".csv").parent.mkdir(parents=True, exist_ok=True)
        Path(out + ".csv").write_text(to_csv(table))
        write_report(table, out + ".json")
        click.echo(f"wrote {out}.csv and {out}.json")
    else:
        click.echo(to_csv(table), nl=False)


@main.command()
@click.argument("original", type=click.Path(exists=True, dir_okay=False))
@click.argument("transformed", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--batches", type=int, default=8, show_default=True)
@click.option("--seq-len", type=int, default=32, show_default=True)
@click.option("--tol", type=float, default=1e-7, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report path (default: stdout).")
@_guard
def verify(original, transformed, seed, batches, seq_len, tol, out):
    """Check that two model files compute the same function (exit 3 if not)."""
    a, b = load_model(original).to(torch.float64), load_model(transformed).to(torch.float64)
    dev = verify_preservation(a, b, preservation_batches(a, n_batches=batches, seq_len=seq_len, seed=seed))
    report = make_report(
        "verify", "verify", seed,
        {"original": original, "transformed": transformed, "batches": batches, "seq_len": seq_len, "tol": tol},
        deviation=dev, passed=dev < tol,
    )
    _emit(report, out)
    if not dev < tol:
        raise _Failure(f"preservation deviation {dev:.3g} exceeds {tol:g}", EXIT_NUMERICAL)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
