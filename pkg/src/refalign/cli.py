"""Command-line surface: data generation, training, alignment, refinement,
evaluation and the HTTP service.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model/numeric error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .alignment import (
    GridSearchTable,
    PostprocessParams,
    aggregate,
    align_single,
    load_attention_records,
    postprocess,
    resize_mask,
)
from .data import DataConfig, gen_benchmark, read_benchmark, write_benchmark
from .errors import DataError, EmptyRegionError, ModelError, NumericError, RefalignError
from .images import (
    heat_to_png_bytes,
    load_image,
    load_mask,
    overlay_region,
    save_image,
)
from .model import ModelConfig, RefinerModel
from .pipeline import RefineConfig, calibration_grid_search, evaluate, refine
from .rng import Rng
from .training import TrainConfig, train


@click.group()
def cli():
    """Reference-guided artifact refinement toolkit."""


def _load_model(ckpt: str) -> RefinerModel:
    model, _ = RefinerModel.load(ckpt)
    model.check_finite()
    return model


def _region_payload(region) -> dict:
    return {
        "cells": [[int(r), int(c)] for r, c in np.argwhere(region.region)],
        "area": region.area,
        "source": {"t": region.source[0], "l": region.source[1]},
    }


@cli.command("gen-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--cases", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--token-grid", default=8, show_default=True)
def gen_data(out, cases, seed, token_grid):
    """Generate a synthetic benchmark directory with a JSON manifest."""
    cfg = DataConfig(token_grid=token_grid)
    bench = gen_benchmark(cases, Rng(seed), cfg)
    manifest = write_benchmark(bench, out)
    click.echo(f"wrote {len(bench)} cases to {manifest}")


@cli.command("train")
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", default=2000, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--scenes", default=256, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--lr-unet", default=1e-4, show_default=True)
@click.option("--lr-adapter", default=4e-4, show_default=True)
@click.option("--mode-mix", default=0.5, show_default=True)
@click.option("--cond-dropout", default=0.1, show_default=True)
@click.option("--resume", type=click.Path(exists=True), default=None, help="checkpoint to continue from")
def train_cmd(out, steps, batch_size, scenes, seed, lr_unet, lr_adapter, mode_mix, cond_dropout, resume):
    """Train the shared denoiser + encoder on synthetic scenes."""
    cfg = TrainConfig(
        batch_size=batch_size, steps=steps, n_scenes=scenes, seed=seed,
        lr_unet=lr_unet, lr_adapter=lr_adapter, mode_mix=mode_mix, cond_dropout=cond_dropout,
    )
    model = None
    start_step = 0
    if resume:
        model, meta = RefinerModel.load(resume)
        start_step = meta["step"]
        click.echo(f"resuming from step {start_step}")
    result = train(cfg, model=model, out_dir=out, start_step=start_step, progress=True)
    click.echo(
        f"finished at step {start_step + steps}: loss {result.losses[-1]:.4f} "
        f"({result.wall_seconds:.0f}s); checkpoint at {result.checkpoint_path}"
    )


@cli.command("align")
@click.option("--image", "image_path", type=click.Path(exists=True))
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", type=click.Path(exists=True))
@click.option("--ckpt", type=click.Path(exists=True))
@click.option("--attn-dir", type=click.Path(exists=True), help="standalone mode: use RBAT attention dumps")
@click.option("--t", "t_step", default=0, show_default=True)
@click.option("--l", "l_block", default=None, type=int, help="defaults to the shipped optimum")
@click.option("--theta", default=0.4, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
def align_cmd(image_path, mask_path, ref_path, ckpt, attn_dir, t_step, l_block, theta, out, seed):
    """Extract the correspondence region; writes heat PNG + region JSON."""
    params = PostprocessParams(threshold_frac=theta)
    mask = load_mask(mask_path)
    if attn_dir:
        records = load_attention_records(attn_dir)
        wanted = [r for r in records if r.t == t_step and (l_block is None or r.l == l_block)]
        if not wanted:
            raise DataError(f"no dump for t={t_step}, l={l_block} in {attn_dir}")
        record = wanted[0]
        cmap = aggregate(record, resize_mask(mask, record.d))
        region = postprocess(cmap, params)
    else:
        if not (image_path and ref_path and ckpt):
            raise click.UsageError("--image, --ref and --ckpt are required without --attn-dir")
        model = _load_model(ckpt)
        l_block = RefineConfig().l_align if l_block is None else l_block
        region, cmap = align_single(
            load_image(image_path), mask, load_image(ref_path), model, t_step, l_block, params, seed,
        )
    Path(out).write_bytes(heat_to_png_bytes(cmap.heat, upscale=16))
    region_path = Path(out).with_suffix(".region.json")
    region_path.write_text(json.dumps(_region_payload(region), indent=2))
    click.echo(f"wrote {out} and {region_path}")


@cli.command("grid-search")
@click.option("--bench", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--cases", default=12, show_default=True, help="calibration cases to average over")
@click.option("--heatmap", type=click.Path(), default=None, help="also render Gamma as a grayscale PNG")
@click.option("--seed", default=0, show_default=True)
def grid_search_cmd(bench, ckpt, out, cases, heatmap, seed):
    """Run the full (t, l) search; emits Gamma as a T x L CSV."""
    model = _load_model(ckpt)
    pool = read_benchmark(bench)[:cases]
    gamma = calibration_grid_search(pool, model, seed=seed)
    GridSearchTable(gamma=gamma).to_csv(out)
    table = GridSearchTable(gamma=gamma)
    if heatmap:
        Path(heatmap).write_bytes(heat_to_png_bytes(gamma, upscale=8))
    click.echo(f"gamma {gamma.shape} -> {out}; argmax t={table.argmax[0]} l={table.argmax[1]} "
               f"iou={gamma[table.argmax]:.3f}")


@cli.command("refine")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--overlay", type=click.Path(), default=None, help="write the region overlay on the reference")
@click.option("--t", "t_step", default=None, type=int)
@click.option("--l", "l_block", default=None, type=int)
@click.option("--guidance", default=None, type=float)
@click.option("--seed", default=0, show_default=True)
def refine_cmd(image_path, mask_path, ref_path, ckpt, out, overlay, t_step, l_block, guidance, seed):
    """Two-stage refinement of the masked artifact region."""
    model = _load_model(ckpt)
    base = RefineConfig()
    cfg = RefineConfig(
        t_align=base.t_align if t_step is None else t_step,
        l_align=base.l_align if l_block is None else l_block,
        guidance_scale=base.guidance_scale if guidance is None else guidance,
        seed=seed,
    )
    result = refine(load_image(image_path), load_mask(mask_path), load_image(ref_path), model, cfg)
    save_image(out, result.image)
    if result.degraded:
        click.echo("warning: empty correspondence region; used the full reference", err=True)
    if overlay and result.region is not None:
        save_image(overlay, overlay_region(load_image(ref_path), result.region.region))
    click.echo(f"wrote {out}")


@cli.command("eval")
@click.option("--bench", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--t", "t_step", default=None, type=int)
@click.option("--l", "l_block", default=None, type=int)
@click.option("--guidance", default=None, type=float)
@click.option("--seed", default=0, show_default=True)
def eval_cmd(bench, ckpt, out, t_step, l_block, guidance, seed):
    """Score alignment + refinement over a benchmark manifest."""
    model = _load_model(ckpt)
    base = RefineConfig()
    cfg = RefineConfig(
        t_align=base.t_align if t_step is None else t_step,
        l_align=base.l_align if l_block is None else l_block,
        guidance_scale=base.guidance_scale if guidance is None else guidance,
        seed=seed,
    )
    cases = read_benchmark(bench)
    report = evaluate(cases, model, cfg, out_dir=out)
    click.echo(
        f"median mIoU {report.median_miou:.3f} (baseline {report.median_baseline:.3f}); "
        f"identity wins {report.identity_win_rate:.0%}; "
        f"background intact: {report.background_intact_all}"
    )


@cli.command("serve")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--port", default=8741, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--static", "static_dir", type=click.Path(), default=None, help="UI dist directory")
def serve_cmd(ckpt, port, host, static_dir):
    """Start the HTTP service backing the interactive UI."""
    import uvicorn

    from .service import create_app

    model = _load_model(ckpt)
    app = create_app(model, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


def main() -> int:
    try:
        cli.main(standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 1
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except (DataError, EmptyRegionError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except (ModelError, NumericError) as exc:
        click.echo(f"model error: {exc}", err=True)
        return 3
    except RefalignError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
