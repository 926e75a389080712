"""Command-line entry points.

    cotmisr train  --config exp.cfg --out runs/exp1
    cotmisr eval   --checkpoint runs/exp1/checkpoint.cotm --data data/ --band ALL
    cotmisr infer  --checkpoint runs/exp1/checkpoint.cotm --scene-dir data/NIR/imgset0000 --out sr.png
    cotmisr params --config exp.cfg
    cotmisr ablate --suite arch --out runs/ablate
    cotmisr synth  --out data/synth --scenes 20

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Identical inputs and --out paths always reproduce identical
output bytes.
"""

from __future__ import annotations

import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import imageio.v3 as iio
import numpy as np

from cotmisr import data as D
from cotmisr import metrics as MX
from cotmisr import model as M
from cotmisr import train as TR
from cotmisr.config import BAND_CHOICES, ExperimentConfig
from cotmisr.errors import ConfigError, DataError, NumericalError

DATA_ROOT_ENV = "COTMISR_DATA_ROOT"

ARCH_SUITE = ("8c4t", "4c4t4c", "(2c1t)x4")
ATTENTION_SUITE = (("ca+sa", True, True), ("ca", True, False), ("sa", False, True))


@click.group()
def cli():
    """Multi-image super-resolution experiments at desk scale."""


def _load_config(path, seed=None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(path)
    if seed is not None:
        cfg.train.seed = seed
    env_root = os.environ.get(DATA_ROOT_ENV)
    if env_root:
        cfg.data.root = env_root
    return cfg.validate()


def _load_band_stacks(root, band) -> list[D.LrStack]:
    dirs = D.list_scene_dirs(root, band)
    if not dirs:
        raise DataError(f"{root}: no scenes found for band {band}")
    return [D.load_scene(p) for p in dirs]


def _split_stacks(stacks, manifest: D.SplitManifest):
    by_id = {s.scene_id: s for s in stacks}
    missing = [sid for sid in manifest.train + manifest.val if sid not in by_id]
    if missing:
        raise DataError(f"split manifest names unknown scenes: {missing}")
    return [by_id[s] for s in manifest.train], [by_id[s] for s in manifest.val]


def _write_band_report(path, model_rows, bicubic_rows) -> None:
    """Per-method, per-band aggregate table (bicubic row always present)."""

    def cells(rows):
        out = []
        for band in BAND_CHOICES:
            member = [s for _, b, s in rows if band == "ALL" or b == band]
            if member:
                out.append(repr(float(np.mean([s.cpsnr for s in member]))))
                out.append(repr(float(np.mean([s.cssim for s in member]))))
            else:
                out.extend(["", ""])
        return out

    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["method", "nir_cpsnr", "nir_cssim", "red_cpsnr", "red_cssim", "all_cpsnr", "all_cssim"]
        )
        writer.writerow(["bicubic"] + cells(bicubic_rows))
        writer.writerow(["cot-misr"] + cells(model_rows))


def _write_eval_outputs(out_dir: Path, model_rows, bicubic_rows) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    MX.write_scene_scores_csv(out_dir / "scores.csv", model_rows)
    MX.write_scene_scores_csv(out_dir / "bicubic_scores.csv", bicubic_rows)
    _write_band_report(out_dir / "report.csv", model_rows, bicubic_rows)


@cli.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(), help="Experiment config file.")
@click.option("--seed", type=int, default=None, help="Override train.seed from the config.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--resume", is_flag=True, help="Continue a previous run in --out.")
def cmd_train(config_path, seed, out_dir, resume):
    """Train a model and write checkpoint, history, and validation report."""
    cfg = _load_config(config_path, seed)
    if not cfg.data.root:
        raise ConfigError("data.root is empty (set it in the config or via COTMISR_DATA_ROOT)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    stacks = _load_band_stacks(cfg.data.root, cfg.data.band)
    manifest = D.split_scenes(
        [s.scene_id for s in stacks], seed=cfg.data.split_seed, ratio=cfg.data.split_ratio
    )
    manifest.save(out_dir / "split.txt")
    train_stacks, val_stacks = _split_stacks(stacks, manifest)

    config_text = cfg.to_text()
    (out_dir / "config.cfg").write_text(config_text)
    result = TR.fit(
        train_stacks, val_stacks, cfg.model, cfg.train, out_dir, config_text=config_text, resume=resume
    )

    _, arrays = M.load_checkpoint(result.checkpoint)
    params = M.params_from_arrays(arrays)
    val_scenes = [TR.prepare_scene(s, cfg.model, cfg.train.min_clearance) for s in val_stacks]
    _, _, model_rows = TR.evaluate_scenes(val_scenes, params, cfg.model)
    _, _, bicubic_rows = TR.bicubic_baseline_scores(val_stacks, cfg.model.r)
    _write_eval_outputs(out_dir, model_rows, bicubic_rows)

    click.echo(f"trained {result.history_rows[-1]['epoch'] + 1} epochs")
    click.echo(f"final val cPSNR {result.final_val_cpsnr:.4f} dB, cSSIM {result.final_val_cssim:.6f}")
    click.echo(f"checkpoint: {result.checkpoint}")


@cli.command("eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_root", required=True, type=click.Path())
@click.option("--band", type=click.Choice(BAND_CHOICES), default="ALL", show_default=True)
@click.option("--split", "split_path", type=click.Path(), default=None,
              help="Score only the [val] scenes of this manifest.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Report directory (default: <checkpoint dir>/eval).")
def cmd_eval(ckpt_path, data_root, band, split_path, out_dir):
    """Score a checkpoint against ground truth; always includes the
    bicubic baseline row."""
    config_text, arrays = M.load_checkpoint(ckpt_path)
    cfg = ExperimentConfig.from_text(config_text).validate()
    params = M.params_from_arrays(arrays)

    stacks = _load_band_stacks(data_root, band)
    if split_path:
        manifest = D.SplitManifest.load(split_path)
        stacks = [s for s in stacks if s.scene_id in set(manifest.val)]
        if not stacks:
            raise DataError(f"{split_path}: no [val] scenes of band {band} found under {data_root}")

    scenes = [TR.prepare_scene(s, cfg.model, cfg.train.min_clearance) for s in stacks]
    mean_cpsnr, mean_cssim, model_rows = TR.evaluate_scenes(scenes, params, cfg.model)
    _, _, bicubic_rows = TR.bicubic_baseline_scores(stacks, cfg.model.r)

    out_dir = Path(out_dir) if out_dir else Path(ckpt_path).parent / "eval"
    _write_eval_outputs(out_dir, model_rows, bicubic_rows)
    click.echo(f"scored {len(model_rows)} scenes ({band})")
    click.echo(f"model   cPSNR {mean_cpsnr:.4f} dB, cSSIM {mean_cssim:.6f}")
    click.echo(f"reports: {out_dir}")


@cli.command("infer")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--scene-dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_infer(ckpt_path, scene_dir, out_path):
    """Super-resolve one scene directory to a 16-bit PNG."""
    config_text, arrays = M.load_checkpoint(ckpt_path)
    cfg = ExperimentConfig.from_text(config_text).validate()
    params = M.params_from_arrays(arrays)
    stack = D.load_scene(scene_dir)
    scene = TR.prepare_scene(stack, cfg.model, cfg.train.min_clearance)
    sr = M.super_resolve(scene.frames, params, cfg.model)[0]
    sr_u16 = np.round(np.clip(sr, 0.0, 1.0) * D.U16_MAX).astype(np.uint16)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    iio.imwrite(out_path, sr_u16)
    click.echo(f"wrote {out_path} ({sr_u16.shape[0]}x{sr_u16.shape[1]})")


@cli.command("params")
@click.option("--config", "config_path", required=True, type=click.Path())
def cmd_params(config_path):
    """Print per-group and total learnable parameter counts."""
    cfg = _load_config(config_path)
    params = M.init_params(cfg.model, seed=cfg.train.seed)
    encoder = params.count("encoder")
    cot = params.count("cot")
    click.echo(f"encoder: {encoder}")
    click.echo(f"cot: {cot}")
    click.echo(f"total: {encoder + cot}")


def _ablate_variants(suite, base_model):
    if suite == "arch":
        return [(arch, base_model.with_arch(arch)) for arch in ARCH_SUITE]
    variants = []
    for name, use_ca, use_sa in ATTENTION_SUITE:
        lrca = replace(base_model.lrca, use_ca=use_ca, use_sa=use_sa)
        variants.append((name, replace(base_model, lrca=lrca)))
    return variants


@cli.command("ablate")
@click.option("--suite", type=click.Choice(["arch", "attention"]), required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--arch", default="(2c1t)x4", show_default=True, help="Architecture for the attention suite.")
@click.option("--steps", default=60, show_default=True, help="Optimizer steps per variant.")
@click.option("--scenes", default=8, show_default=True)
@click.option("--hr-size", default=48, show_default=True)
@click.option("--k", default=5, show_default=True)
@click.option("--c-e", default=16, show_default=True)
@click.option("--heads", default=2, show_default=True)
@click.option("--ff-dim", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_ablate(suite, out_dir, arch, steps, scenes, hr_size, k, c_e, heads, ff_dim, seed):
    """Run a variant grid on a synthetic dataset and emit a comparison CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = out_dir / "synth"
    D.synthesize_dataset(
        data_dir, n_scenes=scenes, hr_size=hr_size, r=3, k=k, shift_px=1, noise_sigma=0.01, seed=seed
    )
    stacks = _load_band_stacks(data_dir, "ALL")
    manifest = D.split_scenes([s.scene_id for s in stacks], seed=seed, ratio=0.75)
    train_stacks, val_stacks = _split_stacks(stacks, manifest)

    base_model = M.CotConfig(
        k=k, c_e=c_e, r=3, arch=arch,
        tblock=M.TBlockConfig(layers=1, heads=heads, ff_dim=ff_dim),
    )
    rows = []
    for name, model_cfg in _ablate_variants(suite, base_model):
        model_cfg.validate()
        train_cfg = TR.TrainConfig(batch_size=2, epochs=10_000, max_steps=steps, seed=seed)
        run_dir = out_dir / "".join(ch if ch.isalnum() else "-" for ch in name).strip("-")
        result = TR.fit(train_stacks, val_stacks, model_cfg, train_cfg, run_dir)
        _, arrays = M.load_checkpoint(result.checkpoint)
        params = M.params_from_arrays(arrays)
        val_scenes = [TR.prepare_scene(s, model_cfg, train_cfg.min_clearance) for s in val_stacks]
        cpsnr_mean, cssim_mean, _ = TR.evaluate_scenes(val_scenes, params, model_cfg)
        rows.append((name, M.count_params(params), cpsnr_mean, cssim_mean))
        click.echo(f"{name}: params={rows[-1][1]} cPSNR={cpsnr_mean:.4f} cSSIM={cssim_mean:.6f}")

    with open(out_dir / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant", "params", "cpsnr", "cssim"])
        for name, count, psnr_v, ssim_v in rows:
            writer.writerow([name, count, repr(psnr_v), repr(ssim_v)])
    click.echo(f"wrote {out_dir / 'ablation.csv'}")


@cli.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--scenes", default=20, show_default=True)
@click.option("--hr-size", default=96, show_default=True)
@click.option("--r", default=3, show_default=True)
@click.option("--k", default=9, show_default=True)
@click.option("--shift-px", default=2, show_default=True)
@click.option("--noise-sigma", default=0.01, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_synth(out_dir, scenes, hr_size, r, k, shift_px, noise_sigma, seed):
    """Generate a synthetic PROBA-V-layout dataset."""
    written = D.synthesize_dataset(
        out_dir, n_scenes=scenes, hr_size=hr_size, r=r, k=k,
        shift_px=shift_px, noise_sigma=noise_sigma, seed=seed,
    )
    click.echo(f"wrote {len(written)} scenes under {out_dir}")


def main(argv=None) -> int:
    """Run the CLI, mapping package errors onto documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return 2
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return 2
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 3
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 4
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
