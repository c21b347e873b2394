"""Command-line driver for corpus simulation, training and sweeps.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 I/O error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .corpus import generate_corpus, read_manifest, write_corpus
from .features import lfbe, mel_bank, write_lfbe
from .audio import read_wav
from .net import load_model
from .pipeline import (
    ConfigError,
    ExperimentRunner,
    StageError,
    derive_seed,
    emit_report,
    load_config,
)

__all__ = ["cli", "main"]


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="TOML experiment config; defaults apply when omitted.")
@click.option("--seed", type=int, default=None, help="Override the global seed.")
@click.option("--out", type=click.Path(), default=None, help="Override the output directory.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Worker processes for sweep cells.")
@click.pass_context
def cli(ctx, config_path, seed, out, jobs):
    """Teacher-student noise-robustness experiments at desk scale."""
    cfg = load_config(config_path, seed=seed, out=out)
    ctx.obj = {"cfg": cfg, "jobs": max(1, jobs)}


def _runner(ctx) -> ExperimentRunner:
    return ExperimentRunner(ctx.obj["cfg"])


@cli.command()
@click.option("--split", type=click.Choice(["train", "test"]), default="train", show_default=True)
@click.option("--copy", "copy_idx", type=int, default=0, show_default=True,
              help="Noisy-side redraw index over the same clean audio.")
@click.pass_context
def simulate(ctx, split, copy_idx):
    """Generate a corpus split and write WAVs, labels and the manifest."""
    cfg = ctx.obj["cfg"]
    c = cfg.corpus
    sim = c.sim_config(derive_seed(cfg.seed, "corpus", split), test=split == "test")
    n = c.n_test_utts if split == "test" else c.n_utts
    corpus = generate_corpus(sim, n, c.n_classes, stream_tag=split, copy=copy_idx)
    suffix = f"-copy{copy_idx}" if copy_idx else ""
    out = Path(cfg.output.dir) / f"corpus-{split}{suffix}"
    manifest = write_corpus(corpus, out)
    click.echo(f"wrote {n} utterances to {out} (manifest: {manifest})")


@cli.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True,
              help="manifest.jsonl produced by 'simulate'.")
@click.pass_context
def features(ctx, manifest_path):
    """Extract LFBE features for every WAV referenced by a manifest."""
    cfg = ctx.obj["cfg"]
    f = cfg.features
    bank = mel_bank(cfg.corpus.sample_rate, f.n_fft, f.n_mels, f.fmin, f.fmax)
    root = Path(manifest_path).parent
    feat_dir = root / "feats"
    feat_dir.mkdir(exist_ok=True)
    count = 0
    for row in read_manifest(manifest_path):
        for kind in ("clean", "noisy"):
            buf = read_wav(root / row[f"{kind}_path"])
            fm = lfbe(buf, bank, f.win_s, f.hop_s, f.n_fft)
            write_lfbe(feat_dir / f"{row['id']}.{kind}.lfbe", fm)
            count += 1
    click.echo(f"wrote {count} feature files to {feat_dir}")


@cli.command("train-teacher")
@click.pass_context
def train_teacher(ctx):
    """Train the clean-speech baseline on the transcribed subset."""
    path = _runner(ctx).teacher_stage()
    click.echo(f"teacher model: {path / 'model.dnet'}")


@cli.command("train-multicond")
@click.pass_context
def train_multicond(ctx):
    """Train the multi-condition system on transcribed noisy audio."""
    path = _runner(ctx).multicond_stage()
    click.echo(f"multi-condition model: {path / 'model.dnet'}")


@cli.command("soft-targets")
@click.option("--k", "k_label", default=None, help="Entries kept per frame (int or 'max').")
@click.pass_context
def soft_targets(ctx, k_label):
    """Export the teacher's sparse soft-target stream."""
    runner = _runner(ctx)
    cfg = ctx.obj["cfg"]
    label = cfg.codec.k if k_label is None else (k_label if k_label == "max" else int(k_label))
    path = runner.stgt_stage(cfg.resolve_k(label))
    click.echo(f"soft targets: {path / 'targets.stgt'}")


@cli.command("train-student")
@click.option("--temperature", type=float, default=None, help="Distillation temperature.")
@click.option("--k", "k_label", default=None, help="Entries kept per frame (int or 'max').")
@click.option("--multiplier", type=int, default=1, show_default=True,
              help="Noisy-side data multiplier.")
@click.pass_context
def train_student(ctx, temperature, k_label, multiplier):
    """Distill a student from the teacher's soft targets on noisy audio."""
    cfg = ctx.obj["cfg"]
    t = cfg.codec.temperature if temperature is None else temperature
    label = cfg.codec.k if k_label is None else (k_label if k_label == "max" else int(k_label))
    path = _runner(ctx).student_stage(t, label, multiplier=multiplier)
    click.echo(f"student model: {path / 'model.dnet'}")


@cli.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True,
              help="Path to a .dnet model file.")
@click.pass_context
def eval_cmd(ctx, model_path):
    """Score a model on the held-out clean and noisy test sets."""
    runner = _runner(ctx)
    scores = runner.evaluate_model(Path(model_path).parent) if Path(model_path).name == "model.dnet" \
        else _eval_file(runner, Path(model_path))
    for key in ("clean_ter", "noisy_ter", "clean_acc", "noisy_acc"):
        click.echo(f"{key} = {scores[key]:.6f}")


def _eval_file(runner: ExperimentRunner, path: Path) -> dict:
    from .metrics import evaluate

    params, _ = load_model(path)
    labels = runner._load_labels("test")
    tokens = runner._load_tokens("test")
    out = {}
    for kind in ("clean", "noisy"):
        feats = runner._load_feats("test", kind)
        report = evaluate(params, list(zip(feats, labels, tokens)))
        out[f"{kind}_ter"] = report.token_error_rate
        out[f"{kind}_acc"] = report.frame_accuracy
    return out


@cli.command("sweep-tk")
@click.pass_context
def sweep_tk_cmd(ctx):
    """Train one student per (temperature, k) cell and emit grid.csv."""
    cfg = ctx.obj["cfg"]
    runner = _runner(ctx)
    rows = runner.sweep_tk(jobs=ctx.obj["jobs"])
    paths = emit_report(rows, cfg.output.dir, kind="grid")
    click.echo(f"wrote {paths[0]} ({len(rows)} cells)")


@cli.command("sweep-size")
@click.pass_context
def sweep_size_cmd(ctx):
    """Train students on multiplied noisy redraws and emit size.csv."""
    cfg = ctx.obj["cfg"]
    runner = _runner(ctx)
    rows = runner.sweep_size()
    paths = emit_report(rows, cfg.output.dir, kind="size")
    click.echo(f"wrote {paths[0]} ({len(rows)} multipliers)")


@cli.command()
@click.pass_context
def report(ctx):
    """Run the full experiment protocol and emit tables.csv + report.json."""
    cfg = ctx.obj["cfg"]
    runner = _runner(ctx)
    run_report = runner.run()
    paths = emit_report(run_report, cfg.output.dir)
    click.echo("system,clean_ter,noisy_ter,clean_werr,noisy_werr")
    for row in run_report.rows:
        click.echo(f"{row.system},{row.clean_ter:.4f},{row.noisy_ter:.4f},"
                   f"{row.clean_werr:+.2f},{row.noisy_werr:+.2f}")
    click.echo(f"wrote {', '.join(str(p) for p in paths)}")


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 2
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except StageError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except OSError as exc:
        click.echo(f"i/o error: {exc}", err=True)
        return 4


if __name__ == "__main__":
    sys.exit(main())
