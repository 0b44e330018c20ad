import functools
import json
import logging
import sys
from pathlib import Path

import click

from config import Config, configure_logging
from services.experiment_config import parse_config
from services.experiment_service import DATASET_FILE, experiment_service
from utils.error_handlers import exit_code_for, format_error_for_logging

logger = logging.getLogger(__name__)

CONFIG_HELP = """
Configs are flat JSON objects with dotted keys; unknown keys are rejected.

\b
Top level:  name, seed, seeds, profile (desk|full), output_dir, parallel
recipe.*:   name, num_classes, num_modalities, input_dims, informative_dims,
            informative_classes, shared_dims, prototype_scale, shared_scale,
            noise_std, corruption_rate, corruption_std, train_samples,
            test_samples, modality_scales, seed
model.*:    hidden_dims, feature_dim, input_dims, num_classes, num_modalities
plan.*:     mode, modality, epochs, warmup_epochs, fusion_epochs, batch_size,
            dim_metric (prediction|l2norm), recompute_partition_every
plan.loss.*:             lambda_s, lambda_D, lambda_kd, T_duc, T_kd, T_lw
plan.optimizer.*:        lr, lr_decayed, decay_epoch, momentum, weight_decay
plan.fusion_optimizer.*: same keys as plan.optimizer

Exit codes: 0 success, 1 validation failure, 2 runtime or numeric failure.
"""


def guarded(command):
    """Convert service exceptions into logged errors and the documented exit codes"""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except Exception as e:
            logger.error(format_error_for_logging(e, command.__name__))
            click.echo(f"error: {e}", err=True)
            sys.exit(exit_code_for(e))

    return wrapper


class ExperimentGroup(click.Group):
    """Command group that reports click usage errors with exit code 1, like other validation failures"""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise


def _load(config_path: str, seed):
    config = parse_config(config_path)
    return config.with_seed(seed) if seed is not None else config


@click.group(cls=ExperimentGroup, epilog=CONFIG_HELP)
@click.option('--log-level', default=None, help='Override LOG_LEVEL for this invocation.')
def cli(log_level):
    """Detached multimodal training experiments on synthetic data."""
    configure_logging(log_level)


@cli.command('gen-data', epilog=CONFIG_HELP)
@click.option('--config', 'config_path', required=True, type=click.Path(), help='Flat JSON config file.')
@click.option('--seed', type=int, default=None, help='Override the config seed.')
@click.option('--out', 'out_path', type=click.Path(), default=None, help='Dataset file (.dml).')
@click.option('--csv-dir', type=click.Path(), default=None, help='Also write per-modality CSVs here.')
@guarded
def gen_data(config_path, seed, out_path, csv_dir):
    """Generate the train/test dataset of a config."""
    from services.synthdata_service import export_csv

    config = _load(config_path, seed)
    out_path = Path(out_path) if out_path else Path(config.output_dir) / config.name / DATASET_FILE
    train, test = experiment_service.generate_data(config, config.seed, out_path)
    if csv_dir:
        export_csv(train, csv_dir, "train")
        export_csv(test, csv_dir, "test")
    click.echo(str(out_path))


@cli.command('train', epilog=CONFIG_HELP)
@click.option('--config', 'config_path', required=True, type=click.Path())
@click.option('--dataset', 'dataset_path', required=True, type=click.Path())
@click.option('--out', 'out_dir', required=True, type=click.Path())
@click.option('--seed', type=int, default=None)
@guarded
def train(config_path, dataset_path, out_dir, seed):
    """Encoder stage (warmup, separation, detached training); writes a checkpoint."""
    config = _load(config_path, seed)
    click.echo(str(experiment_service.train_stage(config, dataset_path, out_dir)))


@cli.command('fuse')
@click.option('--config', 'config_path', required=True, type=click.Path())
@click.option('--checkpoint', required=True, type=click.Path())
@click.option('--dataset', 'dataset_path', required=True, type=click.Path())
@click.option('--out', 'out_dir', required=True, type=click.Path())
@click.option('--seed', type=int, default=None)
@guarded
def fuse(config_path, checkpoint, dataset_path, out_dir, seed):
    """Fusion stage on frozen encoders; writes a checkpoint."""
    config = _load(config_path, seed)
    click.echo(str(experiment_service.fuse_stage(config, checkpoint, dataset_path, out_dir)))


@cli.group('dims')
def dims():
    """Dimension partition tools."""


@dims.command('export')
@click.option('--checkpoint', required=True, type=click.Path())
@click.option('--dataset', 'dataset_path', required=True, type=click.Path())
@click.option('--out', 'out_dir', required=True, type=click.Path())
@click.option('--metric', type=click.Choice(['prediction', 'l2norm']), default=None)
@guarded
def dims_export(checkpoint, dataset_path, out_dir, metric):
    """Write dims.csv (modality,dim,score,effective) and dims.json."""
    partition = experiment_service.dims_stage(checkpoint, dataset_path, out_dir, metric)
    for i, modality in enumerate(partition.modalities):
        click.echo(f"modality{i + 1}: {len(modality.effective)} effective / {len(modality.ineffective)} ineffective")


@cli.command('evaluate')
@click.option('--checkpoint', required=True, type=click.Path())
@click.option('--dataset', 'dataset_path', required=True, type=click.Path())
@click.option('--out', 'out_dir', type=click.Path(), default=None)
@click.option('--split', type=click.Choice(['train', 'test']), default='test')
@click.option('--t-lw', 'T_lw', type=float, default=1.0, help='Logit-weighting temperature.')
@click.option('--per-sample', is_flag=True, help='Also write predictions.csv.')
@guarded
def evaluate(checkpoint, dataset_path, out_dir, split, T_lw, per_sample):
    """Top-1 accuracy of every prediction path."""
    record = experiment_service.evaluate_stage(checkpoint, dataset_path, out_dir, T_lw, per_sample, split)
    click.echo(json.dumps(record, indent=2, sort_keys=True))


@cli.command('export-features')
@click.option('--checkpoint', required=True, type=click.Path())
@click.option('--dataset', 'dataset_path', required=True, type=click.Path())
@click.option('--out', 'out_dir', required=True, type=click.Path())
@click.option('--split', type=click.Choice(['train', 'test']), default='test')
@guarded
def export_features(checkpoint, dataset_path, out_dir, split):
    """One feature CSV per modality."""
    for path in experiment_service.export_features(checkpoint, dataset_path, out_dir, split):
        click.echo(str(path))


@cli.command('run', epilog=CONFIG_HELP)
@click.option('--config', 'config_path', required=True, type=click.Path())
@click.option('--seed', type=int, default=None)
@guarded
def run(config_path, seed):
    """Every stage for every seed, plus summary.csv."""
    config = _load(config_path, seed)
    click.echo(str(experiment_service.run_experiment(config)))


@cli.command('compare')
@click.argument('sources', nargs=-1, required=True, type=click.Path())
@click.option('--out', 'out_path', required=True, type=click.Path(), help='comparison.csv path or directory.')
@click.option('--seed', type=int, default=None)
@guarded
def compare(sources, out_path, seed):
    """Compare configs (run first) or finished run directories."""
    frame = experiment_service.compare(list(sources), out_path, seed)
    click.echo(frame.to_string(index=False))


@cli.command('serve')
@click.option('--host', default=Config.API_HOST)
@click.option('--port', type=int, default=Config.API_PORT)
def serve(host, port):
    """Serve the HTTP API."""
    from app import app

    app.run(host=host, port=port, debug=False)


if __name__ == '__main__':
    cli()
