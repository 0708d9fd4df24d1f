"""
Command-line interface for histoforge.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from rich.console import Console
from rich.table import Table

from .config import HeadSettings, SnmfParams, SplitParams, TrainConfig, load_run_config, parse_model
from .exceptions import ConfigurationError, HistoforgeError, StageError
from .head import parameter_accounting
from .metrics import load_report, report_table
from .pipeline import (
    REPORT, RUN_RECORD, augment_stage, evaluate_stage, features_stage, ingest_stage, normalize_stage, run_pipeline,
    split_stage, train_stage
)
from .synthetic import write_fixture
from .types import MAGNIFICATIONS, Split


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def setup_logging(verbose: bool = False):
    """Setup logging configuration."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def seed_type(value: str) -> int:
    """argparse type for unsigned 64-bit seeds."""
    try:
        seed = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {value!r}") from None
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2**64), got {seed}")
    return seed


class HistoforgeCLI:
    """Command-line interface for the histopathology pipeline."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.console = Console()

    def create_parser(self) -> argparse.ArgumentParser:
        """Create the argument parser."""
        parser = argparse.ArgumentParser(
            prog="histoforge",
            description="Stain normalization, class-level augmentation and frozen ViT features for BreakHis",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  # Write the synthetic fixture and run every stage on it
  histoforge fixture --out ./fixture
  histoforge run --config ./fixture/run.json

  # Stage by stage
  histoforge ingest --root BreaKHis_v1 --mag 40 --out manifest.csv
  histoforge split --manifest manifest.csv --seed 7 --out splits.csv
  histoforge normalize --target target.png --in splits.csv --out normalized
  histoforge augment --manifest normalized/manifest.csv --split train --seed 7 --out augmented
  histoforge features --weights vit.hfwt --in augmented/provenance.csv normalized/manifest.csv --out features.bin
  histoforge train --features features.bin --splits splits.csv --head one --seed 7 --out head.hfwt --history history.csv
  histoforge evaluate --head head.hfwt --features features.bin --splits splits.csv --split test --out report.json
            """
        )

        parser.add_argument('-v', '--verbose', action='store_true', help='Enable verbose logging')
        parser.add_argument('--jobs', type=int, default=1, help='Worker threads per stage (default: 1)')

        subparsers = parser.add_subparsers(dest='command', help='Available commands')
        self._add_ingest_args(subparsers.add_parser('ingest', help='Scan a dataset tree into a manifest'))
        self._add_split_args(subparsers.add_parser('split', help='Stratified train/validation/test split'))
        self._add_normalize_args(subparsers.add_parser('normalize', help='Stain-normalize images to a target'))
        self._add_augment_args(subparsers.add_parser('augment', help='Class-level augmentation of a split'))
        self._add_features_args(subparsers.add_parser('features', help='Encode images with the frozen ViT'))
        self._add_train_args(subparsers.add_parser('train', help='Train a classifier head on features'))
        self._add_evaluate_args(subparsers.add_parser('evaluate', help='Class-level metrics on one split'))
        self._add_run_args(subparsers.add_parser('run', help='Run the whole pipeline from a config'))
        self._add_fixture_args(subparsers.add_parser('fixture', help='Write the bundled synthetic fixture'))
        self._add_params_args(subparsers.add_parser('params', help='Print the parameter accounting table'))
        return parser

    def _add_ingest_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--root', required=True, help='Dataset root directory')
        parser.add_argument('--mag', type=int, choices=MAGNIFICATIONS, default=40, help='Magnification (default: 40)')
        parser.add_argument('--overrides', help='JSON file mapping path segments to class labels')
        parser.add_argument('--out', '-o', required=True, help='Output manifest CSV')

    def _add_split_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--manifest', required=True, help='Manifest CSV from ingest')
        parser.add_argument('--seed', type=seed_type, default=0, help='Split seed (default: 0)')
        parser.add_argument('--test-frac', type=float, default=0.2, help='Per-class test fraction (default: 0.2)')
        parser.add_argument('--val-frac', type=float, default=0.2,
                            help='Validation fraction of the remainder (default: 0.2)')
        parser.add_argument('--val-rounding', choices=['half_up', 'floor'], default='half_up',
                            help='Rounding of the validation count (default: half_up)')
        parser.add_argument('--out', '-o', required=True, help='Output split manifest CSV')

    def _add_normalize_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--target', required=True, help='Target image whose stain basis is applied')
        parser.add_argument('--in', dest='source', required=True, help='Manifest CSV or image directory')
        parser.add_argument('--out', '-o', required=True, help='Output directory')
        parser.add_argument('--lambda', dest='lambda_sparse', type=float, default=0.1,
                            help='Sparsity weight of the factorization (default: 0.1)')
        parser.add_argument('--beta', type=float, default=0.15, help='Background OD threshold (default: 0.15)')
        parser.add_argument('--iters', type=int, default=200, help='Maximum solver iterations (default: 200)')
        parser.add_argument('--seed', type=seed_type, default=0, help='Factorization seed (default: 0)')

    def _add_augment_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--manifest', required=True, help='Split manifest CSV')
        parser.add_argument('--split', choices=[s.value for s in Split], default='train',
                            help='Split to augment (default: train)')
        parser.add_argument('--seed', type=seed_type, default=0, help='Augmentation seed (default: 0)')
        parser.add_argument('--out', '-o', required=True, help='Output directory')

    def _add_features_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--weights', required=True, help='Encoder weight container')
        parser.add_argument('--in', dest='sources', nargs='+', required=True,
                            help='Manifest CSVs, provenance CSVs or image directories')
        parser.add_argument('--out', '-o', required=True, help='Output features container')

    def _add_train_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--features', required=True, help='Features container')
        parser.add_argument('--splits', help='Split manifest CSV (default: splits recorded with the features)')
        parser.add_argument('--head', choices=['one', 'two'], default='one', help='Head variant (default: one)')
        parser.add_argument('--hidden-dim', type=int, default=256, help='Hidden width of the two-layer head')
        parser.add_argument('--dropout', type=float, default=0.5, help='Dropout probability (default: 0.5)')
        parser.add_argument('--epochs', type=int, default=20, help='Training epochs (default: 20)')
        parser.add_argument('--batch-size', type=int, default=64, help='Mini-batch size (default: 64)')
        parser.add_argument('--lr', type=float, default=0.001, help='Adam learning rate (default: 0.001)')
        parser.add_argument('--seed', type=seed_type, default=0, help='Training seed (default: 0)')
        parser.add_argument('--out', '-o', required=True, help='Output head container (final epoch)')
        parser.add_argument('--best-out', help='Also write the best-validation checkpoint here')
        parser.add_argument('--history', required=True, help='Output history CSV')

    def _add_evaluate_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--head', required=True, help='Head container')
        parser.add_argument('--features', required=True, help='Features container')
        parser.add_argument('--splits', help='Split manifest CSV')
        parser.add_argument('--split', choices=[s.value for s in Split], default='test',
                            help='Split to evaluate (default: test)')
        parser.add_argument('--out', '-o', required=True, help='Output report JSON')

    def _add_run_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--config', required=True, help='Run config JSON')
        parser.add_argument('--seed', type=seed_type, help='Override the config seed')

    def _add_fixture_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--out', '-o', required=True, help='Output directory')
        parser.add_argument('--per-class', type=int, default=8, help='Images per class (default: 8)')
        parser.add_argument('--seed', type=seed_type, default=0, help='Fixture seed (default: 0)')

    def _add_params_args(self, parser: argparse.ArgumentParser):
        parser.add_argument('--hidden-dim', type=int, default=256, help='Hidden width of the two-layer head')

    def run(self, args: Optional[List[str]] = None) -> int:
        """Run the CLI with provided arguments and return the exit code."""
        parser = self.create_parser()
        parsed_args = parser.parse_args(args)

        if not parsed_args.command:
            parser.print_help()
            return EXIT_CONFIG

        setup_logging(parsed_args.verbose)
        if parsed_args.jobs < 1:
            self.logger.error("--jobs must be at least 1")
            return EXIT_CONFIG

        try:
            handler = getattr(self, f"cmd_{parsed_args.command}")
            handler(parsed_args)
        except ConfigurationError as e:
            self.logger.error(f"Configuration error: {e}")
            return EXIT_CONFIG
        except StageError as e:
            self.logger.error(f"Stage failed: {e}")
            return EXIT_STAGE
        except HistoforgeError as e:
            self.logger.error(f"Stage failed: {StageError(parsed_args.command, e.message, e.details)}")
            return EXIT_STAGE
        except KeyboardInterrupt:
            self.logger.info("Operation cancelled by user")
            return EXIT_STAGE
        except Exception as e:
            self.logger.error(f"Error: {e}")
            if parsed_args.verbose:
                import traceback
                traceback.print_exc()
            return EXIT_STAGE
        return EXIT_OK

    def cmd_ingest(self, args):
        """Handle ingest command."""
        manifest = ingest_stage(args.root, args.mag, args.out, args.overrides, args.jobs)
        self.logger.info(f"Wrote {len(manifest)} records to {args.out}")

    def cmd_split(self, args):
        """Handle split command."""
        params = parse_model(SplitParams, {"test_frac": args.test_frac, "val_frac": args.val_frac,
                                           "validation_rounding": args.val_rounding}, "split parameters")
        split_stage(args.manifest, args.seed, args.out, params)

    def cmd_normalize(self, args):
        """Handle normalize command."""
        params = parse_model(SnmfParams, {"lambda_sparse": args.lambda_sparse, "beta": args.beta,
                                          "max_iters": args.iters, "seed": args.seed}, "stain parameters")
        normalize_stage(args.target, args.source, args.out, params, args.jobs)

    def cmd_augment(self, args):
        """Handle augment command."""
        augment_stage(args.manifest, Split(args.split), args.seed, args.out, args.jobs)

    def cmd_features(self, args):
        """Handle features command."""
        features_stage(args.weights, args.sources, args.out, args.jobs)

    def cmd_train(self, args):
        """Handle train command."""
        settings = parse_model(HeadSettings, {"variant": args.head, "hidden_dim": args.hidden_dim,
                                              "dropout_p": args.dropout}, "head settings")
        train_config = parse_model(TrainConfig, {"epochs": args.epochs, "batch_size": args.batch_size,
                                                 "lr": args.lr, "seed": args.seed}, "training config")
        summary = train_stage(args.features, args.splits, settings, train_config, args.out, args.history,
                              args.best_out)
        self.logger.info(f"Best validation epoch: {summary['best_epoch']}")

    def cmd_evaluate(self, args):
        """Handle evaluate command."""
        report = evaluate_stage(args.head, args.features, args.splits, Split(args.split), args.out)
        self.console.print(report_table(report))

    def cmd_run(self, args):
        """Handle run command."""
        config = load_run_config(args.config)
        if args.seed is not None:
            self.logger.info(f"Seed overridden on the command line: {args.seed}")
            config = config.model_copy(update={"seed": args.seed})
        if args.jobs > 1:
            config = config.model_copy(update={"jobs": args.jobs})
        record = run_pipeline(config)
        out_dir = Path(config.paths.output_dir)
        self.logger.info(f"Run {record.config_hash[:12]} complete; record at {out_dir / RUN_RECORD}")
        if config.stages.evaluate:
            self.console.print(report_table(load_report(out_dir / REPORT)))

    def cmd_fixture(self, args):
        """Handle fixture command."""
        paths = write_fixture(args.out, per_class=args.per_class, seed=args.seed)
        self.logger.info(f"Fixture ready; run it with: histoforge run --config {paths.config}")

    def cmd_params(self, args):
        """Handle params command."""
        table = Table(title="Parameter accounting")
        table.add_column("Model", style="bold")
        table.add_column("Feature dim", justify="right")
        table.add_column("Trainable", justify="right")
        table.add_column("Total", justify="right")
        for row in parameter_accounting(hidden_dim=args.hidden_dim):
            total = f"{row['total'] / 1e6:.2f}M" if row["total"] is not None else "-"
            table.add_row(row["model"], str(row["feature_dim"]), f"{row['trainable']:,}", total)
        self.console.print(table)


def main():
    """Main entry point for the CLI."""
    cli = HistoforgeCLI()
    sys.exit(cli.run())


if __name__ == '__main__':
    main()
