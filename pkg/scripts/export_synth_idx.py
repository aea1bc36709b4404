"""
Export the synthetic texture benchmark as IDX files.

Writes <out>/<dataset id>-images.idx, -labels.idx and a .meta.yaml sidecar
for the train, val and test splits of the configured benchmark, so other
tools can read exactly the data a run used.

Usage:
    python scripts/export_synth_idx.py --preset desk-quick --out data/synth
"""

import argparse
import logging
import sys
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config_loader import ConfigurationError, load_config  # noqa: E402
from src.datasets import DatasetError, generate_synth, save_dataset_cache  # noqa: E402
from src.experiment import synth_spec  # noqa: E402


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Write the synthetic benchmark as IDX files")
    parser.add_argument("--config", help="YAML or JSON configuration file")
    parser.add_argument("--preset", help="Preset under config/presets")
    parser.add_argument("--out", required=True, help="Directory for the IDX files")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(message)s", handlers=[RichHandler(show_path=False)])
    console = Console()

    try:
        config = load_config(args.config, args.preset).config
        if config.dataset.kind != "synth":
            raise ConfigurationError("dataset.kind must be 'synth' to export the synthetic benchmark")
        spec = synth_spec(config)
        for dataset in generate_synth(spec):
            meta = save_dataset_cache(dataset, args.out, {"synth_spec": spec.to_dict()})
            console.print(f"[green]✓[/green] {dataset.id}: {len(dataset)} images -> {meta.parent}")
    except (ConfigurationError, DatasetError) as e:
        console.print(f"[red]ERROR:[/red] {e}")
        return 1
    except OSError as e:
        console.print(f"[red]I/O ERROR:[/red] {e}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
