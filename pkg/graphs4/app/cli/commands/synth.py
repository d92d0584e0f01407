from loguru import logger

from ...core.errors import ConfigError
from ...schemas.run import RunConfig
from ...services.data_service import generate_synth, save_dataset, save_partition, synth_partition


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="generate the synthetic networked dataset")
    parser.set_defaults(handler=run)


def run(args, config: RunConfig) -> int:
    """Write the synthetic dataset (matrices + manifest) and its network partition."""
    if config.synth is None:
        raise ConfigError("the synth command needs a synth section", field_path="synth")
    dataset = generate_synth(config.synth)
    manifest_path = save_dataset(dataset, config.manifest_path.parent)
    partition_path = save_partition(synth_partition(config.synth), config.partition_path)
    logger.info("Wrote {} and {}", manifest_path, partition_path)
    return 0
