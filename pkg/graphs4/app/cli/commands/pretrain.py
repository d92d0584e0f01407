from loguru import logger

from ...models.checkpoint import file_sha256, save_checkpoint
from ...schemas.data import HEALTHY, Split
from ...schemas.run import RunConfig
from ...services.data_service import select
from ...services.training_service import MetricsLog, pretrain_ssl
from ..deps import get_dataset, get_partition


def register(subparsers) -> None:
    parser = subparsers.add_parser("pretrain", help="self-supervised pretraining, one model per task")
    parser.add_argument("--task", action="append", default=None, help="only these task names (repeatable)")
    parser.set_defaults(handler=run)


def run(args, config: RunConfig) -> int:
    dataset = get_dataset(config)
    partition = get_partition(config)
    population = select(dataset, Split.POPULATION)
    clinical_healthy = select(dataset, Split.CLINICAL_SS_TRAIN, label=HEALTHY)

    specs = [s for s in config.tasks if not args.task or s.name in args.task]
    for spec in specs:
        logger.info("Pretraining {} on {} population / {} clinical subjects", spec.name, len(population), len(clinical_healthy))
        model = pretrain_ssl(
            population,
            clinical_healthy,
            spec,
            config.train,
            model_cfg=config.model,
            partition=partition,
            loss_cfg=config.loss,
            metrics=MetricsLog(config.metrics_dir / f"{spec.name}.tsv"),
        )
        path = save_checkpoint(model, config.checkpoint_path(spec.name))
        logger.info("{} -> {} (sha256 {})", spec.name, path, file_sha256(path)[:16])
    return 0
