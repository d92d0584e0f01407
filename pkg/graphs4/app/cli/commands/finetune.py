import json

from loguru import logger

from ...core.errors import MissingArtifactError
from ...models.checkpoint import save_checkpoint
from ...schemas.data import Split
from ...schemas.report import ScreenReport
from ...schemas.run import RunConfig
from ...services.data_service import select
from ...services.training_service import MetricsLog, finetune_cls
from ..deps import find_task, get_dataset, get_model


def register(subparsers) -> None:
    parser = subparsers.add_parser("finetune", help="supervised fine-tuning of a pretrained model")
    parser.set_defaults(handler=run)


def finetune_task_name(config: RunConfig) -> str:
    """config.finetune_task, else the best network of the last screening run"""
    if config.finetune_task:
        return find_task(config, config.finetune_task).name
    report_path = config.output_path / "screen_report.json"
    if not report_path.is_file():
        raise MissingArtifactError(report_path, "screening report (run screen or set finetune_task)")
    report = ScreenReport(**json.loads(report_path.read_text(encoding="utf-8")))
    return find_task(config, report.best_network()).name


def run(args, config: RunConfig) -> int:
    name = finetune_task_name(config)
    spec = find_task(config, name)
    pretrained = get_model(config, name)
    dataset = get_dataset(config)
    labeled = select(dataset, Split.CLINICAL_CV, Split.CLINICAL_SS_TRAIN)

    full = config.train.full_finetune or not spec.is_network_task
    model = finetune_cls(
        pretrained, labeled, config.train, full_finetune=full, metrics=MetricsLog(config.metrics_dir / f"{name}_finetune.tsv")
    )
    path = save_checkpoint(model, config.checkpoint_path(f"{name}_finetuned"))
    logger.info("Fine-tuned {} ({}) -> {}", name, "all layers" if full else "last layer + head", path)
    return 0
