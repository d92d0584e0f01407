from ...schemas.data import Split
from ...schemas.run import RunConfig
from ...services.data_service import select
from ...services.evaluation_service import compare_pretraining, excluded_ids
from ..deps import find_task, get_dataset, get_model, write_report
from .finetune import finetune_task_name


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="repeated stratified CV: pretrained vs from-scratch")
    parser.set_defaults(handler=run)


def run(args, config: RunConfig) -> int:
    name = finetune_task_name(config)
    spec = find_task(config, name)
    pretrained = get_model(config, name)
    dataset = select(get_dataset(config), Split.CLINICAL_CV, Split.CLINICAL_SS_TRAIN, Split.CLINICAL_SS_VAL)

    train_cfg = config.train
    if not spec.is_network_task:
        train_cfg = train_cfg.model_copy(update={"full_finetune": True})
    comparison = compare_pretraining(
        pretrained, config.model, dataset, excluded_ids(dataset), train_cfg, config.cv, name, config.seed
    )
    write_report(config.output_path / "cv_report.json", comparison)
    print(comparison.render_table())
    return 0
