from loguru import logger

from ...schemas.data import Split
from ...schemas.run import RunConfig
from ...schemas.task import ALL_NETWORKS, TaskKind
from ...services.data_service import save_matrix, select
from ...services.evaluation_service import screen_networks, screen_tasks
from ..deps import get_dataset, get_models, get_partition, write_report


def register(subparsers) -> None:
    parser = subparsers.add_parser("screen", help="anomaly screening on the balanced validation split")
    parser.add_argument("--dump-adjacency", action="store_true", help="also write each model's learned adjacency as CSV")
    parser.set_defaults(handler=run)


def run(args, config: RunConfig) -> int:
    """Per-network report, per-task report for the other tasks, and the all-networks model if trained."""
    partition = get_partition(config)
    network_specs = [s for s in config.tasks if s.is_network_task]
    other_specs = [s for s in config.tasks if s.kind != TaskKind.NETWORK_MASK]
    shared_specs = [s for s in config.tasks if s.kind == TaskKind.NETWORK_MASK and s.target_network == ALL_NETWORKS]
    models = get_models(config, network_specs + other_specs + shared_specs)

    val = select(get_dataset(config), Split.CLINICAL_SS_VAL)
    if network_specs:
        report = screen_networks(
            {s.target_network: models[s.name] for s in network_specs}, val, partition, config.dataset_id, config.seed
        )
        write_report(config.output_path / "screen_report.json", report)
        print(report.render_table())
        logger.info("Best network: {}", report.best_network())
    if other_specs:
        report = screen_tasks([(s, models[s.name]) for s in other_specs], val, partition, config.dataset_id, config.seed)
        write_report(config.output_path / "task_report.json", report)
        print(report.render_table())
    for spec in shared_specs:
        shared = models[spec.name]
        report = screen_networks({name: shared for name in partition.names}, val, partition, config.dataset_id, config.seed)
        write_report(config.output_path / f"{spec.name}_report.json", report)
        print(report.render_table())

    if args.dump_adjacency or config.dump_adjacency:
        for name, model in models.items():
            adjacency = model.adjacency().detach().numpy()
            save_matrix(config.output_path / f"{name}_adjacency.csv", adjacency, fmt="csv")
    return 0
