import json

from ...core.errors import InvalidArgumentError
from ...schemas.run import RunConfig
from ...services.evaluation_service import anomaly_score
from ...services.task_service import sample_seed
from ..deps import find_task, get_dataset, get_models, get_partition


def register(subparsers) -> None:
    parser = subparsers.add_parser("score", help="anomaly score of one sample under each pretrained task")
    parser.add_argument("sample", help="sample id from the manifest")
    parser.add_argument("--task", action="append", default=None, help="only these task names (repeatable)")
    parser.set_defaults(handler=run)


def run(args, config: RunConfig) -> int:
    specs = [find_task(config, name) for name in args.task] if args.task else list(config.tasks)
    models = get_models(config, specs)
    partition = get_partition(config)
    matches = [s for s in get_dataset(config) if s.id == args.sample]
    if not matches:
        raise InvalidArgumentError(f"no sample with id {args.sample!r} in {config.manifest_path}")
    sample = matches[0]

    scores = {
        spec.name: anomaly_score(models[spec.name], sample, spec, partition, sample_seed(config.seed, sample.id))
        for spec in specs
    }
    print(json.dumps({"sample": sample.id, "label": sample.label, "scores": scores}, indent=2))
    return 0
