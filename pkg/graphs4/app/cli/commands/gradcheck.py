from ...core.errors import EXIT_OK, EXIT_RUNTIME
from ...schemas.report import render_rows
from ...schemas.run import RunConfig
from ...services.gradcheck_service import TOLERANCE, all_passed, run_gradcheck


def register(subparsers) -> None:
    parser = subparsers.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    parser.set_defaults(handler=run)


def run(args, config: RunConfig) -> int:
    rows = run_gradcheck(config.seed)
    body = [(r.name, f"{r.max_rel_error:.2e}", "ok" if r.passed else "FAIL", r.skipped) for r in rows]
    print(render_rows(("Check", "Rel. error", f"< {TOLERANCE:g}", "Redraws"), body, title="Gradient checks"))
    (config.output_path / "gradcheck.json").write_text(
        "[" + ",\n ".join(r.model_dump_json() for r in rows) + "]\n", encoding="utf-8"
    )
    return EXIT_OK if all_passed(rows) else EXIT_RUNTIME
