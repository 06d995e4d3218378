"""Command-line front end: scan, gen-templates, run, matrix, report.

Exit-code policy: task-level failures (an item the robot could not pick)
are successful runs and exit 0 with the failure recorded in the report;
only configuration and I/O errors exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .autoscan import (ScanImpossibleError, TemplateLibrary, generate_templates,
                       hemisphere_viewpoints, load_library, save_library,
                       scan_object)
from .data import default_scenario
from .formats import save_depth_pgm, save_ply
from .grasp import GraspDatabase, GripperModel, capability_matrix
from .orchestrator import (EpisodeConfig, WorkOrder, observation_poses,
                           run_order)
from .scene import ScenarioError, build_workspace, load_object_models
from .sensor import render_depth


def _load_scenario(path: str | None) -> dict:
    if path is None:
        return default_scenario()
    with open(path) as f:
        return json.load(f)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_scan(args) -> int:
    ws = build_workspace(_load_scenario(args.scenario))
    if args.object not in ws.objects:
        return _fail(f"unknown object {args.object!r}")
    views = hemisphere_viewpoints(args.radius, args.views)
    try:
        cloud = scan_object(ws.objects[args.object], views,
                            _intrinsics_from(ws.config))
    except ScanImpossibleError as exc:
        return _fail(str(exc))
    save_ply(cloud, args.out)
    print(f"scanned {args.object}: {args.views} views, {len(cloud)} merged points "
          f"-> {args.out}")
    return 0


def cmd_gen_templates(args) -> int:
    ws = build_workspace(_load_scenario(args.scenario))
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        return _fail(f"{out} already exists; pass --force to overwrite")

    if args.all:
        targets = [m for m in ws.objects.values() if not m.material.transparent]
        if not targets:
            return _fail("scenario has no opaque objects")
    else:
        if args.object is None:
            return _fail("pass --object <id> or --all")
        if args.object not in ws.objects:
            return _fail(f"unknown object {args.object!r}")
        model = ws.objects[args.object]
        if model.material.transparent:
            return _fail(f"{args.object} is transparent and cannot be scanned")
        targets = [model]

    lib = TemplateLibrary(radius=args.radius)
    intr = _intrinsics_from(ws.config)
    for model in targets:
        lib.add_many(generate_templates(model, args.count, intr, radius=args.radius))
        print(f"{model.id}: {lib.count(model.id)} templates")
    save_library(lib, out)
    print(f"library: {len(lib.object_ids())} objects -> {out}")
    return 0


def cmd_run(args) -> int:
    try:
        config = _load_scenario(args.scenario)
        ws = build_workspace(config)
    except (ScenarioError, OSError, json.JSONDecodeError) as exc:
        return _fail(str(exc))

    lib_path = Path(args.templates)
    if not (lib_path / "manifest.json").exists():
        return _fail(f"no template library at {lib_path}; generate one first "
                     f"with: dorapick gen-templates --all --out {lib_path}")
    library = load_library(lib_path)

    with open(args.order) as f:
        order = WorkOrder.from_json(json.load(f), set(ws.objects))
    missing = sorted({i.object_id for i in order.items}
                     - set(library.object_ids()))
    if missing:
        return _fail(f"template library lacks objects {missing}; regenerate it")

    gripper = GripperModel.named(args.gripper)
    cfg = EpisodeConfig.from_scenario(config, seed=args.seed)
    db = GraspDatabase.build(list(ws.objects.values()), [gripper])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.dump_depth:
        for loc in sorted({i.source for i in order.items}, key=str):
            depth = render_depth(ws, observation_poses(ws, loc)[0], cfg.intrinsics)
            save_depth_pgm(depth, out_dir / f"depth_{loc}.pgm")

    events_path = out_dir / "events.jsonl"
    with open(events_path, "w") as events:
        report = run_order(ws, order, gripper, library, db, cfg,
                           sink=lambda rec: events.write(json.dumps(rec) + "\n"))

    from datetime import datetime, timezone
    doc = report.to_dict(timestamp=datetime.now(timezone.utc).isoformat())
    (out_dir / "report.json").write_text(json.dumps(doc, indent=1) + "\n")

    counts = report.counts()
    print(f"episode: {len(report.results)} items, {counts['Placed']} placed "
          f"(seed {args.seed}, gripper {args.gripper})")
    for r in report.results:
        print(f"  {r.object_id}: {r.outcome.value}"
              + (f" ({r.detail})" if r.detail else ""))
    print(f"report -> {out_dir / 'report.json'}")
    return 0


def cmd_matrix(args) -> int:
    try:
        if args.objects == "builtin":
            from .data import builtin_objects
            entries = builtin_objects()
        else:
            entries = json.loads(Path(args.objects).read_text())
        models = load_object_models(entries)
    except (ScenarioError, OSError, json.JSONDecodeError) as exc:
        return _fail(str(exc))
    grippers = [GripperModel.vacuum(), GripperModel.parallel_m2(),
                GripperModel.soft()]
    rows = capability_matrix(
        [m for m in models.values() if m.in_capability_table], grippers)
    lines = ["object,vacuum,m2,soft"]
    lines += [f"{oid},{v},{m},{s}" for oid, (v, m, s) in rows]
    Path(args.out).write_text("\n".join(lines) + "\n")
    sums = [sum(r[1][k] for r in rows) for k in range(3)]
    print(f"matrix: {len(rows)} objects -> {args.out} "
          f"(vacuum {sums[0]}, m2 {sums[1]}, soft {sums[2]})")
    return 0


def cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(str(exc))
    print(f"scenario {doc['scenario_digest'][:12]}  seed {doc['seed']}  "
          f"gripper {doc['gripper']}")
    for name, count in doc["counts"].items():
        if count:
            print(f"  {name}: {count}")
    for item in doc["items"]:
        line = f"  {item['object']}: {item['outcome']}"
        if item.get("detail"):
            line += f" ({item['detail']})"
        print(line)
    return 0


def _intrinsics_from(config: dict):
    return EpisodeConfig.from_scenario(config).intrinsics


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dorapick",
        description="Desk-scale pick-and-place simulation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="autoscan one object into a merged cloud")
    scan.add_argument("--scenario", help="scenario JSON (default: packaged)")
    scan.add_argument("--object", required=True)
    scan.add_argument("--views", type=int, default=30)
    scan.add_argument("--radius", type=float, default=0.6)
    scan.add_argument("--out", required=True, help="output PLY path")
    scan.set_defaults(func=cmd_scan)

    gen = sub.add_parser("gen-templates", help="build a template library")
    gen.add_argument("--scenario")
    gen.add_argument("--object")
    gen.add_argument("--all", action="store_true")
    gen.add_argument("--count", type=int, default=100)
    gen.add_argument("--radius", type=float, default=0.6)
    gen.add_argument("--out", required=True, help="library directory")
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_gen_templates)

    run = sub.add_parser("run", help="execute a work order")
    run.add_argument("--scenario")
    run.add_argument("--order", required=True, help="work order JSON")
    run.add_argument("--gripper", choices=["vacuum", "m2", "soft"],
                     default="soft")
    run.add_argument("--templates", required=True, help="template library dir")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--jobs", type=int, default=1,
                     help="worker bound (episodes are serial; kept for sweeps)")
    run.add_argument("--dump-depth", action="store_true",
                     help="write 16-bit millimeter PGM depth images")
    run.set_defaults(func=cmd_run)

    matrix = sub.add_parser("matrix", help="emit the gripper capability matrix")
    matrix.add_argument("--objects", default="builtin",
                        help='object metadata JSON, or "builtin"')
    matrix.add_argument("--out", required=True, help="output CSV path")
    matrix.set_defaults(func=cmd_matrix)

    rep = sub.add_parser("report", help="summarize an episode report")
    rep.add_argument("--report", required=True, help="report.json path")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        return _fail("--jobs must be at least 1")
    try:
        return args.func(args)
    except ScenarioError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
