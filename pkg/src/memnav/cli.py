"""Command line entry points: run / replay / ablate / metrics / render.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .agent import (load_trace_header, question_from_header, replay_episode,
                    run_episode)
from .config import HyperParams
from .memory import MemoryStore
from .metrics import (ABLATION_ROWS, ablate, judge_score, norm_step,
                      report_from_rows, row_from_trace, rouge_l, success_rate)
from .questions import load_questions
from .simulator import bundled_scene_path, load_scene

log = logging.getLogger(__name__)

USAGE_EXIT, RUNTIME_EXIT = 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _resolve_scene(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    return bundled_scene_path(name_or_path)


def _load_question(scene_path: Path, question_id: str):
    qfile = scene_path.with_suffix("").with_suffix("")  # strip .scene
    qfile = scene_path.parent / (scene_path.stem + ".questions.yaml")
    if not qfile.exists():
        raise FileNotFoundError(f"no questions file next to {scene_path}")
    questions = load_questions(qfile)
    if question_id == "all":
        return questions
    for q in questions:
        if q.question_id == question_id:
            return [q]
    raise KeyError(f"question {question_id!r} not in {qfile}")


def _hyperparams(args) -> HyperParams:
    hp = HyperParams.from_file(args.config) if args.config else HyperParams()
    if args.seed is not None:
        hp.seed = args.seed
    return hp


def cmd_run(args) -> int:
    scene_path = _resolve_scene(args.scene)
    scene = load_scene(scene_path)
    questions = _load_question(scene_path, args.question)
    hp = _hyperparams(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = MemoryStore.load(args.bank) if args.bank else None
    rows = []
    for q in questions:
        result = run_episode(scene, q, hp, inject=args.ablation, store=store,
                             scene_path=str(scene_path),
                             bank_path=args.bank or "")
        trace_path = out / f"{scene.name}_{q.question_id}_{result.trace.inject or 'none'}.trace.jsonl"
        result.trace.save(trace_path)
        rows.append(row_from_trace(result.trace))
        print(f"{scene.name}/{q.question_id}: answer={result.trace.answer!r} "
              f"correct={result.trace.correct} steps={result.trace.n_steps} "
              f"trace={trace_path}")
        store = result.store
    if args.save_bank:
        store.persist(args.save_bank)
        print(f"memory bank persisted to {args.save_bank}")
    report = report_from_rows(args.ablation, rows, hp.gamma_s)
    print(report.summary())
    return 0


def cmd_replay(args) -> int:
    ok, original, replay = replay_episode(args.trace)
    if ok:
        print(f"replay of {args.trace}: byte-identical "
              f"({len(original.splitlines())} records)")
        return 0
    print(f"replay of {args.trace}: MISMATCH", file=sys.stderr)
    for i, (a, b) in enumerate(zip(original.splitlines(), replay.splitlines())):
        if a != b:
            print(f"first differing record {i}:\n  was: {a}\n  now: {b}",
                  file=sys.stderr)
            break
    return RUNTIME_EXIT


def cmd_ablate(args) -> int:
    episodes = []
    for name in args.scenes.split(","):
        scene_path = _resolve_scene(name.strip())
        scene = load_scene(scene_path)
        for q in _load_question(scene_path, args.questions):
            episodes.append((scene, q))
    hp = _hyperparams(args)
    reports = ablate(episodes, hp, bank=args.bank)
    print(f"{len(episodes)} episodes per row")
    for flags in ABLATION_ROWS:
        print(reports[flags].summary())
    if args.out:
        payload = {
            flags: {"success": r.success, "mean_rouge": r.mean_rouge,
                    "mean_norm_step": r.mean_norm_step}
            for flags, r in reports.items()
        }
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
        print(f"report written to {args.out}")
    return 0


def cmd_metrics(args) -> int:
    paths = sorted(Path(args.traces).glob("*.trace.jsonl"))
    if not paths:
        raise FileNotFoundError(f"no *.trace.jsonl files under {args.traces}")
    judge = None
    if args.judge_url:
        from .oracle import EndpointConfig, RemoteOracle

        judge = RemoteOracle(EndpointConfig(url=args.judge_url))
    preds, golds, pairs, rouges, judged = [], [], [], [], []
    gamma_s = None
    for path in paths:
        lines = path.read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        final = json.loads(lines[-1])
        q = header["question"]
        gamma_s = header["config"]["max_step_room_size_ratio"]
        pairs.append((final["n_steps"], header["area_m2"]))
        if q["kind"] == "mc":
            preds.append(final["answer"])
            golds.append(q["answer"])
        else:
            answer = final["answer"] or ""
            rouges.append(rouge_l(answer, q["open_answer"]) if answer else 0.0)
            if judge is not None:
                score = judge_score(judge, q["text"], q["open_answer"], answer)
                if score is not None:
                    judged.append(score)
    print(f"{len(paths)} traces")
    if golds:
        print(f"success rate: {success_rate(preds, golds):.1f}%")
    if rouges:
        print(f"mean rouge_l: {sum(rouges) / len(rouges):.3f}")
    if judged:
        print(f"mean judge score: {sum(judged) / len(judged):.2f}")
    print(f"mean norm steps: {norm_step(pairs, gamma_s):.3f}")
    return 0


def _render_map_png(grid, trajectory, out_path: Path, cam) -> None:
    m = grid.project_to_2d(cam)
    nx, ny = m.shape
    img = np.full((ny, nx, 3), 128, dtype=np.uint8)      # unexplored gray
    explored_blocked = m.explored & ~m.traversable
    explored_free = m.explored & m.traversable
    img[explored_blocked.T] = (30, 30, 30)
    img[explored_free.T] = (240, 240, 240)
    scale = 6
    pil = Image.fromarray(img[::-1]).resize((nx * scale, ny * scale),
                                            Image.NEAREST)
    draw = ImageDraw.Draw(pil)

    def to_px(xy):
        ix = (xy[0] - m.origin_xy[0]) / m.resolution * scale
        iy = (ny - (xy[1] - m.origin_xy[1]) / m.resolution) * scale
        return (ix, iy)

    pts = [to_px(p) for p in trajectory]
    if len(pts) > 1:
        draw.line(pts, fill=(200, 40, 40), width=2)
    if pts:
        draw.ellipse([pts[0][0] - 3, pts[0][1] - 3, pts[0][0] + 3, pts[0][1] + 3],
                     fill=(40, 160, 40))
        draw.ellipse([pts[-1][0] - 3, pts[-1][1] - 3, pts[-1][0] + 3, pts[-1][1] + 3],
                     fill=(40, 40, 200))
    pil.save(out_path)


def _write_pgm(map2d, out_path: Path) -> None:
    """Composite PGM: 0 explored blocked, 128 unexplored, 255 explored free."""
    nx, ny = map2d.shape
    img = np.full((ny, nx), 128, dtype=np.uint8)
    img[(map2d.explored & ~map2d.traversable).T] = 0
    img[(map2d.explored & map2d.traversable).T] = 255
    lines = [f"P2", f"{nx} {ny}", "255"]
    for row in img[::-1]:
        lines.append(" ".join(str(v) for v in row))
    out_path.write_text("\n".join(lines) + "\n")


def cmd_render(args) -> int:
    header = load_trace_header(args.trace)
    from .agent import load_scene_for_trace

    scene = load_scene_for_trace(header)
    question = question_from_header(header)
    hp = HyperParams(**header["config"])
    store = MemoryStore.load(header["bank_path"]) if header["bank_path"] else None
    result = run_episode(scene, question, hp, store=store,
                         inject=header["inject"],
                         scene_path=header["scene_path"],
                         bank_path=header["bank_path"],
                         keep_observations=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ref, rgb in result.observations.items():
        Image.fromarray(rgb).save(out / f"{ref}.png")
    trajectory = [(s.pose[0], s.pose[1]) for s in result.trace.steps]
    cam = hp.camera()
    _render_map_png(result.grid, trajectory, out / "map.png", cam)
    _write_pgm(result.grid.project_to_2d(cam), out / "map.pgm")
    csv = ["step,x,y,yaw"]
    csv += [f"{s.step},{s.pose[0]},{s.pose[1]},{s.pose[2]}"
            for s in result.trace.steps]
    (out / "poses.csv").write_text("\n".join(csv) + "\n")
    print(f"wrote {len(result.observations)} observation frames, map.png, "
          f"map.pgm and poses.csv to {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="memnav",
                     description="memory-centric embodied QA in a gridworld")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run episodes and write traces")
    run.add_argument("--scene", required=True, help="bundled name or path")
    run.add_argument("--question", default="all", help="question id or 'all'")
    run.add_argument("--config", default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--ablation", default="SAP",
                     help="memory injection flags, subset of SAP ('' = none)")
    run.add_argument("--bank", default=None, help="load a persisted memory bank")
    run.add_argument("--save-bank", default=None, help="persist the bank here")
    run.add_argument("--out", default="runs")
    run.set_defaults(func=cmd_run)

    replay = sub.add_parser("replay", help="re-run a trace and verify determinism")
    replay.add_argument("--trace", required=True)
    replay.set_defaults(func=cmd_replay)

    abl = sub.add_parser("ablate", help="run the injection ablation grid")
    abl.add_argument("--scenes", required=True, help="comma-separated names/paths")
    abl.add_argument("--questions", default="all")
    abl.add_argument("--config", default=None)
    abl.add_argument("--seed", type=int, default=None)
    abl.add_argument("--bank", default=None)
    abl.add_argument("--out", default=None, help="write a JSON report")
    abl.set_defaults(func=cmd_ablate)

    met = sub.add_parser("metrics", help="aggregate trace files")
    met.add_argument("--traces", required=True, help="directory of traces")
    met.add_argument("--judge-url", default=None,
                     help="judge oracle endpoint; adds the judged-score column")
    met.set_defaults(func=cmd_metrics)

    ren = sub.add_parser("render", help="render per-step frames and the map")
    ren.add_argument("--trace", required=True)
    ren.add_argument("--out", default="render")
    ren.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_EXIT
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except Exception as exc:  # noqa: BLE001
        log.exception("unhandled failure")
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
