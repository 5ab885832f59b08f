"""Episode orchestration: memory update, retrieval, stop decision, and either
answering or planning the next pose — every step does exactly one of the two.

Memory injection into the three downstream modules (S: stop criterion,
A: answering, P: planner) is individually switchable; with a flag off the
module receives an empty context, which the per-step logs record.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from . import oracle as omod
from .config import HyperParams
from .encoders import Encoder, SemanticEncoder
from .errors import OracleError
from .frontiers import (CandidateSet, Frontier, FrontierParams,
                        detect_frontiers, sample_candidates)
from .geometry import Detection, Pose, compass_label
from .mapping import GridParams, Map2D, VoxelGrid, disk
from .memory import (GlobalMemoryEntry, MemoryStore, SceneCaption,
                     build_local_entry)
from .oracle import CONFIDENCE_VALUES, ScriptedOracle
from .questions import Question
from .retrieval import (RetrievalParams, content_retrieve, dynamic_k, entropy,
                        fuse_query, scene_retrieve)
from .simulator import NAV_RADIUS_CELLS, Scene, load_bundled_scene, load_scene
from .update_gate import UpdateParams, black_fraction, should_update

log = logging.getLogger(__name__)

LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def parse_flags(inject: str) -> frozenset[str]:
    flags = frozenset(inject.upper()) - {" "}
    bad = flags - {"S", "A", "P"}
    if bad:
        raise ValueError(f"unknown ablation flags {sorted(bad)}; use subsets of SAP")
    return flags


@dataclass
class SemanticWeight:
    """One-hot over candidate directions plus its smoothed imprint on the map."""

    one_hot: np.ndarray
    field: np.ndarray              # same shape as the 2-D map, non-negative
    chosen: int | None             # candidate index, None = fallback path
    letters: list[str]
    chosen_letter: str = ""


def entry_lines(records) -> list[str]:
    lines: list[str] = []
    for rec in records:
        lines.extend(rec.payload.text().splitlines())
    return lines


def _safe(call, fallback, what: str):
    try:
        return call()
    except OracleError as exc:
        log.warning("oracle failure during %s: %s; using fallback", what, exc)
        return fallback


def stop_criterion(oracle, question: Question, context_lines: list[str],
                   obs_rgb: np.ndarray, gamma: float,
                   meta: dict) -> tuple[bool, str]:
    """Confidence-letter stop rule: stop when the mapped value reaches gamma
    (letter C and above at the default). Oracle failures mean lowest
    confidence, never an abort."""
    letter = _safe(
        lambda: omod.ask_confidence(oracle, question.text, context_lines,
                                    obs_rgb, meta),
        "A", "stop criterion")
    return CONFIDENCE_VALUES.get(letter, 0.0) >= gamma, letter


def answer_question(oracle, question: Question, context_lines: list[str],
                    state: Pose, obs_rgb: np.ndarray,
                    meta: dict) -> str | None:
    """Query the answering module with the retrieved context plus a rendered
    state line. None marks an unanswered episode (scored incorrect)."""
    x, y, _, yaw = state.as_tuple()
    ctx = list(context_lines)
    ctx.append(f"current state: position ({x:.2f}, {y:.2f}) facing "
               f"{compass_label(math.cos(yaw), math.sin(yaw))}")
    if question.kind == "mc":
        return _safe(
            lambda: omod.answer_closed(oracle, question.text, question.options,
                                       ctx, obs_rgb, meta),
            None, "closed answer")
    text = _safe(
        lambda: omod.answer_open(oracle, question.text, ctx, obs_rgb, meta),
        None, "open answer")
    return text if text else None


def annotate_candidates(obs_rgb: np.ndarray, pixels: list[tuple[int, int]],
                        letters: list[str], radius: int) -> np.ndarray:
    """Draw lettered circles over candidate directions on the observation."""
    img = Image.fromarray(np.asarray(obs_rgb, dtype=np.uint8))
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()
    for (u, v), letter in zip(pixels, letters):
        draw.ellipse([u - radius, v - radius, u + radius, v + radius],
                     outline=(0, 0, 0), fill=(255, 255, 255))
        draw.text((u - radius // 2, v - radius // 2 - 1), letter,
                  fill=(0, 0, 0), font=font)
    return np.asarray(img)


def inject_planner(oracle, question: Question, obs_rgb: np.ndarray, pose: Pose,
                   cam, candidates: CandidateSet, frontiers: list[Frontier],
                   map2d: Map2D, context_lines: list[str],
                   hp: HyperParams) -> tuple[SemanticWeight, np.ndarray]:
    """Label candidate directions on the observation, let the oracle pick one,
    and splat the choice onto the frontier cells as a smoothed weight field.
    Unprojectable candidates are dropped before labeling; an oracle fallback
    concentrates weight on the frontier nearest the agent."""
    n = len(candidates.candidates)
    pts = np.array([[c.pose.position[0], c.pose.position[1], 0.0]
                    for c in candidates.candidates])
    u, v, z = cam.project(pts, pose)
    labelable = [i for i in range(n)
                 if z[i] > 1e-6 and 0 <= u[i] < cam.width and 0 <= v[i] < cam.height]
    radius = max(3, int(round(hp.circle_radius * cam.width / 640.0)))
    letters = [LETTERS[j] for j in range(len(labelable))]
    pixels = [(int(u[i]), int(v[i])) for i in labelable]
    annotated = annotate_candidates(obs_rgb, pixels, letters, radius)

    chosen: int | None = None
    chosen_letter = ""
    if labelable:
        meta = {"question": question,
                "candidate_positions": [pts[i][:2] for i in labelable]}
        letter = _safe(
            lambda: omod.choose_direction(oracle, question.text, annotated,
                                          letters, context_lines, meta),
            None, "direction choice")
        if letter is not None:
            chosen = labelable[letters.index(letter)]
            chosen_letter = letter

    one_hot = np.zeros(n)
    if chosen is not None:
        one_hot[chosen] = 1.0
        target_frontier = candidates.candidates[chosen].frontier_index
    else:
        # fallback: nearest frontier to the agent
        target_frontier = min(
            range(len(frontiers)),
            key=lambda i: (float(np.linalg.norm(frontiers[i].centroid - pose.xy)), i))
    weight_field = np.zeros(map2d.shape)
    for (ix, iy) in frontiers[target_frontier].cells:
        weight_field[ix, iy] = 1.0
    weight_field = ndimage.gaussian_filter(weight_field, sigma=hp.smooth_sigma)
    peak = weight_field.max()
    if peak > 0:
        weight_field /= peak
    return SemanticWeight(one_hot=one_hot, field=weight_field, chosen=chosen,
                          letters=letters, chosen_letter=chosen_letter), annotated


def nav_passable(map2d: Map2D, radius_cells: int) -> np.ndarray:
    """Cells the agent body fits in: traversable and clear of every KNOWN
    obstacle by the body radius. Unknown cells are not inflated (they become
    known the moment the camera sees them)."""
    inflated = ndimage.binary_dilation(map2d.obstacle, structure=disk(radius_cells))
    return map2d.traversable & ~inflated


def _bfs(passable: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """4-connected BFS distance field over a passable mask (wavefront
    expansion, vectorized). The start cell always counts as passable — the
    agent is standing on it. Unreached cells stay -1."""
    nx, ny = passable.shape
    dist = np.full((nx, ny), -1, dtype=np.int64)
    if not (0 <= start[0] < nx and 0 <= start[1] < ny):
        return dist
    passable = passable.copy()
    passable[start] = True
    frontier = np.zeros((nx, ny), dtype=bool)
    frontier[start] = True
    d = 0
    while frontier.any():
        dist[frontier] = d
        grown = np.zeros_like(frontier)
        grown[:-1, :] |= frontier[1:, :]
        grown[1:, :] |= frontier[:-1, :]
        grown[:, :-1] |= frontier[:, 1:]
        grown[:, 1:] |= frontier[:, :-1]
        frontier = grown & passable & (dist < 0)
        d += 1
    return dist


def _path_to(dist: np.ndarray, start: tuple[int, int],
             goal: tuple[int, int]) -> list[tuple[int, int]]:
    """Greedy descent of the BFS distance field, goal back to start; ties
    break on the first neighbor in fixed scan order."""
    path = [goal]
    cur = goal
    nx, ny = dist.shape
    while cur != start:
        cx, cy = cur
        want = dist[cur] - 1
        for ox, oy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            jx, jy = cx + ox, cy + oy
            if 0 <= jx < nx and 0 <= jy < ny and dist[jx, jy] == want:
                cur = (jx, jy)
                break
        else:
            raise RuntimeError("broken distance field")
        path.append(cur)
    path.reverse()
    return path


def _los_clear(map2d: Map2D, passable: np.ndarray, a: np.ndarray,
               b: np.ndarray) -> bool:
    """Exact supercover line walk: every cell the segment touches must be
    passable (except the start cell, where the agent already stands). Corner
    crossings check both adjacent cells, which keeps this conservative with
    respect to the simulator's own boundary walk."""
    res = map2d.resolution
    ax = (a[0] - map2d.origin_xy[0]) / res
    ay = (a[1] - map2d.origin_xy[1]) / res
    bx = (b[0] - map2d.origin_xy[0]) / res
    by = (b[1] - map2d.origin_xy[1]) / res
    ix, iy = int(math.floor(ax)), int(math.floor(ay))
    jx, jy = int(math.floor(bx)), int(math.floor(by))
    dx, dy = bx - ax, by - ay
    nx, ny = map2d.shape

    def bad(cx, cy) -> bool:
        return not (0 <= cx < nx and 0 <= cy < ny) or not passable[cx, cy]

    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    t_next_x = ((ix + (dx > 0)) - ax) / dx if abs(dx) > 1e-12 else math.inf
    t_next_y = ((iy + (dy > 0)) - ay) / dy if abs(dy) > 1e-12 else math.inf
    dt_x = abs(1.0 / dx) if abs(dx) > 1e-12 else math.inf
    dt_y = abs(1.0 / dy) if abs(dy) > 1e-12 else math.inf
    for _ in range(2 * (abs(jx - ix) + abs(jy - iy)) + 4):
        if (ix, iy) == (jx, jy):
            return True
        if abs(t_next_x - t_next_y) < 1e-12:
            if bad(ix + step_x, iy) or bad(ix, iy + step_y):
                return False
            ix += step_x
            iy += step_y
            t_next_x += dt_x
            t_next_y += dt_y
        elif t_next_x < t_next_y:
            ix += step_x
            t_next_x += dt_x
        else:
            iy += step_y
            t_next_y += dt_y
        if bad(ix, iy):
            return False
    return (ix, iy) == (jx, jy)


GOAL_TOLERANCE_M = 1.0
APPROACH_DONE_M = 0.45


def _nearest_reachable(dist: np.ndarray, cell: tuple[int, int],
                       tol_cells: int) -> tuple[int, int] | None:
    """Reachable cell closest to `cell` within a square tolerance window.
    Frontier cells border unknown space, so the agent navigates near them
    rather than onto them."""
    nx, ny = dist.shape
    x0, x1 = max(cell[0] - tol_cells, 0), min(cell[0] + tol_cells + 1, nx)
    y0, y1 = max(cell[1] - tol_cells, 0), min(cell[1] + tol_cells + 1, ny)
    window = dist[x0:x1, y0:y1]
    xs, ys = np.nonzero(window >= 0)
    if xs.size == 0:
        return None
    gx, gy = xs + x0, ys + y0
    d2 = (gx - cell[0]) ** 2 + (gy - cell[1]) ** 2
    order = np.lexsort((gy, gx, d2))
    return int(gx[order[0]]), int(gy[order[0]])


def _approach_cell(frontier: Frontier, dist: np.ndarray, map2d: Map2D,
                   tol_cells: int) -> tuple[int, int] | None:
    """Reachable cell from which the frontier can be worked on, or None when
    the whole frontier is out of reach."""
    cells = frontier.cells
    probes = [cells[len(cells) // 2], cells[0], cells[-1]]
    for probe in probes:
        near = _nearest_reachable(dist, probe, tol_cells)
        if near is not None:
            return near
    return None


def usable_frontiers(frontiers: list[Frontier], map2d: Map2D,
                     dist: np.ndarray,
                     excluded: list[np.ndarray]
                     ) -> tuple[list[Frontier], list[tuple[int, int]]]:
    """Drop frontiers that are unreachable or match an excluded centroid."""
    tol_cells = int(round(GOAL_TOLERANCE_M / map2d.resolution))
    usable: list[Frontier] = []
    approaches: list[tuple[int, int]] = []
    for fr in frontiers:
        if any(float(np.linalg.norm(fr.centroid - b)) < 0.5 for b in excluded):
            continue
        appr = _approach_cell(fr, dist, map2d, tol_cells)
        if appr is None:
            continue
        usable.append(fr)
        approaches.append(appr)
    return usable, approaches


@dataclass
class PursuedGoal:
    centroid: np.ndarray
    approach_xy: np.ndarray


def _bump_futile(futile: list[list], centroid: np.ndarray) -> int:
    for entry in futile:
        if float(np.linalg.norm(entry[0] - centroid)) < 0.5:
            entry[1] += 1
            return entry[1]
    futile.append([centroid.copy(), 1])
    return 1


def plan_next(pose: Pose, map2d: Map2D, passable: np.ndarray,
              dist: np.ndarray, weight: SemanticWeight,
              candidates: CandidateSet, frontiers: list[Frontier],
              approaches: list[tuple[int, int]], hp: HyperParams,
              pursued: PursuedGoal | None = None
              ) -> tuple[Pose, PursuedGoal] | None:
    """Navigate toward the committed frontier while it survives; otherwise
    pick the highest-weighted candidate frontier and commit to it. Returns
    the next pose (step length bounded by max_dist_from_cur) plus the goal
    being pursued."""
    if not candidates.candidates:
        return None
    start = map2d.cell_of(pose.xy)

    goal_idx = None
    if pursued is not None:
        for j, fr in enumerate(frontiers):
            if float(np.linalg.norm(fr.centroid - pursued.centroid)) < 0.5:
                goal_idx = j
                break
    if goal_idx is not None:
        goal_cell = approaches[goal_idx]
        goal_xy = frontiers[goal_idx].centroid
        goal_centroid = frontiers[goal_idx].centroid
    else:
        scored = []
        for i, cand in enumerate(candidates.candidates):
            cell = map2d.cell_of(cand.pose.xy)
            w = weight.field[cell] if map2d.in_bounds(*cell) else 0.0
            d = float(np.linalg.norm(cand.pose.xy - pose.xy))
            scored.append((-w, d, i, cand))
        scored.sort(key=lambda s: s[:3])
        _, _, _, winner = scored[0]
        goal_cell = approaches[winner.frontier_index]
        goal_xy = winner.pose.xy
        goal_centroid = frontiers[winner.frontier_index].centroid

    path = _path_to(dist, start, goal_cell) if goal_cell != start else [start]
    # farthest path cell in step range with a clear straight line; LOS over
    # body-passable cells means the move completes unless something unseen
    # turns up, and then the next step replans with it on the map
    nav = None
    for cell in reversed(path):
        center = map2d.center_of(cell)
        d = float(np.linalg.norm(center - pose.xy))
        if d > hp.max_dist_from_cur:
            continue
        if _los_clear(map2d, passable, pose.xy, center):
            nav = center
            break
    if nav is None:
        nav = map2d.center_of(path[min(1, len(path) - 1)])

    remaining = np.asarray(goal_xy) - nav
    if float(np.linalg.norm(remaining)) > 1e-6:
        yaw = math.atan2(remaining[1], remaining[0])
    else:
        yaw = math.atan2(nav[1] - pose.xy[1], nav[0] - pose.xy[0])
    goal = PursuedGoal(centroid=goal_centroid.copy(),
                       approach_xy=map2d.center_of(goal_cell))
    return Pose(np.array([nav[0], nav[1], 0.0]), yaw), goal


# -- trace ---------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    pose: tuple[float, float, float]          # x, y, yaw
    obs_ref: str
    decision: str
    black_frac: float
    inserted: list[int] = field(default_factory=list)
    retrieved: list[int] = field(default_factory=list)
    k: int = 0
    query_entropy: float = 0.0
    stop_letter: str = ""
    stopped: bool = False
    ctx_stop: int = 0
    ctx_answer: int = 0
    ctx_planner: int = 0
    candidate_letters: list[str] = field(default_factory=list)
    chosen_letter: str = ""
    nav_target: tuple[float, float] | None = None


@dataclass
class EpisodeTrace:
    scene_name: str
    scene_path: str
    question: Question
    seed: int
    inject: str
    scene_id: int
    max_steps: int
    area_m2: float
    steps: list[StepRecord] = field(default_factory=list)
    answer: str | None = None
    answered: bool = False
    stop_step: int = -1
    forced_stop: bool = False
    exhausted: bool = False
    correct: bool = False
    bank_path: str = ""
    config: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        """Exploration steps taken before answering."""
        return self.stop_step if self.stop_step >= 0 else len(self.steps)

    def decisions(self) -> list[str]:
        return [s.decision for s in self.steps]

    def to_jsonl(self) -> str:
        header = {
            "kind": "header", "scene_name": self.scene_name,
            "scene_path": self.scene_path, "seed": self.seed,
            "inject": self.inject, "scene_id": self.scene_id,
            "max_steps": self.max_steps, "area_m2": self.area_m2,
            "bank_path": self.bank_path, "config": self.config,
            "question": {
                "id": self.question.question_id, "text": self.question.text,
                "kind": self.question.kind, "options": self.question.options,
                "answer": self.question.answer,
                "open_answer": self.question.open_answer,
                "entities": [dataclasses.asdict(e) for e in self.question.entities],
            },
        }
        lines = [json.dumps(header, sort_keys=True)]
        for s in self.steps:
            rec = dataclasses.asdict(s)
            rec["kind"] = "step"
            lines.append(json.dumps(rec, sort_keys=True))
        final = {"kind": "final", "answer": self.answer,
                 "answered": self.answered, "stop_step": self.stop_step,
                 "forced_stop": self.forced_stop, "exhausted": self.exhausted,
                 "correct": self.correct, "n_steps": self.n_steps}
        lines.append(json.dumps(final, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def load_trace_header(path: str | Path) -> dict:
    first = Path(path).read_text(encoding="utf-8").splitlines()[0]
    header = json.loads(first)
    if header.get("kind") != "header":
        raise ValueError(f"{path} does not start with a trace header")
    return header


def question_from_header(header: dict) -> Question:
    q = header["question"]
    from .questions import EntitySpec
    return Question(
        question_id=q["id"], text=q["text"], kind=q["kind"],
        options=list(q["options"]), answer=q["answer"],
        open_answer=q["open_answer"],
        entities=[EntitySpec(**e) for e in q["entities"]],
    )


# -- episode loop ----------------------------------------------------------------


@dataclass
class EpisodeResult:
    trace: EpisodeTrace
    store: MemoryStore
    grid: VoxelGrid
    observations: dict[str, np.ndarray] = field(default_factory=dict)


def run_episode(scene: Scene, question: Question, hp: HyperParams, *,
                oracle=None, store: MemoryStore | None = None,
                encoder: Encoder | None = None, inject: str = "SAP",
                scene_path: str = "", bank_path: str = "",
                keep_observations: bool = False) -> EpisodeResult:
    """Run one question to completion. Deterministic given (scene, question,
    hp, seed): the trace serializes byte-identically across replays."""
    hp.validate()
    flags = parse_flags(inject)
    cam = hp.camera()
    oracle = oracle if oracle is not None else ScriptedOracle(scene, hp.seed)
    encoder = encoder if encoder is not None else SemanticEncoder(hp.dim, hp.seed)
    store = store if store is not None else MemoryStore(hp.dim)
    if encoder.dim != store.dim:
        raise ValueError(f"encoder dim {encoder.dim} != store dim {store.dim}")

    rparams = RetrievalParams.from_hyperparams(hp)
    uparams = UpdateParams.from_hyperparams(hp)
    fparams = FrontierParams.from_hyperparams(hp)
    gparams = GridParams.from_hyperparams(hp)

    pose = scene.spawns[0]
    if not scene.traversable_at(pose.xy):
        raise ValueError("spawn pose is not traversable")
    area = scene.area_m2()
    max_steps = hp.max_steps(area)
    grid = VoxelGrid.around(pose.position, hp.init_clearance, gparams)

    first_obs = scene.render(pose, cam, hp.max_depth)
    f_obs0 = encoder.encode_image(first_obs.rgb)
    scene_id = None
    if len(store):
        scene_id = scene_retrieve(store, f_obs0, rparams)
    if scene_id is None:
        scene_id = store.new_scene()

    # global memory is loaded once, before the first step
    global_lines = entry_lines(
        [r for r in store.scene_records(scene_id)
         if isinstance(r.payload, GlobalMemoryEntry)])

    trace = EpisodeTrace(
        scene_name=scene.name, scene_path=scene_path, question=question,
        seed=hp.seed, inject="".join(c for c in "SAP" if c in flags),
        scene_id=scene_id, max_steps=max_steps, area_m2=area,
        bank_path=bank_path, config=dataclasses.asdict(hp))

    observations: dict[str, np.ndarray] = {}
    obj_captions: dict[str, str] = {}
    blacklist: list[np.ndarray] = []
    futile: list[list] = []             # [centroid, futile-arrival count]
    pursued: PursuedGoal | None = None
    last_decision = "start"
    obs = first_obs

    for step in range(max_steps):
        obs_ref = f"step{step:03d}"
        if keep_observations:
            observations[obs_ref] = obs.rgb

        detections = _captioned_detections(oracle, obs, obj_captions)
        caption = omod.describe_scene(
            oracle, obs.rgb, {"pose": pose, "detections": detections})
        f_obs = encoder.encode_image(obs.rgb)

        inserted = _update_memory(store, scene_id, encoder, pose, obs, f_obs,
                                  detections, caption, step, last_decision,
                                  uparams)

        f_q = fuse_query(f_obs, encoder.encode_text(question.text))
        retrieved = content_retrieve(store, scene_id, f_q, rparams)
        retrieved_lines = entry_lines(retrieved)
        mem_lines = global_lines + retrieved_lines

        stop_ctx = mem_lines if "S" in flags else []
        ans_ctx = mem_lines if "A" in flags else []
        plan_ctx = mem_lines if "P" in flags else []

        rec = StepRecord(
            step=step, pose=(pose.position[0], pose.position[1], pose.yaw),
            obs_ref=obs_ref, decision=last_decision,
            black_frac=round(black_fraction(obs.rgb), 6),
            inserted=inserted,
            retrieved=[r.index for r in retrieved],
            k=dynamic_k(f_q, rparams), query_entropy=round(entropy(f_q), 6),
            ctx_stop=len(stop_ctx), ctx_answer=len(ans_ctx),
            ctx_planner=len(plan_ctx))

        meta = {"question": question, "detections": detections}
        stop = False
        if step >= hp.min_random_init_steps:
            stop, letter = stop_criterion(oracle, question, stop_ctx, obs.rgb,
                                          hp.gamma, meta)
            rec.stop_letter = letter
        if step == max_steps - 1 and not stop:
            stop = True
            trace.forced_stop = True

        if stop:
            rec.stopped = True
            rec.decision = "answer"
            trace.steps.append(rec)
            _finish(trace, oracle, question, ans_ctx, pose, obs, meta, step)
            break

        # plan the next pose
        grid.integrate_depth(obs.depth, pose, cam)
        # the agent footprint is free space the camera cannot see; the body
        # clearance radius guarantees this carve is truthful
        grid.carve_free_disk(pose.xy, 2.0 * hp.tsdf_grid_size)
        target: Pose | None = None
        is_turn = step < hp.min_random_init_steps
        if is_turn:
            # fixed initial spin to seed the map before planning starts
            target = Pose(pose.position.copy(), pose.yaw + 2.0 * math.pi / 3.0)
            rec.decision = "turn"
        else:
            map2d = grid.project_to_2d(cam)
            passable = nav_passable(map2d, NAV_RADIUS_CELLS)
            dist = _bfs(passable, map2d.cell_of(pose.xy))
            frontiers = detect_frontiers(map2d, fparams)

            # a frontier that survives being pursued to its approach twice is
            # occluded for good (e.g. hidden behind furniture); skip it once
            # on the first futile arrival, permanently on the second
            excluded_now = list(blacklist)
            if pursued is not None and float(
                    np.linalg.norm(pose.xy - pursued.approach_xy)) < APPROACH_DONE_M:
                for fr in frontiers:
                    if float(np.linalg.norm(fr.centroid - pursued.centroid)) < 0.5:
                        hits = _bump_futile(futile, fr.centroid)
                        if hits >= 2:
                            blacklist.append(fr.centroid.copy())
                        excluded_now.append(fr.centroid.copy())
                        break

            usable, approaches = usable_frontiers(frontiers, map2d, dist,
                                                  excluded_now)
            planned = None
            if usable:
                candidates = sample_candidates(usable, pose, fparams)
                weight, _ = inject_planner(oracle, question, obs.rgb, pose, cam,
                                           candidates, usable, map2d,
                                           plan_ctx, hp)
                rec.candidate_letters = weight.letters
                rec.chosen_letter = weight.chosen_letter
                planned = plan_next(pose, map2d, passable, dist, weight,
                                    candidates, usable, approaches, hp,
                                    pursued=pursued)
            if planned is None:
                # exploration exhausted: no workable frontier left
                rec.stopped = True
                rec.decision = "answer"
                trace.exhausted = True
                trace.steps.append(rec)
                _finish(trace, oracle, question, ans_ctx, pose, obs, meta, step)
                break
            target, pursued = planned

        new_pose = scene.move(pose, target)
        if not is_turn:
            dx = new_pose.position[0] - pose.position[0]
            dy = new_pose.position[1] - pose.position[1]
            dist = math.hypot(dx, dy)
            rec.decision = (f"move {compass_label(dx, dy)} {dist:.1f}m"
                            if dist > 1e-6 else "hold")
        rec.nav_target = (round(float(target.position[0]), 6),
                          round(float(target.position[1]), 6))
        trace.steps.append(rec)
        last_decision = rec.decision
        pose = new_pose
        obs = scene.render(pose, cam, hp.max_depth)

    return EpisodeResult(trace=trace, store=store, grid=grid,
                         observations=observations)


def _captioned_detections(oracle, obs, cache: dict[str, str]) -> list[Detection]:
    out = []
    for det in obs.detections:
        desc = cache.get(det.object_id)
        if desc is None:
            u0, v0, u1, v1 = det.bbox
            crop = obs.rgb[v0:v1 + 1, u0:u1 + 1]
            _, _, desc = omod.describe_object(oracle, crop, {"detection": det})
            cache[det.object_id] = desc
        out.append(Detection(object_id=det.object_id, category=det.category,
                             attribute=det.attribute, description=desc,
                             bbox=det.bbox, position=det.position,
                             room=det.room))
    return out


def _update_memory(store, scene_id, encoder, pose, obs, f_obs, detections,
                   caption, step, last_decision, uparams) -> list[int]:
    """Insert global annotations for new rooms/targets and, when the update
    gate passes, one local entry for this step. Re-observing a target from a
    clearly nearer pose supersedes its stale annotation."""
    # gate against what was remembered BEFORE this observation
    gate_open = should_update(pose, obs.rgb, f_obs, store, scene_id, uparams)
    inserted = []
    known_rooms = set()
    targets: dict[str, tuple[int, GlobalMemoryEntry]] = {}
    for rec in store.scene_records(scene_id):
        p = rec.payload
        if isinstance(p, GlobalMemoryEntry):
            if p.kind == "room":
                known_rooms.add(p.category)
            else:
                targets[f"{p.category}@{p.position[0]:.2f},{p.position[1]:.2f}"] = (
                    rec.index, p)

    if caption.room and caption.room not in known_rooms:
        entry = GlobalMemoryEntry(kind="room", category=caption.room,
                                  position=pose.position.copy(), observer=pose)
        inserted.append(store.insert(entry, scene_id, encoder))

    for det in detections:
        key = f"{det.category}@{det.position[0]:.2f},{det.position[1]:.2f}"
        entry = GlobalMemoryEntry(kind="target", category=det.category,
                                  position=det.position,
                                  description=det.description, observer=pose)
        if key not in targets:
            inserted.append(store.insert(entry, scene_id, encoder))
        else:
            old_idx, old = targets[key]
            d_new = float(np.linalg.norm(pose.position[:2] - det.position[:2]))
            d_old = float(np.linalg.norm(
                old.observer.position[:2] - det.position[:2])) if old.observer else np.inf
            if d_new < d_old - 0.5:
                store.supersede(old_idx)
                inserted.append(store.insert(entry, scene_id, encoder))

    if gate_open:
        entry = build_local_entry(
            observation_ref=f"step{step:03d}", detections=detections,
            scene_caption=caption, step=step, decision=last_decision,
            state=pose, space_description=caption.description)
        inserted.append(store.insert(entry, scene_id, encoder, image=obs.rgb))
    return inserted


def _finish(trace, oracle, question, ans_ctx, pose, obs, meta, step) -> None:
    trace.stop_step = step
    answer = answer_question(oracle, question, ans_ctx, pose, obs.rgb, meta)
    trace.answer = answer
    trace.answered = answer is not None
    if question.kind == "mc":
        trace.correct = answer == question.answer
    else:
        trace.correct = (answer or "").strip().lower() == \
            question.open_answer.strip().lower()


def load_scene_for_trace(header: dict) -> Scene:
    if header["scene_path"]:
        return load_scene(header["scene_path"])
    return load_bundled_scene(header["scene_name"])


def replay_episode(trace_path: str | Path) -> tuple[bool, str, str]:
    """Re-run an episode from its trace header and compare serializations.
    Returns (identical, original_text, replay_text)."""
    original = Path(trace_path).read_text(encoding="utf-8")
    header = load_trace_header(trace_path)
    scene = load_scene_for_trace(header)
    question = question_from_header(header)
    hp = HyperParams(**header["config"])
    store = None
    if header["bank_path"]:
        store = MemoryStore.load(header["bank_path"])
    result = run_episode(scene, question, hp, store=store,
                         inject=header["inject"],
                         scene_path=header["scene_path"],
                         bank_path=header["bank_path"])
    replay = result.trace.to_jsonl()
    return replay == original, original, replay
