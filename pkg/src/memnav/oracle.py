"""The model-oracle boundary.

Everything a vision-language model would do passes through one interface:
build a prompt from a template, send it with images, parse the reply under
that template's grammar. `ScriptedOracle` answers from simulator ground truth
and the context text it is handed — and only from that context, so memory
injection is observable in tests. `RemoteOracle` speaks JSON-over-HTTP to a
real model endpoint. Parsers never raise on malformed replies; every failure
maps to a documented fallback.
"""

from __future__ import annotations

import base64
import io
import logging
import os
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import OracleTransportError, OversizeImageError
from .memory import SceneCaption
from .questions import Question, all_satisfied, unsatisfied_positions
from .update_gate import black_fraction

log = logging.getLogger(__name__)

TEMPLATES = {
    "scene_caption": (
        "Describe this image. Output in the following format:\n"
        "```\n"
        "Room: <room>\n"
        "Object: <obj1>, <obj2>,...\n"
        "Description: <description>\n"
        "```"
    ),
    "object_caption": (
        "Please describe the category, attribute, and description of the object.\n"
        "Output in the following format:\n"
        "```\n"
        "cate: [category]\n"
        "attr: [attribute]\n"
        "desc: [description]\n"
        "```"
    ),
    "confidence": (
        "Consider the question: '{question}'. How confident are you in "
        "answering this question from your current perspective?\n"
        "A. Very low\n"
        "B. Low\n"
        "C. Medium\n"
        "D. High\n"
        "E. Very high\n"
        "Answer with the option's letter from the given choices directly."
    ),
    "direction": (
        "Consider the question: '{question}', and you will explore the "
        "environment for answering it.\n"
        "Which direction (black letters on the image) would you explore then? "
        "Provide reasons and answer with a single letter."
    ),
    "answer_mc": (
        "{question} Answer with the option's letter from the given choices directly."
    ),
    "answer_open": (
        "{question} Answer with the brief sentence."
    ),
    # the judge prompt used for model-scored grading is not public; this
    # placeholder documents the slot until one is supplied
    "judge": (
        "[judge prompt placeholder] Rate how well the candidate answer "
        "matches the reference answer from 1 to 5.\n"
        "Question: {question}\nReference: {reference}\nCandidate: {candidate}"
    ),
}

CONFIDENCE_VALUES = {"A": 0.0, "B": 0.25, "C": 0.5, "D": 0.75, "E": 1.0}


@dataclass
class OracleRequest:
    template_id: str
    prompt: str
    images: list[np.ndarray] = field(default_factory=list)
    # ground-truth hooks for the scripted backend; never sent over the wire
    meta: dict[str, Any] = field(default_factory=dict)


@dataclass
class OracleResponse:
    text: str
    payload: Any = None
    warnings: list[str] = field(default_factory=list)


def build_prompt(template_id: str, context_lines: list[str] | None = None,
                 **fields) -> str:
    """Fill a template and prepend rendered context memories, if any."""
    body = TEMPLATES[template_id].format(**fields)
    if context_lines:
        ctx = "\n".join(context_lines)
        return f"Context memories:\n{ctx}\n\n{body}"
    return body


# -- parsers (total: malformed input degrades, never raises) -------------------

_LINE_KEYS = {
    "scene_caption": ("room", "object", "description"),
    "object_caption": ("cate", "attr", "desc"),
}


def _key_lines(text: str, keys: tuple[str, ...]) -> dict[str, str]:
    found: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip().strip("`")
        if ":" not in line:
            continue
        key, _, value = line.partition(":")
        key = key.strip().lower()
        if key in keys and key not in found:
            found[key] = value.strip()
    return found


def parse_scene_caption(text: str) -> tuple[SceneCaption, list[str]]:
    got = _key_lines(text, _LINE_KEYS["scene_caption"])
    warnings = [f"scene caption missing '{k}' line"
                for k in _LINE_KEYS["scene_caption"] if k not in got]
    objects = tuple(o.strip() for o in got.get("object", "").split(",") if o.strip())
    return SceneCaption(room=got.get("room", ""), objects=objects,
                        description=got.get("description", "")), warnings


def parse_object_caption(text: str) -> tuple[tuple[str, str, str], list[str]]:
    got = _key_lines(text, _LINE_KEYS["object_caption"])
    warnings = [f"object caption missing '{k}' line"
                for k in _LINE_KEYS["object_caption"] if k not in got]
    return (got.get("cate", ""), got.get("attr", ""), got.get("desc", "")), warnings


_LETTER_RE = re.compile(r"\b([A-Z])\b")


def parse_letter(text: str, valid: str) -> str | None:
    """Last standalone capital letter within the valid range (reasons come
    first, the answer last). None when no valid letter appears."""
    letters = [m.group(1) for m in _LETTER_RE.finditer(text)]
    for letter in reversed(letters):
        if letter in valid:
            return letter
    return None


# -- high-level calls -----------------------------------------------------------


def describe_scene(oracle, image: np.ndarray, meta: dict | None = None) -> SceneCaption:
    req = OracleRequest("scene_caption", build_prompt("scene_caption"),
                        images=[image], meta=meta or {})
    resp = oracle.complete(req)
    caption, warnings = parse_scene_caption(resp.text)
    for w in warnings:
        log.warning("describe_scene: %s", w)
    return caption


def describe_object(oracle, crop: np.ndarray, meta: dict | None = None) -> tuple[str, str, str]:
    req = OracleRequest("object_caption", build_prompt("object_caption"),
                        images=[crop], meta=meta or {})
    resp = oracle.complete(req)
    payload, warnings = parse_object_caption(resp.text)
    for w in warnings:
        log.warning("describe_object: %s", w)
    return payload


def ask_confidence(oracle, question_text: str, context_lines: list[str],
                   image: np.ndarray, meta: dict | None = None) -> str:
    """Confidence letter A..E; unparsable replies collapse to A (lowest)."""
    if not question_text:
        raise ValueError("confidence requires a non-empty question")
    prompt = build_prompt("confidence", context_lines, question=question_text)
    resp = oracle.complete(OracleRequest("confidence", prompt, [image], meta or {}))
    letter = parse_letter(resp.text, "ABCDE")
    if letter is None:
        log.warning("confidence reply %r has no valid letter; treating as A", resp.text)
        return "A"
    return letter


def choose_direction(oracle, question_text: str, annotated: np.ndarray,
                     labels: list[str], context_lines: list[str],
                     meta: dict | None = None) -> str | None:
    """Candidate letter, or None as the fallback signal (caller uses the
    nearest frontier)."""
    if not 1 <= len(labels) <= 26:
        raise ValueError(f"need 1..26 candidate labels, got {len(labels)}")
    prompt = build_prompt("direction", context_lines, question=question_text)
    resp = oracle.complete(OracleRequest("direction", prompt, [annotated],
                                         dict(meta or {}, labels=list(labels))))
    letter = parse_letter(resp.text, "".join(labels))
    if letter is None:
        log.warning("direction reply %r outside labels %s", resp.text, labels)
    return letter


def answer_closed(oracle, question_text: str, options: list[str],
                  context_lines: list[str], image: np.ndarray,
                  meta: dict | None = None) -> str | None:
    """Option letter, or None (counts as unanswered/wrong) when invalid."""
    prompt = build_prompt("answer_mc", context_lines, question=question_text)
    resp = oracle.complete(OracleRequest("answer_mc", prompt, [image], meta or {}))
    letter = parse_letter(resp.text, "".join(options))
    if letter is None:
        log.warning("closed answer %r not among options %s", resp.text, options)
    return letter


def answer_open(oracle, question_text: str, context_lines: list[str],
                image: np.ndarray, meta: dict | None = None) -> str:
    prompt = build_prompt("answer_open", context_lines, question=question_text)
    resp = oracle.complete(OracleRequest("answer_open", prompt, [image], meta or {}))
    return resp.text.strip()


# -- scripted backend -------------------------------------------------------------


def _context_from_prompt(prompt: str) -> list[str]:
    """Recover the injected context lines from a built prompt. The scripted
    oracle reads only what a real model would see."""
    if not prompt.startswith("Context memories:\n"):
        return []
    body = prompt[len("Context memories:\n"):]
    ctx = body.split("\n\n", 1)[0]
    return ctx.splitlines()


class ScriptedOracle:
    """Deterministic oracle driven by scene ground truth.

    The scripted rules make memory injection observable: confidence is high
    and answers are correct only when every question entity is revealed by
    the provided context plus the currently visible detections; directions
    steer toward the nearest entity the context has NOT yet revealed.
    """

    def __init__(self, scene, seed: int = 0):
        self.scene = scene
        self.seed = seed

    def complete(self, request: OracleRequest) -> OracleResponse:
        handler = getattr(self, f"_do_{request.template_id}", None)
        if handler is None:
            return OracleResponse(text="")
        return handler(request)

    # each handler emits text in its template's output grammar, so the
    # normal parsers run against scripted replies too

    def _do_scene_caption(self, req: OracleRequest) -> OracleResponse:
        if req.images and black_fraction(req.images[0]) > 0.98:
            # nothing visible; emit an empty, still well-formed block
            return OracleResponse(text="Room:\nObject:\nDescription:")
        dets = req.meta.get("detections", [])
        pose = req.meta.get("pose")
        room = ""
        if pose is not None:
            room = self.scene.room_of(pose.xy)
        if not room and dets:
            room = dets[0].room
        cats = ", ".join(dict.fromkeys(d.category for d in dets))
        if room or cats:
            desc = f"a {room or 'space'} with {cats}" if cats else f"an empty {room}"
        else:
            desc = ""
        text = f"Room: {room}\nObject: {cats}\nDescription: {desc}"
        return OracleResponse(text=text)

    def _do_object_caption(self, req: OracleRequest) -> OracleResponse:
        det = req.meta.get("detection")
        if det is None:
            return OracleResponse(text="cate: unknown\nattr:\ndesc:")
        x, y = float(det.position[0]), float(det.position[1])
        where = f" in the {det.room}" if det.room else ""
        desc = f"a {det.attribute} {det.category}{where} near ({x:.2f}, {y:.2f})"
        text = f"cate: {det.category}\nattr: {det.attribute}\ndesc: {desc}"
        return OracleResponse(text=text)

    def _context_plus_view(self, req: OracleRequest) -> list[str]:
        lines = _context_from_prompt(req.prompt)
        for det in req.meta.get("detections", []):
            if det.description:
                lines.append(det.text())
        return lines

    def _do_confidence(self, req: OracleRequest) -> OracleResponse:
        question: Question | None = req.meta.get("question")
        if question is None:
            return OracleResponse(text="A")
        lines = self._context_plus_view(req)
        letter = "E" if all_satisfied(question, lines, self.scene) else "B"
        return OracleResponse(text=letter)

    def _do_direction(self, req: OracleRequest) -> OracleResponse:
        question: Question | None = req.meta.get("question")
        labels: list[str] = req.meta.get("labels", [])
        positions: list[np.ndarray] = req.meta.get("candidate_positions", [])
        if not labels:
            return OracleResponse(text="")
        if question is None or len(positions) != len(labels):
            return OracleResponse(text=f"No preference. {labels[0]}")
        lines = _context_from_prompt(req.prompt)
        targets = unsatisfied_positions(question, lines, self.scene)
        if not targets:
            return OracleResponse(text=f"All targets are known. {labels[0]}")
        best, best_d = labels[0], float("inf")
        for letter, pos in zip(labels, positions):
            d = min(float(np.hypot(*(pos[:2] - t))) for t in targets)
            if d < best_d - 1e-9:
                best, best_d = letter, d
        return OracleResponse(
            text=f"The missing target looks closest to that side. {best}")

    def _do_answer_mc(self, req: OracleRequest) -> OracleResponse:
        question: Question | None = req.meta.get("question")
        if question is None or not question.options:
            return OracleResponse(text="A")
        lines = self._context_plus_view(req)
        if all_satisfied(question, lines, self.scene):
            return OracleResponse(text=question.answer)
        # deterministic wrong-but-valid distractor
        gold = question.options.index(question.answer)
        wrong = question.options[(gold + 1) % len(question.options)]
        return OracleResponse(text=wrong)

    def _do_answer_open(self, req: OracleRequest) -> OracleResponse:
        question: Question | None = req.meta.get("question")
        if question is None:
            return OracleResponse(text="I cannot tell.")
        lines = self._context_plus_view(req)
        if all_satisfied(question, lines, self.scene):
            return OracleResponse(text=question.open_answer)
        return OracleResponse(text="I could not find that during exploration.")

    def _do_judge(self, req: OracleRequest) -> OracleResponse:
        return OracleResponse(text="3")


# -- remote backend ------------------------------------------------------------


@dataclass
class EndpointConfig:
    url: str
    auth_env: str = "MEMNAV_ORACLE_TOKEN"
    timeout_s: float = 30.0
    retries: int = 2
    max_image_bytes: int = 1_000_000


def _png_bytes(image: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.asarray(image, dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


class RemoteOracle:
    """JSON-over-HTTP client: POST {template_id, prompt, images:[b64 png]},
    expect {"text": ...}. A custom transport callable may replace HTTP (tests
    use an echoing stub)."""

    def __init__(self, config: EndpointConfig,
                 transport: Callable[[dict], str] | None = None):
        self.config = config
        self._transport = transport or self._http_transport

    def _http_transport(self, payload: dict) -> str:
        import requests

        headers = {}
        token = os.environ.get(self.config.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(self.config.url, json=payload,
                                 headers=headers, timeout=self.config.timeout_s)
        except requests.RequestException as exc:
            raise OracleTransportError(f"oracle endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise OracleTransportError(
                f"oracle endpoint returned HTTP {resp.status_code}")
        return resp.json().get("text", "")

    def complete(self, request: OracleRequest) -> OracleResponse:
        images = []
        for img in request.images:
            blob = _png_bytes(img)
            if len(blob) > self.config.max_image_bytes:
                raise OversizeImageError(
                    f"image of {len(blob)} bytes exceeds cap "
                    f"{self.config.max_image_bytes}")
            images.append(base64.b64encode(blob).decode("ascii"))
        payload = {"template_id": request.template_id,
                   "prompt": request.prompt,
                   "images": images}
        last: Exception | None = None
        for attempt in range(self.config.retries + 1):
            try:
                return OracleResponse(text=self._transport(payload))
            except OracleTransportError as exc:
                last = exc
                log.warning("oracle call failed (attempt %d/%d): %s",
                            attempt + 1, self.config.retries + 1, exc)
                if attempt < self.config.retries:
                    time.sleep(min(0.05 * 2 ** attempt, 1.0))
        raise OracleTransportError(f"oracle call failed after retries: {last}")
