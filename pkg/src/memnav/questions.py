"""Question fixtures: what the agent is asked, plus the ground truth needed
by the scripted oracle (gold answer and which entities the context must
reveal before the question is answerable).

Entity matching is intentionally text-based: the oracle sees only rendered
context lines, so whether memory was injected into a module is observable
from the outside.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

_COORD_RE = re.compile(r"\((-?\d+(?:\.\d+)?),\s*(-?\d+(?:\.\d+)?)\)")


@dataclass
class EntitySpec:
    """One thing the context must reveal: a category, optionally pinned to a
    room, optionally with its attribute visible, optionally several distinct
    instances (for counting)."""

    category: str
    room: str | None = None
    require_attribute: bool = False
    min_count: int = 1


@dataclass
class Question:
    question_id: str
    text: str
    kind: str                     # "mc" | "open"
    options: list[str] = field(default_factory=list)
    answer: str = ""              # gold option letter (mc) or "" (open)
    open_answer: str = ""         # gold sentence (open)
    entities: list[EntitySpec] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("mc", "open"):
            raise ValueError(f"question kind must be mc|open, got {self.kind!r}")
        if self.kind == "mc" and self.answer not in self.options:
            raise ValueError(
                f"question {self.question_id}: answer {self.answer!r} not in options")


def load_questions(path: str | Path) -> list[Question]:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or []
    out = []
    for item in raw:
        ents = [EntitySpec(category=e["category"], room=e.get("room"),
                           require_attribute=bool(e.get("require_attribute", False)),
                           min_count=int(e.get("min_count", 1)))
                for e in item.get("entities", [])]
        out.append(Question(
            question_id=str(item["id"]),
            text=item["text"],
            kind=item.get("kind", "mc"),
            options=[str(o) for o in item.get("options", [])],
            answer=str(item.get("answer", "")),
            open_answer=str(item.get("open_answer", "")),
            entities=ents,
        ))
    return out


def line_coords(line: str) -> list[tuple[float, float]]:
    return [(float(a), float(b)) for a, b in _COORD_RE.findall(line)]


def _line_mentions(line: str, obj, room: str, require_attribute: bool) -> bool:
    low = line.lower()
    if obj.category.lower() not in low:
        return False
    if room and room.lower() not in low:
        return False
    if require_attribute and obj.attribute.lower() not in low:
        return False
    coords = line_coords(line)
    if coords:
        near = any(np.hypot(cx - obj.position[0], cy - obj.position[1]) <= 0.5
                   for cx, cy in coords)
        if not near:
            return False
    return True


def _entity_report(question: Question, context_lines: list[str], scene):
    """Per entity: (spec, matching objects, set of found object ids). A line
    reveals an object when it mentions its category (and room, and attribute
    when required) and any coordinates it carries sit on that object."""
    report = []
    for ent in question.entities:
        candidates = [o for o in scene.objects
                      if o.category.lower() == ent.category.lower()
                      and (ent.room is None
                           or scene.room_of(o.position).lower() == ent.room.lower())]
        found = set()
        for line in context_lines:
            for o in candidates:
                if id(o) in found:
                    continue
                room = ent.room or scene.room_of(o.position)
                if _line_mentions(line, o, room, ent.require_attribute):
                    found.add(id(o))
        report.append((ent, candidates, found))
    return report


def satisfied_entities(question: Question, context_lines: list[str],
                       scene) -> list[bool]:
    return [len(found) >= ent.min_count
            for ent, _, found in _entity_report(question, context_lines, scene)]


def all_satisfied(question: Question, context_lines: list[str], scene) -> bool:
    if not question.entities:
        return True
    return all(satisfied_entities(question, context_lines, scene))


def unsatisfied_positions(question: Question, context_lines: list[str],
                          scene) -> list[np.ndarray]:
    """World positions of question-relevant objects not yet revealed by the
    context; used by the scripted direction chooser."""
    out = []
    for ent, candidates, found in _entity_report(question, context_lines, scene):
        if len(found) >= ent.min_count:
            continue
        for o in candidates:
            if id(o) not in found:
                out.append(np.array([o.position[0], o.position[1]]))
    return out
