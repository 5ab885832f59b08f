"""Evaluation metrics and the ablation harness.

Metrics are pure functions of traces: aggregating a directory of trace files
never re-runs an episode. The model-judged score needs a configured oracle
endpoint; without one the column simply does not exist.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .agent import run_episode
from .config import HyperParams
from .errors import OracleError
from .memory import MemoryStore
from .oracle import OracleRequest, build_prompt
from .questions import Question
from .simulator import Scene

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _tokens(text: str) -> list[str]:
    """Lowercased whitespace tokens with punctuation stripped."""
    return _TOKEN_RE.findall(text.lower())


def _lcs_len(a: list[str], b: list[str]) -> int:
    """Longest common subsequence length, bottom-up over rolling rows."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """2 * LCS(C, R) / (|R| + |C|) over word tokens."""
    c = _tokens(candidate)
    r = _tokens(reference)
    if not c and not r:
        log.warning("rouge_l of two empty strings defined as 0")
        return 0.0
    denom = len(c) + len(r)
    if denom == 0:
        return 0.0
    return 2.0 * _lcs_len(c, r) / denom


def norm_step(episodes: list[tuple[float, float]], gamma_s: float) -> float:
    """Mean of N_i / (sqrt(S_i) * gamma_s) over (steps, room area) pairs."""
    if not episodes:
        raise ValueError("norm_step of an empty episode list")
    if gamma_s <= 0:
        raise ValueError("gamma_s must be positive")
    total = 0.0
    for n_i, s_i in episodes:
        if s_i <= 0:
            raise ValueError(f"room size must be positive, got {s_i}")
        total += n_i / ((s_i ** 0.5) * gamma_s)
    return total / len(episodes)


def success_rate(predictions: list[str | None], golds: list[str]) -> float:
    """Percent of exact letter matches; unanswered (None) counts as wrong."""
    if len(predictions) != len(golds):
        raise ValueError(
            f"got {len(predictions)} predictions for {len(golds)} golds")
    if not golds:
        raise ValueError("success_rate of empty lists")
    hits = sum(1 for p, g in zip(predictions, golds) if p is not None and p == g)
    return 100.0 * hits / len(golds)


_SCORE_RE = re.compile(r"\b([1-5])\b")


def judge_score(oracle, question_text: str, reference: str,
                candidate: str) -> float | None:
    """1-5 rating from a judge oracle; None when the reply is unusable or the
    call fails."""
    prompt = build_prompt("judge", question=question_text,
                          reference=reference, candidate=candidate)
    try:
        resp = oracle.complete(OracleRequest("judge", prompt, []))
    except OracleError as exc:
        log.warning("judge call failed: %s", exc)
        return None
    m = _SCORE_RE.search(resp.text)
    if not m:
        log.warning("judge reply %r carries no 1-5 score", resp.text)
        return None
    return float(m.group(1))


@dataclass
class EpisodeRow:
    scene: str
    question_id: str
    inject: str
    kind: str
    answer: str | None
    gold: str
    correct: bool
    steps: int
    max_steps: int
    area_m2: float
    rouge: float | None = None


@dataclass
class MetricsReport:
    inject: str
    success: float
    mean_rouge: float | None
    mean_norm_step: float
    rows: list[EpisodeRow] = field(default_factory=list)

    def summary(self) -> str:
        rouge = f"{self.mean_rouge:.3f}" if self.mean_rouge is not None else "-"
        label = self.inject if self.inject else "None"
        return (f"{label:<5} success {self.success:6.1f}%  "
                f"rouge_l {rouge:>6}  norm_step {self.mean_norm_step:.3f}")


def report_from_rows(inject: str, rows: list[EpisodeRow],
                     gamma_s: float) -> MetricsReport:
    """Success counts exact-gold answers across all rows (letters for MC,
    the gold sentence for open questions); ROUGE_L averages over open rows."""
    if not rows:
        raise ValueError("report over zero rows")
    succ = 100.0 * sum(1 for r in rows if r.correct) / len(rows)
    rouges = [r.rouge for r in rows if r.rouge is not None]
    mean_rouge = sum(rouges) / len(rouges) if rouges else None
    ns = norm_step([(r.steps, r.area_m2) for r in rows], gamma_s)
    return MetricsReport(inject=inject, success=succ, mean_rouge=mean_rouge,
                         mean_norm_step=ns, rows=rows)


def row_from_trace(trace) -> EpisodeRow:
    q = trace.question
    rouge = None
    if q.kind == "open" and trace.answer is not None:
        rouge = rouge_l(trace.answer, q.open_answer)
    return EpisodeRow(
        scene=trace.scene_name, question_id=q.question_id, inject=trace.inject,
        kind=q.kind, answer=trace.answer,
        gold=q.answer if q.kind == "mc" else q.open_answer,
        correct=trace.correct, steps=trace.n_steps, max_steps=trace.max_steps,
        area_m2=trace.area_m2, rouge=rouge)


ABLATION_ROWS = ("", "S", "SA", "SAP")


def ablate(episodes: list[tuple[Scene, Question]], hp: HyperParams,
           flag_sets: tuple[str, ...] = ABLATION_ROWS,
           bank: str | Path | None = None) -> dict[str, MetricsReport]:
    """Run every episode under each injection flag set and report per set.
    Episode failures are recorded as unanswered rows, not fatal."""
    if not episodes:
        raise ValueError("ablate requires at least one (scene, question) pair")
    reports = {}
    for flags in flag_sets:
        rows = []
        for scene, question in episodes:
            store = MemoryStore.load(bank) if bank else None
            try:
                result = run_episode(scene, question, hp, inject=flags,
                                     store=store)
                rows.append(row_from_trace(result.trace))
            except Exception as exc:  # noqa: BLE001 - harness must survive
                log.error("episode %s/%s [%s] failed: %s",
                          scene.name, question.question_id, flags, exc)
                rows.append(EpisodeRow(
                    scene=scene.name, question_id=question.question_id,
                    inject=flags, kind=question.kind, answer=None,
                    gold=question.answer or question.open_answer,
                    correct=False, steps=hp.max_steps(scene.area_m2()),
                    max_steps=hp.max_steps(scene.area_m2()),
                    area_m2=scene.area_m2()))
        reports[flags] = report_from_rows(flags, rows, hp.gamma_s)
    return reports
