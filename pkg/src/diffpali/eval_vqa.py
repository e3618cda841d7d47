"""VQAv2-style consensus scoring: score = min(n(a) / 3, 1) over 10 references."""
from __future__ import annotations

import json
import logging
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import atomic_write_text
from .imageio import ImageDecodeError, load_image
from .model import ContextOverflowError
from .tensor import ContractError

log = logging.getLogger(__name__)

N_REFERENCES = 10

_NUMBER_WORDS = {"zero": "0", "one": "1", "two": "2", "three": "3", "four": "4", "five": "5",
                 "six": "6", "seven": "7", "eight": "8", "nine": "9", "ten": "10"}
_PUNCT = "".join(c for c in string.punctuation if c != ".")
_PUNCT_RE = re.compile("[" + re.escape(_PUNCT) + "]")
_NON_DECIMAL_POINT = re.compile(r"(?<!\d)\.|\.(?!\d)")


@dataclass
class VqaRecord:
    image: Path
    question: str
    answers: list[str]

    def __post_init__(self):
        if len(self.answers) != N_REFERENCES:
            raise ContractError(f"expected {N_REFERENCES} reference answers, got {len(self.answers)}")
        if not self.question.strip():
            raise ContractError("empty question")


def load_records(path) -> list[VqaRecord]:
    """JSON-lines {image, question, answers}; image paths resolve relative to the file."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                image = Path(obj["image"])
                records.append(VqaRecord(image if image.is_absolute() else path.parent / image,
                                         str(obj["question"]), [str(a) for a in obj["answers"]]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ContractError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return records


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation (keeping decimal points between digits),
    collapse whitespace, and map number words zero..ten to digits."""
    s = s.lower()
    s = _NON_DECIMAL_POINT.sub(" ", _PUNCT_RE.sub(" ", s))
    return " ".join(_NUMBER_WORDS.get(w, w) for w in s.split())


def score_answer(pred: str, refs: list[str]) -> float:
    if len(refs) != N_REFERENCES:
        raise ContractError(f"expected {N_REFERENCES} reference answers, got {len(refs)}")
    p = normalize_answer(pred)
    n = sum(normalize_answer(r) == p for r in refs)
    return min(n / 3, 1.0)


def aggregate(scores: list[float]) -> float:
    """VQAv2 score units: 100 x mean per-record score."""
    return 100.0 * float(np.mean(scores)) if scores else 0.0


def run_vqa_eval(answer: Callable[[np.ndarray, str], str], records: list[VqaRecord],
                 limit: int | None = None, out_path=None, workers: int = 1) -> tuple[float, list[dict]]:
    """Score ``answer(pixels, question)`` on each record.

    Unreadable images score 0 and are flagged; the run continues. Returns the
    aggregate (x100) and per-record rows, which are also written as JSON lines
    to ``out_path`` when given. ``workers > 1`` scores records on a thread
    pool; row order and results do not depend on the worker count.
    """
    def score_one(rec: VqaRecord) -> dict:
        row = {"image": str(rec.image), "question": rec.question}
        try:
            pixels = load_image(rec.image)
        except (ImageDecodeError, OSError) as exc:
            log.warning("unreadable image %s: %s", rec.image, exc)
            row.update(prediction=None, score=0.0, flag="unreadable_image")
            return row
        try:
            pred = answer(pixels, rec.question)
        except ContextOverflowError as exc:
            log.warning("context overflow on %s: %s", rec.image, exc)
            row.update(prediction=None, score=0.0, flag="context_overflow")
            return row
        row.update(prediction=pred, score=score_answer(pred, rec.answers), flag=None)
        return row

    chosen = records[:limit] if limit is not None else records
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score_one, chosen))
    else:
        rows = [score_one(rec) for rec in chosen]
    total = aggregate([r["score"] for r in rows])
    if out_path is not None:
        atomic_write_text(out_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return total, rows
