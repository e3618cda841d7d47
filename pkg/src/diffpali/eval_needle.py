"""Multimodal needle-in-a-haystack harness for a 2x2 stitched grid.

Each sample draws grid_n² distinct images from a captioned pool, hides one of
them (the needle) at a uniformly chosen cell, stitches the grid, and asks the
model two binary questions: top or bottom, then left or right. The answers
map to a (row, col) prediction scored against the needle's true cell.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .checkpoint import atomic_write_text
from .imageio import ImageDecodeError, load_image, resize_bilinear, to_rgb
from .model import ContextOverflowError
from .tensor import ContractError, make_rng

log = logging.getLogger(__name__)

SUB_IMAGE_SIZE = 224
UNPARSEABLE = "unparseable"
AXIS_WORDS = {"vertical": ("top", "bottom"), "horizontal": ("left", "right")}
QUESTIONS = {"vertical": "Where is the caption? Top or Bottom?",
             "horizontal": "Where is the caption? Left or Right?"}


@dataclass
class NeedleConfig:
    grid_n: int = 2
    stitched_count: int = 1
    sample_limit: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.grid_n < 2:
            raise ContractError("grid_n must be >= 2")
        if self.sample_limit < 1:
            raise ContractError("sample_limit must be >= 1")
        if self.stitched_count != 1:
            raise ContractError("only one stitched image per sample is supported")


@dataclass
class PoolItem:
    image: Path
    caption: str


@dataclass
class NeedleSample:
    index: int
    sources: list[PoolItem]  # row-major, grid_n² entries
    needle_row: int
    needle_col: int
    grid_n: int
    image: np.ndarray | None = None

    @property
    def needle(self) -> PoolItem:
        return self.sources[self.needle_row * self.grid_n + self.needle_col]

    @property
    def caption(self) -> str:
        return self.needle.caption


@dataclass
class CellReport:
    grid_n: int
    trials: np.ndarray = None
    correct: np.ndarray = None

    def __post_init__(self):
        if self.trials is None:
            self.trials = np.zeros((self.grid_n, self.grid_n), dtype=np.int64)
        if self.correct is None:
            self.correct = np.zeros((self.grid_n, self.grid_n), dtype=np.int64)

    def record(self, row: int, col: int, ok: bool) -> None:
        self.trials[row, col] += 1
        self.correct[row, col] += int(ok)

    @property
    def total_trials(self) -> int:
        return int(self.trials.sum())

    @property
    def index_accuracy(self) -> float:
        return float(self.correct.sum()) / self.total_trials if self.total_trials else 0.0

    def cell_accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.trials > 0, self.correct / np.maximum(self.trials, 1), np.nan)

    def summary(self) -> dict:
        acc = self.cell_accuracy()
        return {
            "index_accuracy": self.index_accuracy,
            "index_accuracy_pct": 100.0 * self.index_accuracy,
            "trials": self.total_trials,
            "per_cell": [[{"row": r, "col": c, "trials": int(self.trials[r, c]),
                           "correct": int(self.correct[r, c]),
                           "accuracy": None if np.isnan(acc[r, c]) else float(acc[r, c])}
                          for c in range(self.grid_n)] for r in range(self.grid_n)],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        acc = self.cell_accuracy()
        for r in range(self.grid_n):
            writer.writerow(["" if np.isnan(a) else f"{a:.6f}" for a in acc[r]])
        return buf.getvalue()


# -- image preparation -------------------------------------------------------------

def preprocess(image: np.ndarray, size: int = SUB_IMAGE_SIZE) -> np.ndarray:
    """RGB, bilinear-resized to size x size, clipped to [0, 1]."""
    return np.clip(resize_bilinear(to_rgb(image), size), 0.0, 1.0)


def stitch(subimages: list[np.ndarray], grid_n: int, out_size: int | None = None) -> np.ndarray:
    """Row-major grid: image k lands in cell (k // grid_n, k % grid_n).

    The full-resolution mosaic is resized to ``out_size`` when given.
    """
    if len(subimages) != grid_n * grid_n:
        raise ContractError(f"stitch needs {grid_n * grid_n} sub-images, got {len(subimages)}")
    shapes = {s.shape for s in subimages}
    if len(shapes) != 1:
        raise ContractError(f"sub-images differ in shape: {sorted(shapes)}")
    rows = [np.concatenate(subimages[r * grid_n:(r + 1) * grid_n], axis=1) for r in range(grid_n)]
    mosaic = np.concatenate(rows, axis=0)
    return mosaic if out_size is None else resize_bilinear(mosaic, out_size)


# -- prompting and parsing -----------------------------------------------------------

def build_prompts(caption: str) -> tuple[str, str]:
    if not caption.strip():
        raise ContractError("needle caption is empty")
    return f"{caption} {QUESTIONS['vertical']}", f"{caption} {QUESTIONS['horizontal']}"


def parse_response(text: str, axis: str) -> str:
    """The single axis word found in ``text`` (case-insensitive), else UNPARSEABLE."""
    words = AXIS_WORDS[axis]
    low = text.lower()
    hits = [w for w in words if w in low]
    return hits[0] if len(hits) == 1 else UNPARSEABLE


def map_coordinates(vertical: str, horizontal: str) -> tuple[int, int] | None:
    """(top|bottom, left|right) -> (row, col) on the 2x2 grid; None if either is unparseable."""
    rows = {"top": 0, "bottom": 1}
    cols = {"left": 0, "right": 1}
    if vertical not in rows or horizontal not in cols:
        return None
    return rows[vertical], cols[horizontal]


# -- responders ----------------------------------------------------------------------

class Responder(Protocol):
    def __call__(self, sample: NeedleSample, image: np.ndarray, prompt: str, axis: str) -> str: ...


def oracle_responder(sample, image, prompt, axis) -> str:
    if axis == "vertical":
        return "Top" if sample.needle_row == 0 else "Bottom"
    return "Left" if sample.needle_col == 0 else "Right"


def inverted_responder(sample, image, prompt, axis) -> str:
    if axis == "vertical":
        return "Bottom" if sample.needle_row == 0 else "Top"
    return "Right" if sample.needle_col == 0 else "Left"


def constant_responder(vertical: str, horizontal: str) -> Responder:
    def respond(sample, image, prompt, axis):
        return vertical if axis == "vertical" else horizontal
    return respond


def random_responder(seed: int) -> Responder:
    rng = make_rng(seed)

    def respond(sample, image, prompt, axis):
        return AXIS_WORDS[axis][int(rng.integers(2))].capitalize()
    return respond


def model_responder(model, max_new: int = 4) -> Responder:
    """Greedy answers from a ToyVLM; the stitched image is resized to its input size."""
    def respond(sample, image, prompt, axis):
        ids = model.generate_greedy(model.preprocess(image), model.tokenizer.prompt_ids(prompt), max_new)
        return model.tokenizer.decode(ids)
    return respond


# -- harness ---------------------------------------------------------------------------

def load_manifest(path) -> list[PoolItem]:
    """JSON-lines {image, caption}; relative image paths resolve against the manifest."""
    path = Path(path)
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                image = Path(obj["image"])
                items.append(PoolItem(image if image.is_absolute() else path.parent / image, str(obj["caption"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ContractError(f"{path}:{lineno}: malformed manifest entry ({exc})") from exc
    return items


def draw_sample(pool: list[PoolItem], grid_n: int, rng: np.random.Generator, index: int = 0) -> NeedleSample:
    """grid_n² distinct pool items in random order plus a uniformly chosen needle cell."""
    k = grid_n * grid_n
    if len(pool) < k:
        raise ContractError(f"pool of {len(pool)} images cannot fill a {grid_n}x{grid_n} grid")
    picks = rng.choice(len(pool), size=k, replace=False)
    cell = int(rng.integers(k))
    row, col = divmod(cell, grid_n)
    return NeedleSample(index, [pool[i] for i in picks], row, col, grid_n)


class _ImageCache:
    def __init__(self):
        self._cache: dict[Path, np.ndarray] = {}

    def get(self, path: Path) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = preprocess(load_image(path))
        return self._cache[path]


def run_needle_eval(responder: Responder, pool: list[PoolItem], cfg: NeedleConfig,
                    out_dir=None, model_input_size: int | None = None) -> tuple[CellReport, list[dict]]:
    """Run ``cfg.sample_limit`` samples; returns the CellReport and per-sample log rows.

    Samples whose images fail to decode, or whose prompt overflows the model
    context, are skipped and logged. With ``out_dir``, writes ``cells.csv``,
    ``summary.json`` and ``samples.jsonl`` (caption/distractor audit trail).
    """
    if cfg.grid_n != 2:
        raise ContractError("the two-step top/bottom, left/right protocol is defined for grid_n = 2 only")
    rng = make_rng(cfg.seed)
    cache = _ImageCache()
    report = CellReport(cfg.grid_n)
    rows = []
    for i in range(cfg.sample_limit):
        sample = draw_sample(pool, cfg.grid_n, rng, i)
        entry = {"index": i, "needle": [sample.needle_row, sample.needle_col], "caption": sample.caption,
                 "sources": [str(s.image) for s in sample.sources],
                 "distractor_captions": [s.caption for s in sample.sources if s is not sample.needle]}
        try:
            sample.image = stitch([cache.get(s.image) for s in sample.sources], cfg.grid_n, model_input_size)
        except (ImageDecodeError, OSError) as exc:
            log.warning("sample %d skipped: %s", i, exc)
            rows.append({**entry, "skipped": f"undecodable image: {exc}"})
            continue
        v_prompt, h_prompt = build_prompts(sample.caption)
        try:
            v_text = responder(sample, sample.image, v_prompt, "vertical")
            h_text = responder(sample, sample.image, h_prompt, "horizontal")
        except ContextOverflowError as exc:
            log.warning("sample %d skipped: %s", i, exc)
            rows.append({**entry, "skipped": f"context overflow: {exc}"})
            continue
        pred = map_coordinates(parse_response(v_text, "vertical"), parse_response(h_text, "horizontal"))
        ok = pred == (sample.needle_row, sample.needle_col)
        report.record(sample.needle_row, sample.needle_col, ok)
        rows.append({**entry, "responses": [v_text, h_text],
                     "prediction": list(pred) if pred else None, "correct": ok})
    if out_dir is not None:
        write_outputs(out_dir, report, rows)
    return report, rows


def write_outputs(out_dir, report: CellReport, rows: list[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "cells.csv", report.to_csv())
    atomic_write_text(out / "summary.json", json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "samples.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
