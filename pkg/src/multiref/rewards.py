"""Rewards on three axes: integration, consistency and quality, each in [0, 10].

``ProgrammaticJudge`` scores synthetic tasks exactly from the references and
the structured instruction. ``RemoteJudge`` speaks a small JSON-over-HTTP
protocol to an external evaluator; ``serve_mock`` answers that protocol with
the programmatic judge.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np
from PIL import Image

from .instructions import BACKGROUND, CELLS, PALETTE, Instruction
from .rasters import RasterImage
from .taskgen import CANVAS, CELL, TAU_COLOR, cell_origin, place_offset

log = logging.getLogger(__name__)

RUBRIC_VERSION = "multiref-rubric-v1"
# Original rubric text for the mock protocol; not taken from any published template.
RUBRIC = """\
Score the candidate image against the instruction and reference images, 0-10 per axis:
integration - every element the instruction asks for appears where it should;
consistency - each placed element keeps the color and shape of its source;
quality - the rest of the canvas is clean background without artifacts.
Reply with JSON: {"integration": x, "consistency": y, "quality": z, "rationale": "..."}"""

DEFAULT_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)
DIMENSIONS = ("integration", "consistency", "quality")


class JudgeError(RuntimeError):
    pass


class JudgeUnavailable(JudgeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class MalformedResponse(JudgeError):
    def __init__(self, message: str, body: str):
        super().__init__(f"{message}; body: {body[:200]!r}")
        self.body = body


def total_reward(scores, weights=DEFAULT_WEIGHTS) -> float:
    w = np.asarray(weights, dtype=float)
    if w.shape != (3,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"weights must be three non-negative numbers, got {weights}")
    if w.sum() <= 0:
        raise ValueError("weights must not all be zero")
    s = np.asarray([scores.integration, scores.consistency, scores.quality] if hasattr(scores, "quality")
                   else scores, dtype=float)
    return float((w * s).sum() / w.sum())


@dataclass(frozen=True)
class RewardBreakdown:
    integration: float
    consistency: float
    quality: float
    total: float
    rationale: str | None = None

    @classmethod
    def from_scores(cls, integration, consistency, quality, weights=DEFAULT_WEIGHTS, rationale=None):
        s = (float(integration), float(consistency), float(quality))
        for name, v in zip(DIMENSIONS, s):
            if not 0.0 <= v <= 10.0:
                raise ValueError(f"{name} score {v} outside [0, 10]")
        return cls(*s, total=total_reward(s, weights), rationale=rationale)

    def scores(self) -> dict:
        return {"integration": self.integration, "consistency": self.consistency, "quality": self.quality}


class Judge(Protocol):
    kind: str

    def __call__(self, references: Sequence[RasterImage], instruction: Instruction,
                 candidate: RasterImage) -> RewardBreakdown: ...


# -- programmatic judge --------------------------------------------------------

@dataclass
class ExpectedElement:
    mask: np.ndarray            # tight mask
    color: tuple[int, int, int]
    cell: str


def _foreground(pixels: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(pixels.astype(float) - np.asarray(BACKGROUND, float), axis=-1)
    return d > TAU_COLOR / 2


def extract_element(pixels: np.ndarray) -> tuple[np.ndarray, tuple[int, int, int]] | None:
    """Tight foreground mask and dominant color of an image region, or None when empty."""
    fg = _foreground(pixels)
    if not fg.any():
        return None
    rows, cols = np.flatnonzero(fg.any(axis=1)), np.flatnonzero(fg.any(axis=0))
    mask = fg[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    colors, counts = np.unique(pixels[fg].reshape(-1, 3), axis=0, return_counts=True)
    color = tuple(int(c) for c in colors[int(np.argmax(counts))])
    return mask, color


def _cell_pixels(image: RasterImage, cell: str) -> np.ndarray:
    top, left = cell_origin(cell)
    return image.pixels[top:top + CELL, left:left + CELL]


def expected_layout(references: Sequence[RasterImage], instruction: Instruction):
    """Elements the instruction asks for, plus (mask, color, cell) triples that must be absent."""
    instruction.check_refs(len(references))
    elements: list[ExpectedElement] = []
    absent: list[ExpectedElement] = []
    edits = [d for d in instruction.directives if d.action != "PLACE"]
    for d in instruction.directives:
        if d.action == "PLACE":
            found = extract_element(references[d.ref_index - 1].pixels)
            if found is not None:
                elements.append(ExpectedElement(found[0], found[1], d.cell))
    if edits:
        scene = references[edits[0].ref_index - 1]
        current = {}
        for c in CELLS:
            found = extract_element(_cell_pixels(scene, c))
            if found is not None:
                current[c] = ExpectedElement(found[0], found[1], c)
        for d in edits:
            src = current.get(d.cell)
            if src is None:
                continue
            if d.action == "RECOLOR":
                current[d.cell] = ExpectedElement(src.mask, PALETTE[int(d.arg)], d.cell)
            elif d.action == "MOVE":
                del current[d.cell]
                current[d.arg] = ExpectedElement(src.mask, src.color, d.arg)
                absent.append(src)
            elif d.action == "REMOVE":
                del current[d.cell]
                absent.append(src)
        elements.extend(current[c] for c in CELLS if c in current)
    return elements, absent


def _placed_mask(e: ExpectedElement) -> np.ndarray:
    out = np.zeros((CELL, CELL), dtype=bool)
    top, left = place_offset(e.mask, 0, 0, CELL, CELL)
    out[top:top + e.mask.shape[0], left:left + e.mask.shape[1]] = e.mask
    return out


class ProgrammaticJudge:
    """Exact scorer for synthetic tasks (pure and deterministic)."""

    kind = "programmatic"

    def __init__(self, weights=DEFAULT_WEIGHTS, tau_color: float = TAU_COLOR, tau_area: float = 0.25):
        total_reward((0, 0, 0), weights)
        self.weights = tuple(weights)
        self.tau_color = tau_color
        self.tau_area = tau_area

    def _hits(self, candidate: RasterImage, e: ExpectedElement) -> np.ndarray:
        region = _cell_pixels(candidate, e.cell)
        return np.linalg.norm(region.astype(float) - np.asarray(e.color, float), axis=-1) <= self.tau_color

    def detected(self, references, instruction, candidate) -> tuple[int, int]:
        """(found, expected) counts over the elements the instruction asks to be present."""
        elements, _ = expected_layout(references, instruction)
        found = sum(int(self._hits(candidate, e).sum() >= self.tau_area * e.mask.sum()) for e in elements)
        return found, len(elements)

    def __call__(self, references, instruction, candidate) -> RewardBreakdown:
        if candidate.size != (CANVAS, CANVAS):
            raise ValueError(f"candidate is {candidate.size}, expected {(CANVAS, CANVAS)}")
        for d in instruction.directives:
            if d.action != "PLACE" and references[d.ref_index - 1].size != (CANVAS, CANVAS):
                raise ValueError("edit reference must match the candidate dimensions")
        elements, absent = expected_layout(references, instruction)
        px = candidate.pixels
        detected, errors = 0, []
        for e in elements:
            hit = self._hits(candidate, e)
            if hit.sum() >= self.tau_area * e.mask.sum():
                detected += 1
                mean = _cell_pixels(candidate, e.cell)[hit].astype(float).mean(axis=0)
                color_err = min(1.0, float(np.linalg.norm(mean - np.asarray(e.color, float))) / self.tau_color)
                placed = _placed_mask(e)
                iou = (hit & placed).sum() / max(1, (hit | placed).sum())
                errors.append(0.5 * (color_err + (1.0 - float(iou))))
        for e in absent:
            hit = self._hits(candidate, e)
            if hit.sum() < self.tau_area * e.mask.sum():
                detected += 1
        total_directives = len(elements) + len(absent)
        integration = 10.0 * detected / total_directives if total_directives else 10.0
        if errors:
            consistency = 10.0 * (1.0 - float(np.mean(errors)))
        else:
            consistency = 10.0 if not elements else 0.0
        occupied = np.zeros(px.shape[:2], dtype=bool)
        for e in elements:
            top, left = cell_origin(e.cell)
            occupied[top:top + CELL, left:left + CELL] |= _placed_mask(e)
        bg = np.asarray(BACKGROUND, float)
        scale = np.maximum(bg, 255.0 - bg)
        rest = px[~occupied].astype(float)
        dev = float((np.abs(rest - bg) / scale).mean()) if len(rest) else 0.0
        quality = 10.0 * (1.0 - dev)
        clip = lambda v: min(10.0, max(0.0, v))  # noqa: E731
        return RewardBreakdown.from_scores(clip(integration), clip(consistency), clip(quality), self.weights)


def judge_programmatic(references, instruction, candidate, weights=DEFAULT_WEIGHTS) -> RewardBreakdown:
    return ProgrammaticJudge(weights)(references, instruction, candidate)


# -- wire protocol -------------------------------------------------------------

def png_b64(image: RasterImage) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image.pixels), "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def image_from_b64(data: str) -> RasterImage:
    with Image.open(io.BytesIO(base64.b64decode(data, validate=True))) as im:
        if im.mode != "RGB":
            raise ValueError(f"unsupported color type {im.mode!r}")
        return RasterImage(np.array(im, dtype=np.uint8))


def judge_request(references, instruction: Instruction, candidate, rubric_version: str = RUBRIC_VERSION) -> dict:
    return {
        "instruction": instruction.text,
        "references": [png_b64(r) for r in references],
        "candidate": png_b64(candidate),
        "rubric_version": rubric_version,
    }


def parse_judge_response(body: str, weights=DEFAULT_WEIGHTS) -> RewardBreakdown:
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedResponse(f"response is not JSON ({exc.msg})", body) from None
    if not isinstance(obj, dict):
        raise MalformedResponse("response is not a JSON object", body)
    scores = []
    for name in DIMENSIONS:
        v = obj.get(name)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise MalformedResponse(f"{name} missing or not a number", body)
        if not 0.0 <= float(v) <= 10.0:
            raise MalformedResponse(f"{name}={v} outside [0, 10]", body)
        scores.append(float(v))
    rationale = obj.get("rationale")
    if rationale is not None and not isinstance(rationale, str):
        raise MalformedResponse("rationale is not a string", body)
    return RewardBreakdown.from_scores(*scores, weights=weights, rationale=rationale)


def answer_judge_request(payload: dict, judge: Callable | None = None) -> dict:
    """Server side of the protocol, delegating to ``judge`` (programmatic by default)."""
    judge = judge or ProgrammaticJudge()
    refs = [image_from_b64(r) for r in payload["references"]]
    result = judge(refs, Instruction.from_text(payload["instruction"]), image_from_b64(payload["candidate"]))
    return {**result.scores(), "rationale": f"programmatic judge ({payload.get('rubric_version', '?')})"}


class RemoteJudge:
    """HTTP judge client with exponential backoff on transport failures and 5xx replies."""

    kind = "remote"

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, weights=DEFAULT_WEIGHTS,
                 max_attempts: int = 5, base_delay: float = 1.0, factor: float = 2.0,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep,
                 timeout: float = 60.0, max_in_flight: int = 4, rubric_version: str = RUBRIC_VERSION):
        endpoint = endpoint or os.environ.get("JUDGE_URL")
        if not endpoint:
            raise JudgeError("no judge endpoint configured (set JUDGE_URL)")
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("JUDGE_API_KEY")
        self.weights = tuple(weights)
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.factor = factor
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep
        self.max_in_flight = max_in_flight
        self.rubric_version = rubric_version
        self.last_attempts = 0

    def post(self, payload: dict) -> tuple[RewardBreakdown, int]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        url = f"{self.endpoint}/v1/judge"
        cause = ""
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.client.post(url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                cause = f"transport error: {exc}"
            else:
                if resp.status_code < 300:
                    return parse_judge_response(resp.text, self.weights), attempt
                if resp.status_code >= 500 or resp.status_code == 429:
                    cause = f"HTTP {resp.status_code}"
                else:
                    raise JudgeError(f"judge rejected the request: HTTP {resp.status_code}: {resp.text[:200]}")
            if attempt < self.max_attempts:
                delay = self.base_delay * self.factor ** (attempt - 1)
                log.warning("judge attempt %d failed (%s); retrying in %.1fs", attempt, cause, delay)
                self.sleep(delay)
        raise JudgeUnavailable(f"judge unavailable after {self.max_attempts} attempts ({cause})", self.max_attempts)

    def __call__(self, references, instruction, candidate) -> RewardBreakdown:
        result, attempts = self.post(judge_request(references, instruction, candidate, self.rubric_version))
        self.last_attempts = attempts
        return result

    def judge_many(self, items) -> list[RewardBreakdown]:
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(lambda it: self(*it), items))


def judge_many(judge, items) -> list[RewardBreakdown]:
    if hasattr(judge, "judge_many"):
        return judge.judge_many(items)
    return [judge(*it) for it in items]


def make_mock_server(host: str = "127.0.0.1", port: int = 0, judge: Callable | None = None,
                     api_key: str | None = None) -> ThreadingHTTPServer:
    judge = judge or ProgrammaticJudge()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):  # noqa: N802
            if self.path.rstrip("/") != "/v1/judge":
                return self._reply(404, {"error": "not found"})
            if api_key and self.headers.get("Authorization") != f"Bearer {api_key}":
                return self._reply(401, {"error": "bad token"})
            try:
                payload = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                body = answer_judge_request(payload, judge)
            except Exception as exc:  # noqa: BLE001 - reported to the client
                return self._reply(400, {"error": str(exc)})
            self._reply(200, body)

        def _reply(self, status: int, obj: dict):
            data = json.dumps(obj).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, fmt, *args):
            log.debug("mock judge: " + fmt, *args)

    return ThreadingHTTPServer((host, port), Handler)


def serve_mock(host: str = "127.0.0.1", port: int = 8765, api_key: str | None = None) -> None:
    server = make_mock_server(host, port, api_key=api_key)
    log.info("mock judge listening on http://%s:%d/v1/judge", *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()


# -- reward log ----------------------------------------------------------------

class RewardLog:
    """Append-only JSON-lines reward log; appends are serialized."""

    def __init__(self, path: str | Path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def log_reward(self, step: int, prompt_id: str, group_index: int, breakdown: RewardBreakdown,
                   judge_kind: str, advantage: float | None = None, timestamp: float | None = None) -> dict:
        record = {
            "run_id": self.run_id,
            "step": step,
            "prompt_id": prompt_id,
            "group_index": group_index,
            "scores": breakdown.scores(),
            "total": breakdown.total,
            "advantage": advantage,
            "judge": judge_kind,
            "timestamp": time.time() if timestamp is None else timestamp,
        }
        self.append(record)
        return record

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._lock, self.path.open("a") as f:
            f.write(line)
            f.flush()

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line]
