"""Synthetic editing and composition tasks.

Canvas 32x32 split into a 2x2 grid of 16x16 cells. Elements are squares,
discs or triangles in one of eight palette colors on a gray background.

Composition: reference k shows one element centered on the canvas; the
target shows each element centered in the cell its PLACE directive names.
Editing: one reference scene holding one or two elements; the target is the
scene after a RECOLOR, MOVE or REMOVE.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .flowmatch import TrainingSample
from .instructions import BACKGROUND, CELLS, PALETTE, VOCAB, Directive, Instruction
from .rasters import RasterImage, read_png, write_png

CANVAS = 32
CELL = 16
SHAPES = ("square", "disc", "triangle")
MIN_ELEMENT, MAX_ELEMENT = 8, 14
DATASET_VERSION = 1
TAU_COLOR = 60.0


class DatasetError(ValueError):
    pass


def cell_origin(cell: str) -> tuple[int, int]:
    i = CELLS.index(cell)
    return (i // 2) * CELL, (i % 2) * CELL


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean mask cropped to its bounding box. Integer-only rasterization."""
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "square":
        m = np.ones((size, size), dtype=bool)
    elif shape == "disc":
        # pixel centers at (y + 1/2, x + 1/2), doubled to stay integral
        cy = 2 * yy + 1 - size
        cx = 2 * xx + 1 - size
        m = cy * cy + cx * cx <= size * size
    elif shape == "triangle":
        # apex at top center, base along the bottom row: |x_c - s/2| <= y_c / 2 on doubled coords
        m = 2 * np.abs(2 * xx + 1 - size) <= 2 * yy + 1
    else:
        raise ValueError(f"unknown shape {shape!r}")
    rows, cols = np.flatnonzero(m.any(axis=1)), np.flatnonzero(m.any(axis=0))
    return m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def place_offset(mask: np.ndarray, top: int, left: int, height: int, width: int) -> tuple[int, int]:
    return top + (height - mask.shape[0]) // 2, left + (width - mask.shape[1]) // 2


def stamp(canvas: np.ndarray, mask: np.ndarray, color, top: int, left: int) -> None:
    region = canvas[top:top + mask.shape[0], left:left + mask.shape[1]]
    region[mask] = np.asarray(color, dtype=np.uint8)


def blank(size: int = CANVAS) -> np.ndarray:
    px = np.empty((size, size, 3), dtype=np.uint8)
    px[...] = BACKGROUND
    return px


@dataclass(frozen=True)
class Element:
    shape: str
    size: int
    color: int      # palette index
    ref: int        # source reference index (1-based)
    cell: str

    @property
    def mask(self) -> np.ndarray:
        return shape_mask(self.shape, self.size)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "size": self.size, "color": self.color, "ref": self.ref, "cell": self.cell}

    @classmethod
    def from_dict(cls, d: dict) -> Element:
        return cls(d["shape"], int(d["size"]), int(d["color"]), int(d["ref"]), d["cell"])


@dataclass(frozen=True)
class CompositionSpec:
    elements: tuple[Element, ...]
    canvas: int = CANVAS
    background: tuple[int, int, int] = BACKGROUND


def render_in_cells(elements: Sequence[Element], canvas: int = CANVAS) -> RasterImage:
    px = blank(canvas)
    for e in elements:
        m = e.mask
        top, left = place_offset(m, *cell_origin(e.cell), CELL, CELL)
        stamp(px, m, PALETTE[e.color], top, left)
    return RasterImage(px)


def render_centered(element: Element, canvas: int = CANVAS) -> RasterImage:
    px = blank(canvas)
    m = element.mask
    top, left = place_offset(m, 0, 0, canvas, canvas)
    stamp(px, m, PALETTE[element.color], top, left)
    return RasterImage(px)


def _random_element(rng: np.random.Generator, color: int, ref: int, cell: str) -> Element:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    size = int(rng.integers(MIN_ELEMENT, MAX_ELEMENT + 1))
    return Element(shape, size, color, ref, cell)


def gen_composition_sample(rng: np.random.Generator, k_range: tuple[int, int] = (1, 4)) -> TrainingSample:
    lo, hi = k_range
    if not 1 <= lo <= hi <= 4:
        raise ValueError(f"k_range {k_range} must lie within [1, 4]")
    k = int(rng.integers(lo, hi + 1))
    cells = [CELLS[i] for i in rng.permutation(4)[:k]]
    colors = [int(c) for c in rng.permutation(len(PALETTE))[:k]]
    elements = tuple(_random_element(rng, colors[i], i + 1, cells[i]) for i in range(k))
    refs = [render_centered(e) for e in elements]
    instruction = Instruction(tuple(Directive("PLACE", e.ref, e.cell) for e in elements))
    return TrainingSample(refs, instruction, render_in_cells(elements), kind="compose")


def gen_edit_sample(rng: np.random.Generator) -> TrainingSample:
    n = int(rng.integers(1, 3))
    cells = [CELLS[i] for i in rng.permutation(4)[:n]]
    colors = [int(c) for c in rng.permutation(len(PALETTE))[: n + 1]]
    scene = [_random_element(rng, colors[i], 1, cells[i]) for i in range(n)]
    action = ("RECOLOR", "MOVE", "REMOVE")[int(rng.integers(3))]
    which = int(rng.integers(n))
    src = scene[which]
    if action == "RECOLOR":
        new_color = colors[n]
        directive = Directive("RECOLOR", 1, src.cell, new_color)
        edited = [Element(e.shape, e.size, new_color, 1, e.cell) if i == which else e for i, e in enumerate(scene)]
    elif action == "MOVE":
        free = [c for c in CELLS if c not in cells]
        dest = free[int(rng.integers(len(free)))]
        directive = Directive("MOVE", 1, src.cell, dest)
        edited = [Element(e.shape, e.size, e.color, 1, dest) if i == which else e for i, e in enumerate(scene)]
    else:
        directive = Directive("REMOVE", 1, src.cell)
        edited = [e for i, e in enumerate(scene) if i != which]
    return TrainingSample([render_in_cells(scene)], Instruction((directive,)), render_in_cells(edited), kind="edit")


# -- filtration ----------------------------------------------------------------

def _element_pixels(image: RasterImage, color) -> int:
    d = np.linalg.norm(image.pixels.astype(float) - np.asarray(color, float), axis=-1)
    return int((d <= 0.5).sum())


def filter_sample(sample: TrainingSample) -> tuple[bool, str]:
    """Deterministic validity rules; returns ``(accepted, reason)``."""
    ds = sample.instruction.directives
    if not ds:
        return False, "empty instruction"
    if sample.kind == "compose":
        cells = [d.cell for d in ds]
        if len(set(cells)) != len(cells):
            return False, "cell collision"
        colors = []
        for d in ds:
            ref = sample.references[d.ref_index - 1]
            col = dominant_color(ref)
            if col is None:
                return False, "degenerate element"
            colors.append(col)
            if _element_pixels(ref, col) <= 4:
                return False, "degenerate element"
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                if np.linalg.norm(np.subtract(colors[i], colors[j], dtype=float)) < 2 * TAU_COLOR:
                    return False, "color ambiguity"
    else:
        d = ds[0]
        scene = sample.references[0]
        cells = [c for c in CELLS if dominant_color(cell_view(scene, c)) is not None]
        if d.cell not in cells:
            return False, "edit targets an empty cell"
        if d.action == "MOVE" and d.arg in cells:
            return False, "cell collision"
        colors = [dominant_color(cell_view(scene, c)) for c in cells]
        if d.action == "RECOLOR":
            colors.append(PALETTE[int(d.arg)])
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                if np.linalg.norm(np.subtract(colors[i], colors[j], dtype=float)) < 2 * TAU_COLOR:
                    return False, "color ambiguity"
        for c in cells:
            v = cell_view(scene, c)
            if _element_pixels(v, dominant_color(v)) <= 4:
                return False, "degenerate element"
    return True, "ok"


def cell_view(image: RasterImage, cell: str) -> RasterImage:
    top, left = cell_origin(cell)
    return RasterImage(image.pixels[top:top + CELL, left:left + CELL])


def dominant_color(image: RasterImage):
    """Most frequent non-background color, or None for an empty image."""
    px = image.pixels.reshape(-1, 3)
    fg = px[np.any(px != np.asarray(BACKGROUND, dtype=np.uint8), axis=1)]
    if not len(fg):
        return None
    colors, counts = np.unique(fg, axis=0, return_counts=True)
    return tuple(int(c) for c in colors[int(np.argmax(counts))])


# -- datasets ------------------------------------------------------------------

def generate(seed: int, count: int, edit_fraction: float = 0.5, k_range: tuple[int, int] = (1, 4),
             max_attempts: int = 100) -> list[TrainingSample]:
    """Pure function of its arguments; each sample has its own derived seed."""
    samples = []
    for i in range(count):
        for attempt in range(max_attempts):
            rng = np.random.default_rng([seed, i, attempt])
            if rng.random() < edit_fraction:
                s = gen_edit_sample(rng)
            else:
                s = gen_composition_sample(rng, k_range)
            ok, _ = filter_sample(s)
            if ok:
                s.id = f"s{seed}_{i:06d}"
                samples.append(s)
                break
        else:
            raise DatasetError(f"sample {i}: no valid draw in {max_attempts} attempts")
    return samples


DATASET_README = """\
# Synthetic multi-reference dataset

Generated by `multiref gen-data`. Pipeline stages:

- collection: random elements (shape, size, palette color) drawn per sample
- filtration: `filter_sample` rejects cell collisions, ambiguous colors and degenerate elements
- annotation: directives serialized as instruction tokens (see `vocabulary` in manifest.json)
- synthesis: exact rasterization of references and targets

Layout: `manifest.json`, `images/{id}_ref{k}.png`, `images/{id}_target.png`.
"""


def write_dataset(samples: Sequence[TrainingSample], directory: str | Path, patch_pixels: int = 4) -> dict:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise DatasetError("sample ids must be unique")
    records = []
    for s in samples:
        ref_files = []
        for k, ref in enumerate(s.references, start=1):
            name = f"images/{s.id}_ref{k}.png"
            write_png(ref, d / name)
            ref_files.append(name)
        target_file = f"images/{s.id}_target.png"
        write_png(s.target, d / target_file)
        records.append({
            "id": s.id,
            "kind": s.kind,
            "references": ref_files,
            "instruction_tokens": s.instruction.token_ids,
            "spec": [x.to_dict() for x in s.instruction.directives],
            "target": target_file,
        })
    manifest = {"version": DATASET_VERSION, "patch_pixels": patch_pixels, "vocabulary": list(VOCAB),
                "records": records}
    (d / "README.md").write_text(DATASET_README)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_dataset(directory: str | Path) -> list[TrainingSample]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath} not found")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"manifest version {manifest.get('version')} != supported {DATASET_VERSION}")
    if list(manifest.get("vocabulary", [])) != list(VOCAB):
        raise DatasetError("manifest vocabulary differs from this build's vocabulary")
    seen, samples = set(), []
    for rec in manifest["records"]:
        if rec["id"] in seen:
            raise DatasetError(f"duplicate record id {rec['id']}")
        seen.add(rec["id"])
        files = list(rec["references"]) + [rec["target"]]
        for f in files:
            if not (d / f).exists():
                raise DatasetError(f"record {rec['id']}: missing file {f}")
        instruction = Instruction.from_tokens(rec["instruction_tokens"])
        spec = tuple(Directive.from_dict(x) for x in rec["spec"])
        if instruction.directives != spec:
            raise DatasetError(f"record {rec['id']}: instruction tokens disagree with structured spec")
        samples.append(TrainingSample(
            references=[read_png(d / f) for f in rec["references"]],
            instruction=instruction,
            target=read_png(d / rec["target"]),
            kind=rec["kind"],
            id=rec["id"],
        ))
    return samples
