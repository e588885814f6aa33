"""Procedural shape scenes paired with captions that identify them uniquely."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DataError, ParseError

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
DEFAULT_GRID = 3
MAX_OBJECTS = 3
D_PATCH = len(COLORS) + len(SHAPES)

PAIRS_FILE = "pairs.jsonl"
SPLIT_FILE = "split.json"


@dataclass(frozen=True, order=True)
class SceneObject:
    row: int
    col: int
    color: str
    shape: str


@dataclass(frozen=True)
class Scene:
    grid: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        validate_scene(self)


@dataclass(frozen=True)
class MultimodalPair:
    id: int
    caption: str
    scene: Scene

    @property
    def patches(self) -> np.ndarray:
        return render_patches(self.scene)


def validate_scene(s: Scene) -> None:
    if not 1 <= s.grid <= len(NUMBER_WORDS):
        raise DataError(f"grid size {s.grid} out of range")
    if not 1 <= len(s.objects) <= MAX_OBJECTS:
        raise DataError(f"scene must hold 1..{MAX_OBJECTS} objects, got {len(s.objects)}")
    cells = [(o.row, o.col) for o in s.objects]
    for o in s.objects:
        if o.color not in COLORS:
            raise DataError(f"unknown color {o.color!r}")
        if o.shape not in SHAPES:
            raise DataError(f"unknown shape {o.shape!r}")
        if not (0 <= o.row < s.grid and 0 <= o.col < s.grid):
            raise DataError(f"cell ({o.row}, {o.col}) outside a {s.grid}x{s.grid} grid")
    if len(set(cells)) != len(cells):
        raise DataError("two objects share a cell")
    if cells != sorted(cells):
        raise DataError("objects must be ordered by (row, col)")


def make_scene(objects: Iterable[tuple[str, str, int, int]], grid: int = DEFAULT_GRID) -> Scene:
    """Build a canonical scene from ``(color, shape, row, col)`` tuples in any order."""
    objs = sorted(SceneObject(r, c, color, shape) for color, shape, r, c in objects)
    return Scene(grid, tuple(objs))


def generate_scene(rng: np.random.Generator, grid: int = DEFAULT_GRID) -> Scene:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = rng.choice(grid * grid, size=n, replace=False)
    objs = []
    for cell in cells:
        color = COLORS[int(rng.integers(len(COLORS)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        objs.append((color, shape, int(cell) // grid, int(cell) % grid))
    return make_scene(objs, grid)


def render_caption(s: Scene) -> str:
    return " and ".join(
        f"a {o.color} {o.shape} at row {NUMBER_WORDS[o.row]} column {NUMBER_WORDS[o.col]}" for o in s.objects
    )


def render_patches(s: Scene) -> np.ndarray:
    patches = np.zeros((s.grid * s.grid, D_PATCH))
    for o in s.objects:
        r = o.row * s.grid + o.col
        patches[r, COLORS.index(o.color)] = 1.0
        patches[r, len(COLORS) + SHAPES.index(o.shape)] = 1.0
    return patches


def make_pair(pair_id: int, scene: Scene) -> MultimodalPair:
    return MultimodalPair(pair_id, render_caption(scene), scene)


def generate_pairs(n: int, seed: int, grid: int = DEFAULT_GRID) -> list[MultimodalPair]:
    """Draw ``n`` pairs with pairwise-distinct scenes (duplicates are redrawn)."""
    rng = np.random.default_rng(seed)
    seen: set[Scene] = set()
    pairs = []
    budget = 1000 * max(n, 1)
    while len(pairs) < n:
        budget -= 1
        if budget < 0:
            raise ArgumentError(f"could not draw {n} distinct scenes")
        scene = generate_scene(rng, grid)
        if scene in seen:
            continue
        seen.add(scene)
        pairs.append(make_pair(len(pairs), scene))
    return pairs


def split_ids(pairs: Sequence[MultimodalPair], n_heldout: int, seed: int) -> dict[str, list[int]]:
    """Seeded split of pair ids into disjoint train/heldout lists."""
    if not 0 <= n_heldout < len(pairs):
        raise ArgumentError(f"heldout size {n_heldout} must be in [0, {len(pairs)})")
    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(len(pairs))
    ids = np.array([p.id for p in pairs])
    heldout = sorted(int(i) for i in ids[perm[:n_heldout]])
    train = sorted(int(i) for i in ids[perm[n_heldout:]])
    return {"train": train, "heldout": heldout}


# -- persistence ------------------------------------------------------------
def pair_to_json(p: MultimodalPair) -> dict:
    return {
        "id": p.id,
        "caption": p.caption,
        "scene": {
            "grid": p.scene.grid,
            "objects": [{"color": o.color, "shape": o.shape, "row": o.row, "col": o.col} for o in p.scene.objects],
        },
    }


def pair_from_json(obj: dict) -> MultimodalPair:
    if not isinstance(obj, dict):
        raise DataError("record is not an object")
    try:
        sc = obj["scene"]
        grid = sc["grid"]
        raw = sc["objects"]
        pid = obj["id"]
        caption = obj["caption"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"missing field {exc}") from None
    if not isinstance(pid, int) or not isinstance(caption, str) or not isinstance(grid, int):
        raise DataError("field of wrong type")
    if not isinstance(raw, list):
        raise DataError("objects must be a list")
    objs = []
    for o in raw:
        try:
            color, shape, row, col = o["color"], o["shape"], o["row"], o["col"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"object missing field {exc}") from None
        if not isinstance(row, int) or not isinstance(col, int):
            raise DataError("row/col must be integers")
        objs.append(SceneObject(row, col, color, shape))
    scene = Scene(grid, tuple(objs))
    if render_caption(scene) != caption:
        raise DataError("caption does not match scene")
    return MultimodalPair(pid, caption, scene)


def write_dataset(pairs: Iterable[MultimodalPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps(pair_to_json(p), separators=(",", ":")) + "\n")


def read_dataset(path: str | Path) -> list[MultimodalPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                pairs.append(pair_from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            except DataError as exc:
                raise ParseError(str(exc), lineno) from None
    return pairs


def write_split(split: dict[str, list[int]], path: str | Path) -> None:
    Path(path).write_text(json.dumps(split, separators=(",", ":")) + "\n", encoding="utf-8")


def load_split(data: str | Path, split: str = "heldout") -> list[MultimodalPair]:
    """Load pairs from a dataset directory (selecting a split) or a bare JSONL file.

    ``split`` is ``train``, ``heldout`` or ``all``; bare files are always ``all``.
    """
    data = Path(data)
    if data.is_dir():
        pairs = read_dataset(data / PAIRS_FILE)
        if split == "all":
            return pairs
        manifest = data / SPLIT_FILE
        try:
            ids = set(json.loads(manifest.read_text(encoding="utf-8"))[split])
        except FileNotFoundError:
            raise DataError(f"missing split manifest {manifest}") from None
        except (KeyError, json.JSONDecodeError, TypeError):
            raise DataError(f"split {split!r} not found in {manifest}") from None
        return [p for p in pairs if p.id in ids]
    if not data.exists():
        raise DataError(f"dataset not found: {data}")
    return read_dataset(data)
