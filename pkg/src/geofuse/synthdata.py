"""Synthetic spatial-reasoning scenes with a controllable appearance shortcut.

Each scene is a ``T``-frame clip on an ``H_V x W_V`` cell grid holding a
few objects, one per cell.  Three token streams are produced:

* vision tokens: per cell, an object class one-hot, a colour code, an
  objectness flag and a shortcut-marker channel;
* geometry tokens: per geometry cell, the 3D position of whatever occupies
  it at frame ``t`` and its displacement since the previous frame;
* prompt tokens: a question-type token plus one role+class token per
  referenced object.

The label is fixed by geometry alone.  The marker channel lights up the
label object with probability ``shortcut_strength`` on the train split
and with probability 0.5 on the test split, so a model that reads the
marker does well in training and at chance on test.

Candidate 0 always sits in the top half of the image and candidate 1 in
the bottom half, and geometry tokens behave like a point map (every cell
reports a 3D position), so the answer is recoverable from geometry
without reading appearance.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import ContractError

N_CLASSES = 8
VISION_FEATURES = N_CLASSES + 3 + 2  # class one-hot, colour, marker, objectness
MARKER_CHANNEL = N_CLASSES + 3
OBJECT_CHANNEL = N_CLASSES + 4
GEO_WIDTH = 6  # position xyz, displacement xyz

_PROMPT_TABLE_SEED = 0x5EED


class Question(str, enum.Enum):
    CLOSER_TO_ANCHOR = "closer_to_anchor"
    FASTER_OF_TWO = "faster_of_two"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class Role(enum.IntEnum):
    CANDIDATE0 = 0
    CANDIDATE1 = 1
    ANCHOR = 2
    DISTRACTOR = 3


@dataclass(frozen=True)
class SceneConfig:
    vision_grid: tuple[int, int, int] = (4, 4, 4)  # (H_V, W_V, T)
    geometry_grid: tuple[int, int] = (4, 4)  # (H_G, W_G)
    n_objects: int = 4
    width: int = 32  # C = C_V = C_P
    geo_width: int = GEO_WIDTH
    shortcut_strength: float = 0.95
    question: Question = Question.FASTER_OF_TWO
    coordinate_range: float = 1.0
    speed_range: tuple[float, float] = (0.1, 0.5)
    min_gap: float = 0.15  # relative separation between the two candidates' scores

    def __post_init__(self):
        object.__setattr__(self, "question", Question(self.question))
        object.__setattr__(self, "vision_grid", tuple(int(v) for v in self.vision_grid))
        object.__setattr__(self, "geometry_grid", tuple(int(v) for v in self.geometry_grid))
        object.__setattr__(self, "speed_range", tuple(float(v) for v in self.speed_range))
        h, w, t = self.vision_grid
        if min(h, w, t) < 1 or min(self.geometry_grid) < 1:
            raise ContractError(f"grid extents must be positive: {self.vision_grid}, {self.geometry_grid}")
        if self.geometry_grid[0] < h or self.geometry_grid[1] < w:
            # every vision cell must own at least one geometry cell
            raise ContractError(f"geometry grid {self.geometry_grid} is coarser than the vision grid {(h, w)}")
        if self.n_objects < 3:
            raise ContractError(f"n_objects must be at least 3, got {self.n_objects}")
        if h < 2:
            raise ContractError("the vision grid needs at least two rows")
        if self.n_objects > h * w:
            raise ContractError(f"cannot place {self.n_objects} objects on {h * w} cells")
        if self.n_objects > N_CLASSES:
            raise ContractError(f"at most {N_CLASSES} object classes are available")
        if not 0.0 <= self.shortcut_strength <= 1.0:
            raise ContractError(f"shortcut_strength must lie in [0, 1], got {self.shortcut_strength}")
        if self.width < VISION_FEATURES or self.geo_width != GEO_WIDTH:
            raise ContractError(f"width must be >= {VISION_FEATURES} and geo_width == {GEO_WIDTH}")
        if not self.coordinate_range > 0:
            raise ContractError("coordinate_range must be positive")
        if t < 2 and self.question is Question.FASTER_OF_TWO:
            raise ContractError("speed questions need at least two frames")

    @property
    def n_vision(self) -> int:
        h, w, t = self.vision_grid
        return h * w * t

    @property
    def n_geometry(self) -> int:
        return self.geometry_grid[0] * self.geometry_grid[1] * self.vision_grid[2]

    @property
    def prompt_len(self) -> int:
        return 4 if self.question is Question.CLOSER_TO_ANCHOR else 3

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["question"] = self.question.value
        for key in ("vision_grid", "geometry_grid", "speed_range"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown scene fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SceneObject:
    class_id: int
    role: Role
    cell: tuple[int, int]  # (h, w) on the vision grid
    positions: np.ndarray  # (T, 3)


@dataclass
class Sample:
    vision: np.ndarray  # (H_V*W_V*T, C)
    geometry: np.ndarray  # (H_G*W_G*T, C_G)
    prompt: np.ndarray  # (L_P, C)
    label: int
    shortcut_agrees: bool
    objects: list[SceneObject] = field(default_factory=list)
    vision_grid: tuple[int, int, int] = (4, 4, 4)
    geometry_grid: tuple[int, int] = (4, 4)
    question: Question = Question.FASTER_OF_TWO

    def to_dict(self) -> dict:
        return {
            "question": Question(self.question).value,
            "vision_grid": list(self.vision_grid),
            "geometry_grid": list(self.geometry_grid),
            "label": int(self.label),
            "shortcut_agrees": bool(self.shortcut_agrees),
            "objects": [
                {"class_id": o.class_id, "role": int(o.role), "cell": list(o.cell), "positions": o.positions.tolist()}
                for o in self.objects
            ],
            "vision": self.vision.tolist(),
            "geometry": self.geometry.tolist(),
            "prompt": self.prompt.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        objects = [
            SceneObject(o["class_id"], Role(o["role"]), tuple(o["cell"]), np.asarray(o["positions"], dtype=np.float64))
            for o in d["objects"]
        ]
        return cls(
            vision=np.asarray(d["vision"], dtype=np.float64),
            geometry=np.asarray(d["geometry"], dtype=np.float64),
            prompt=np.asarray(d["prompt"], dtype=np.float64),
            label=int(d["label"]),
            shortcut_agrees=bool(d["shortcut_agrees"]),
            objects=objects,
            vision_grid=tuple(d["vision_grid"]),
            geometry_grid=tuple(d["geometry_grid"]),
            question=Question(d["question"]),
        )


# -- label oracles ---------------------------------------------------------------


def closer_to_anchor_label(anchor, cand0, cand1) -> int:
    d0 = float(np.linalg.norm(np.asarray(cand0, dtype=np.float64) - np.asarray(anchor, dtype=np.float64)))
    d1 = float(np.linalg.norm(np.asarray(cand1, dtype=np.float64) - np.asarray(anchor, dtype=np.float64)))
    return 0 if d0 < d1 else 1


def mean_speed(positions: np.ndarray) -> float:
    steps = np.diff(np.asarray(positions, dtype=np.float64), axis=0)
    return float(np.linalg.norm(steps, axis=1).mean())


def faster_of_two_label(track0, track1) -> int:
    return 0 if mean_speed(track0) > mean_speed(track1) else 1


def _geometry_cells(cell: tuple[int, int], vision_hw, geometry_hw) -> list[int]:
    """Geometry-grid positions (within one frame) covered by a vision cell."""
    gh, gw = geometry_hw
    vh, vw = vision_hw
    rows = [r for r in range(gh) if min(vh - 1, r * vh // gh) == cell[0]]
    cols = [c for c in range(gw) if min(vw - 1, c * vw // gw) == cell[1]]
    return [r * gw + c for r in rows for c in cols]


def object_track(sample: Sample, obj: SceneObject) -> np.ndarray:
    """Read an object's ``(T, 3)`` trajectory back out of the geometry tokens."""
    t = sample.vision_grid[2]
    per_frame = sample.geometry_grid[0] * sample.geometry_grid[1]
    cells = _geometry_cells(obj.cell, sample.vision_grid[:2], sample.geometry_grid)
    frames = sample.geometry.reshape(t, per_frame, -1)
    return frames[:, cells, :3].mean(axis=1)


def oracle_label(sample: Sample) -> int:
    """Recompute the label from geometry tokens and object roles only."""
    by_role = {o.role: o for o in sample.objects}
    c0 = object_track(sample, by_role[Role.CANDIDATE0])
    c1 = object_track(sample, by_role[Role.CANDIDATE1])
    if Question(sample.question) is Question.FASTER_OF_TWO:
        return faster_of_two_label(c0, c1)
    anchor = object_track(sample, by_role[Role.ANCHOR])
    return closer_to_anchor_label(anchor[-1], c0[-1], c1[-1])


def candidate_features(sample: Sample) -> np.ndarray:
    """Per-candidate task statistic read from geometry: mean speed or final distance to the anchor."""
    by_role = {o.role: o for o in sample.objects}
    c0 = object_track(sample, by_role[Role.CANDIDATE0])
    c1 = object_track(sample, by_role[Role.CANDIDATE1])
    if Question(sample.question) is Question.FASTER_OF_TWO:
        return np.array([mean_speed(c0), mean_speed(c1)])
    anchor = object_track(sample, by_role[Role.ANCHOR])[-1]
    return np.array([np.linalg.norm(c0[-1] - anchor), np.linalg.norm(c1[-1] - anchor)])


# -- generation ------------------------------------------------------------------------


def prompt_table(width: int) -> dict[str, np.ndarray]:
    """Fixed embedding tables standing in for a frozen text tokenizer."""
    rng = np.random.default_rng([_PROMPT_TABLE_SEED, width])
    scale = 1.0 / np.sqrt(width)
    return {
        "question": rng.normal(0, 1, (len(Question), width)),
        "role": rng.normal(0, 1, (3, width)),
        "class": rng.normal(0, 1, (N_CLASSES, width)),
        "scale": np.array(scale),
    }


def embed_prompt(question: Question, objects: Iterable[SceneObject], width: int) -> np.ndarray:
    table = prompt_table(width)
    question = Question(question)
    rows = [table["question"][list(Question).index(question)]]
    referenced = sorted((o for o in objects if o.role is not Role.DISTRACTOR), key=lambda o: (o.role != Role.ANCHOR, o.role))
    for o in referenced:
        rows.append(table["role"][min(int(o.role), 2)] + table["class"][o.class_id])
    return np.stack(rows) * float(table["scale"])


def _place_objects(cfg: SceneConfig, rng: np.random.Generator):
    """Candidate 0 goes in the top half of the grid, candidate 1 in the bottom half."""
    h, w, _ = cfg.vision_grid
    top = [c for c in range(h * w) if c // w < h // 2]
    bottom = [c for c in range(h * w) if c // w >= h // 2]
    c0 = int(rng.choice(top))
    c1 = int(rng.choice(bottom))
    # spread the remaining objects evenly over both halves so the layout does not reveal where the anchor is
    k = cfg.n_objects - 2
    k_top = k // 2 + int(k % 2 and rng.random() < 0.5)
    k_top = min(k_top, len(top) - 1)
    k_top = max(k_top, k - (len(bottom) - 1))
    top_rest = [c for c in top if c != c0]
    bottom_rest = [c for c in bottom if c != c1]
    others = [int(c) for c in rng.choice(top_rest, size=k_top, replace=False)]
    others += [int(c) for c in rng.choice(bottom_rest, size=k - k_top, replace=False)]
    others = [others[i] for i in rng.permutation(k)]
    cells = [c0, c1, *others]
    classes = rng.choice(N_CLASSES, size=cfg.n_objects, replace=False)
    roles = [Role.CANDIDATE0, Role.CANDIDATE1]
    roles += [Role.ANCHOR] + [Role.DISTRACTOR] * (cfg.n_objects - 3) if cfg.question is Question.CLOSER_TO_ANCHOR \
        else [Role.DISTRACTOR] * (cfg.n_objects - 2)
    return [(c // w, c % w) for c in cells], [int(k) for k in classes], roles


def cell_xy(row: float, col: float, rows: int, cols: int, extent: float) -> tuple[float, float]:
    """World (x, y) of a cell centre; the image grid spans ``[-extent, extent]``."""
    return ((col + 0.5) / cols * 2 - 1) * extent, ((row + 0.5) / rows * 2 - 1) * extent


def _static_track(rng, cfg: SceneConfig, cell, t: int) -> np.ndarray:
    h, w, _ = cfg.vision_grid
    x, y = cell_xy(cell[0], cell[1], h, w, cfg.coordinate_range)
    z = rng.uniform(-cfg.coordinate_range, 0.5 * cfg.coordinate_range)
    return np.repeat(np.array([[x, y, z]]), t, axis=0)


def _moving_track(rng, cfg: SceneConfig, cell, t: int, speed: float) -> np.ndarray:
    # motion along +x keeps the object in its image row
    p0 = _static_track(rng, cfg, cell, 1)[0]
    direction = np.array([1.0, 0.0, 0.0])
    return p0[None] + np.arange(t)[:, None] * (speed * cfg.coordinate_range) * direction[None]


def _gap_ok(a: float, b: float, min_gap: float) -> bool:
    return abs(a - b) > max(1e-9, min_gap * max(a, b))


def generate_sample(cfg: SceneConfig, split: Split, rng: np.random.Generator, target_label: int | None = None) -> Sample:
    """Draw one scene.  ``target_label`` forces the answer (used for class balance)."""
    split = Split(split)
    h, w, t = cfg.vision_grid
    cells, classes, roles = _place_objects(cfg, rng)
    c0, c1 = roles.index(Role.CANDIDATE0), roles.index(Role.CANDIDATE1)

    tracks: list[np.ndarray] = [_static_track(rng, cfg, cell, t) for cell in cells]
    if cfg.question is Question.FASTER_OF_TWO:
        lo, hi = cfg.speed_range
        while True:
            s0, s1 = rng.uniform(lo, hi, size=2)
            if _gap_ok(s0, s1, cfg.min_gap):
                break
        if target_label is not None and (0 if s0 > s1 else 1) != target_label:
            s0, s1 = s1, s0
        tracks[c0] = _moving_track(rng, cfg, cells[c0], t, s0)
        tracks[c1] = _moving_track(rng, cfg, cells[c1], t, s1)
        label = faster_of_two_label(tracks[c0], tracks[c1])
    else:
        while True:
            # a placement may make the target label unreachable through depth alone, so redraw it too
            anchor = roles.index(Role.ANCHOR)
            d0 = np.linalg.norm(tracks[c0][-1] - tracks[anchor][-1])
            d1 = np.linalg.norm(tracks[c1][-1] - tracks[anchor][-1])
            label = 0 if d0 < d1 else 1
            if _gap_ok(d0, d1, cfg.min_gap) and target_label in (None, label):
                break
            cells, classes, roles = _place_objects(cfg, rng)
            tracks = [_static_track(rng, cfg, cell, t) for cell in cells]

    objects = [SceneObject(classes[i], roles[i], cells[i], tracks[i]) for i in range(len(cells))]

    p_agree = cfg.shortcut_strength if split is Split.TRAIN else 0.5
    agrees = bool(rng.random() < p_agree)
    marked = (c0, c1)[label if agrees else 1 - label]

    colours = rng.uniform(0.0, 1.0, size=(len(cells), 3))
    frame = np.zeros((h, w, cfg.width))
    for i, (r, c) in enumerate(cells):
        frame[r, c, classes[i]] = 1.0
        frame[r, c, N_CLASSES:N_CLASSES + 3] = colours[i]
        frame[r, c, OBJECT_CHANNEL] = 1.0
    r, c = cells[marked]
    frame[r, c, MARKER_CHANNEL] = 1.0
    vision = np.broadcast_to(frame.reshape(1, h * w, cfg.width), (t, h * w, cfg.width)).reshape(t * h * w, cfg.width)

    gh, gw = cfg.geometry_grid
    geometry = np.zeros((t, gh * gw, cfg.geo_width))
    for g in range(gh * gw):
        # background: the far wall, static
        geometry[:, g, :2] = cell_xy(g // gw, g % gw, gh, gw, cfg.coordinate_range)
        geometry[:, g, 2] = cfg.coordinate_range
    for obj in objects:
        pos = obj.positions
        disp = np.vstack([np.zeros((1, 3)), np.diff(pos, axis=0)])
        for g in _geometry_cells(obj.cell, (h, w), (gh, gw)):
            geometry[:, g, :3] = pos
            geometry[:, g, 3:] = disp

    return Sample(
        vision=np.ascontiguousarray(vision),
        geometry=geometry.reshape(t * gh * gw, cfg.geo_width),
        prompt=embed_prompt(cfg.question, objects, cfg.width),
        label=int(label),
        shortcut_agrees=agrees,
        objects=objects,
        vision_grid=cfg.vision_grid,
        geometry_grid=cfg.geometry_grid,
        question=cfg.question,
    )


def sample_rng(seed: int, split: Split, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0 if Split(split) is Split.TRAIN else 1, int(index)])


def make_split(cfg: SceneConfig, split: Split, n: int, seed: int) -> list[Sample]:
    if n < 1:
        raise ContractError(f"sample count must be positive, got {n}")
    return [generate_sample(cfg, split, sample_rng(seed, split, i), target_label=i % 2) for i in range(n)]


def make_dataset(cfg: SceneConfig, n_train: int, n_test: int, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Deterministic train/test lists; labels alternate so each split is balanced."""
    return make_split(cfg, Split.TRAIN, n_train, seed), make_split(cfg, Split.TEST, n_test, seed)


def write_jsonl(path, samples: Iterable, split: str | None = None) -> None:
    """One sample per line; items may be ``(sample, split)`` pairs to tag mixed splits."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in samples:
            s, tag = item if isinstance(item, tuple) else (item, split)
            d = s.to_dict()
            if tag is not None:
                d["split"] = tag
            fh.write(json.dumps(d) + "\n")


def read_jsonl(path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        return [Sample.from_dict(json.loads(line)) for line in fh if line.strip()]


# -- diagnostic probes --------------------------------------------------------------


def marker_probe(sample: Sample) -> int:
    """Predict by reading only the shortcut-marker channel."""
    frame0 = sample.vision[: sample.vision_grid[0] * sample.vision_grid[1]]
    marked = int(np.argmax(frame0[:, MARKER_CHANNEL]))
    w = sample.vision_grid[1]
    cell = (marked // w, marked % w)
    for o in sample.objects:
        if o.cell == cell and o.role in (Role.CANDIDATE0, Role.CANDIDATE1):
            return int(o.role)
    raise ContractError("marker does not sit on a candidate")


def geometry_centroid_classifier(train: list[Sample]):
    """Nearest-centroid classifier over per-candidate geometry statistics."""
    x = np.stack([candidate_features(s) for s in train])
    y = np.array([s.label for s in train])
    centroids = np.stack([x[y == k].mean(axis=0) for k in (0, 1)])

    def predict(sample: Sample) -> int:
        f = candidate_features(sample)
        return int(np.argmin(np.linalg.norm(centroids - f[None], axis=1)))

    return predict


def appearance_features(sample: Sample) -> np.ndarray:
    """First-frame vision tokens with the marker channel zeroed, flattened."""
    frame0 = sample.vision[: sample.vision_grid[0] * sample.vision_grid[1]].copy()
    frame0[:, MARKER_CHANNEL] = 0.0
    return frame0[:, :VISION_FEATURES].reshape(-1)


def logistic_probe(x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
                   l2: float = 1e-2, steps: int = 500, lr: float = 0.5) -> float:
    """Fit an L2-regularized logistic regression by gradient descent; return test accuracy."""
    mu, sd = x_train.mean(0), x_train.std(0) + 1e-8
    xs = np.hstack([(x_train - mu) / sd, np.ones((len(x_train), 1))])
    xt = np.hstack([(x_test - mu) / sd, np.ones((len(x_test), 1))])
    w = np.zeros(xs.shape[1])
    y = np.asarray(y_train, dtype=np.float64)
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-xs @ w))
        w -= lr * (xs.T @ (p - y) / len(y) + l2 * w)
    return float(np.mean((xt @ w > 0).astype(int) == np.asarray(y_test)))
