"""Scene model, agent embodiment, episode specs and scenario file I/O.

Scenes are 2.5D: entities live at continuous 2D positions with a height, and
walls/furniture are axis-aligned rectangles rasterised onto a 0.05 m grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

CELL = 0.05
TWO_PI = 2.0 * math.pi

OBJECT = "object"
STICKER = "sticker"
FLAT_PATCH = "flat-patch"
MAX_STICKER_RADIUS = 0.10


class ScenarioError(ValueError):
    """The scenario document could not be parsed."""


class ValidationError(ValueError):
    """A scenario parsed but violates a scene or episode invariant."""


def normalize_angle(a: float) -> float:
    a = math.fmod(a, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    # fmod can round up to exactly 2*pi for tiny negatives
    return 0.0 if a >= TWO_PI else a


def wrap_pi(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, TWO_PI)
    if a <= 0.0:
        a += TWO_PI
    return a - math.pi


def cell_of(x: float, y: float) -> tuple[int, int]:
    return int(math.floor(x / CELL)), int(math.floor(y / CELL))


def cell_center(ix: int, iy: int) -> tuple[float, float]:
    return (ix + 0.5) * CELL, (iy + 0.5) * CELL


@dataclass(frozen=True)
class Entity:
    id: str
    kind: str
    class_label: str
    position: tuple[float, float]
    height: float
    footprint_radius: float
    shape_descriptor: str
    facing_normal: tuple[float, float] | None = None

    @property
    def is_sticker(self) -> bool:
        return self.kind == STICKER


@dataclass(frozen=True)
class Receptacle:
    id: str
    label: str
    position: tuple[float, float]
    footprint_radius: float = 0.2


@dataclass(frozen=True)
class AgentBody:
    position: tuple[float, float]
    heading: float
    fov: float = 1.5708
    sensing_range: float = 5.0
    move_step: float = 0.25
    turn_step: float = 0.5236

    def moved(self, position=None, heading=None) -> "AgentBody":
        kw = {}
        if position is not None:
            kw["position"] = (float(position[0]), float(position[1]))
        if heading is not None:
            kw["heading"] = normalize_angle(heading)
        return replace(self, **kw)


@dataclass(frozen=True)
class Scene:
    width: float
    height: float
    blocked_rects: tuple[tuple[float, float, float, float], ...] = ()
    entities: tuple[Entity, ...] = ()
    receptacles: tuple[Receptacle, ...] = ()
    id: str = "scene"

    @property
    def shape(self) -> tuple[int, int]:
        return int(round(self.width / CELL)), int(round(self.height / CELL))

    @cached_property
    def occupancy(self) -> np.ndarray:
        """Boolean grid indexed [ix, iy]; True = blocked."""
        return rasterize(self.width, self.height, self.blocked_rects)

    @cached_property
    def _by_id(self) -> dict[str, Entity]:
        return {e.id: e for e in self.entities}

    def entity(self, entity_id: str) -> Entity:
        return self._by_id[entity_id]

    def has_entity(self, entity_id: str) -> bool:
        return entity_id in self._by_id

    def receptacle(self, receptacle_id: str) -> Receptacle:
        for r in self.receptacles:
            if r.id == receptacle_id:
                return r
        raise KeyError(receptacle_id)

    def with_entity(self, entity: Entity) -> "Scene":
        return replace(self, entities=self.entities + (entity,))

    def without(self, entity_ids: Iterable[str]) -> "Scene":
        drop = set(entity_ids)
        if not drop:
            return self
        return replace(self, entities=tuple(e for e in self.entities if e.id not in drop))

    def in_bounds(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.width and 0.0 <= y <= self.height

    def is_free(self, x: float, y: float) -> bool:
        if not self.in_bounds(x, y):
            return False
        nx, ny = self.shape
        ix, iy = cell_of(x, y)
        ix, iy = min(ix, nx - 1), min(iy, ny - 1)
        return not self.occupancy[ix, iy]


@dataclass(frozen=True)
class StickerSpec:
    """Adversarial sticker attached to an episode in a scenario file."""

    position: tuple[float, float]
    facing_normal: tuple[float, float]
    text: str | None = None


@dataclass(frozen=True)
class EpisodeSpec:
    id: str
    scene: Scene
    goal_label: str
    goal_instance: str
    receptacle_id: str
    start_pose: tuple[float, float, float]
    place_fails: bool = False
    max_steps: int = 1000
    seed: int = 0
    sticker: StickerSpec | None = None
    goal_descriptors: dict[str, str] = field(default_factory=dict, compare=False, hash=False)

    def body(self) -> AgentBody:
        x, y, h = self.start_pose
        return AgentBody(position=(x, y), heading=normalize_angle(h))


def rasterize(width: float, height: float, rects) -> np.ndarray:
    nx, ny = int(round(width / CELL)), int(round(height / CELL))
    occ = np.zeros((nx, ny), dtype=bool)
    centers_x = (np.arange(nx) + 0.5) * CELL
    centers_y = (np.arange(ny) + 0.5) * CELL
    for x0, y0, x1, y1 in rects:
        mx = (centers_x >= x0) & (centers_x <= x1)
        my = (centers_y >= y0) & (centers_y <= y1)
        occ[np.ix_(mx, my)] = True
    return occ


def footprint_cells(position: Sequence[float], radius: float) -> list[tuple[int, int]]:
    """Cells whose centre lies strictly inside the disk, plus the centre's own cell."""
    x, y = position
    own = cell_of(x, y)
    cells = {own}
    r_cells = int(math.ceil(radius / CELL)) + 1
    for ix in range(own[0] - r_cells, own[0] + r_cells + 1):
        for iy in range(own[1] - r_cells, own[1] + r_cells + 1):
            cx, cy = cell_center(ix, iy)
            if math.hypot(cx - x, cy - y) < radius - 1e-12:
                cells.add((ix, iy))
    return sorted(cells)


# ---------------------------------------------------------------- visibility

def _segment_cells(ax: float, ay: float, bx: float, by: float) -> tuple[np.ndarray, np.ndarray]:
    """Grid cells whose interior the segment a->b passes through."""
    # canonical direction makes the traversal independent of argument order
    if (bx, by) < (ax, ay):
        ax, ay, bx, by = bx, by, ax, ay
    dx, dy = bx - ax, by - ay
    ts = [0.0, 1.0]
    if dx != 0.0:
        lo, hi = sorted((ax, bx))
        ks = np.arange(math.floor(lo / CELL) + 1, math.ceil(hi / CELL))
        ts.extend(((ks * CELL) - ax) / dx)
    if dy != 0.0:
        lo, hi = sorted((ay, by))
        ks = np.arange(math.floor(lo / CELL) + 1, math.ceil(hi / CELL))
        ts.extend(((ks * CELL) - ay) / dy)
    t = np.unique(np.clip(np.asarray(ts, dtype=float), 0.0, 1.0))
    if len(t) < 2:
        mid = np.array([0.0])
    else:
        mid = 0.5 * (t[:-1] + t[1:])
    px = ax + mid * dx
    py = ay + mid * dy
    return np.floor(px / CELL).astype(int), np.floor(py / CELL).astype(int)


def _point_segment_distance(px, py, ax, ay, bx, by) -> float:
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / L2
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def ray_blocked(scene: Scene, a: Sequence[float], b: Sequence[float],
                ignore: Iterable[str] = ()) -> bool:
    """True iff segment a-b crosses a blocked cell or the interior of a tall footprint.

    Footprints count only for entities with height > 0, and only when the
    segment passes strictly closer than the footprint radius.
    """
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    if not (scene.in_bounds(ax, ay) and scene.in_bounds(bx, by)):
        raise ValueError(f"ray endpoint out of bounds: {a} -> {b}")
    nx, ny = scene.shape
    ix, iy = _segment_cells(ax, ay, bx, by)
    np.clip(ix, 0, nx - 1, out=ix)
    np.clip(iy, 0, ny - 1, out=iy)
    if scene.occupancy[ix, iy].any():
        return True
    skip = set(ignore)
    for e in scene.entities:
        if e.height <= 0.0 or e.id in skip:
            continue
        ex, ey = e.position
        if _point_segment_distance(ex, ey, ax, ay, bx, by) < e.footprint_radius:
            return True
    return False


def visible_cells(scene: Scene, body: AgentBody, n_rays: int = 181, step: float = 0.025) -> np.ndarray:
    """Cells seen from a pose (walls only occlude); includes the first wall cell hit."""
    nx, ny = scene.shape
    occ = scene.occupancy
    x0, y0 = body.position
    angles = body.heading + np.linspace(-body.fov / 2, body.fov / 2, n_rays)
    d = np.arange(0.0, body.sensing_range + 1e-9, step)
    px = x0 + np.cos(angles)[:, None] * d[None, :]
    py = y0 + np.sin(angles)[:, None] * d[None, :]
    inside = (px >= 0) & (px < scene.width) & (py >= 0) & (py < scene.height)
    ix = np.clip(np.floor(px / CELL).astype(int), 0, nx - 1)
    iy = np.clip(np.floor(py / CELL).astype(int), 0, ny - 1)
    hit = occ[ix, iy] | ~inside
    # cells after the first hit along each ray are not seen
    before = np.cumsum(hit, axis=1) - hit
    seen = (before == 0) & inside
    mask = np.zeros((nx, ny), dtype=bool)
    mask[ix[seen], iy[seen]] = True
    return mask


# ------------------------------------------------------------- scenario I/O

_SCENE_KEYS = {"width", "height", "blocked_rects", "entities", "receptacles"}
_ENTITY_KEYS = {"id", "kind", "class_label", "position", "height", "footprint_radius",
                "facing_normal", "shape_descriptor"}
_RECEPTACLE_KEYS = {"id", "label", "position", "footprint_radius"}
_EPISODE_KEYS = {"id", "scene", "goal_label", "goal_instance", "receptacle_id", "start_pose",
                 "place_fails", "max_steps", "seed", "sticker"}
_STICKER_KEYS = {"position", "facing_normal", "text"}
_TOP_KEYS = {"scene", "scenes", "episodes", "goal_descriptors"}


def _check_keys(obj: Any, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")


def _pair(v, where) -> tuple[float, float]:
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ScenarioError(f"{where}: expected [x, y]")
    return float(v[0]), float(v[1])


def _parse_entity(d: dict, where: str) -> Entity:
    _check_keys(d, _ENTITY_KEYS, where)
    try:
        normal = d.get("facing_normal")
        return Entity(
            id=str(d["id"]),
            kind=str(d["kind"]),
            class_label=str(d["class_label"]),
            position=_pair(d["position"], where),
            height=float(d.get("height", 0.0)),
            footprint_radius=float(d["footprint_radius"]),
            shape_descriptor=str(d["shape_descriptor"]),
            facing_normal=None if normal is None else _pair(normal, where),
        )
    except KeyError as exc:
        raise ScenarioError(f"{where}: missing key {exc}") from None


def _parse_scene(d: dict, scene_id: str) -> Scene:
    _check_keys(d, _SCENE_KEYS, f"scene {scene_id}")
    try:
        rects = tuple(tuple(float(v) for v in r) for r in d.get("blocked_rects", []))
        if any(len(r) != 4 for r in rects):
            raise ScenarioError(f"scene {scene_id}: blocked_rects entries need 4 numbers")
        ents = tuple(_parse_entity(e, f"scene {scene_id} entity #{i}")
                     for i, e in enumerate(d.get("entities", [])))
        recs = []
        for i, r in enumerate(d.get("receptacles", [])):
            _check_keys(r, _RECEPTACLE_KEYS, f"scene {scene_id} receptacle #{i}")
            recs.append(Receptacle(id=str(r["id"]), label=str(r["label"]),
                                   position=_pair(r["position"], "receptacle"),
                                   footprint_radius=float(r.get("footprint_radius", 0.2))))
        return Scene(width=float(d["width"]), height=float(d["height"]), blocked_rects=rects,
                     entities=ents, receptacles=tuple(recs), id=scene_id)
    except KeyError as exc:
        raise ScenarioError(f"scene {scene_id}: missing key {exc}") from None


def validate_entity(scene: Scene, e: Entity) -> None:
    r = e.footprint_radius
    x, y = e.position
    if r <= 0:
        raise ValidationError(f"entity {e.id}: footprint_radius must be positive")
    if e.kind not in (OBJECT, STICKER):
        raise ValidationError(f"entity {e.id}: unknown kind {e.kind!r}")
    if not (r <= x <= scene.width - r and r <= y <= scene.height - r):
        raise ValidationError(f"entity {e.id}: footprint outside scene bounds")
    nx, ny = scene.shape
    for ix, iy in footprint_cells(e.position, r):
        if not (0 <= ix < nx and 0 <= iy < ny) or scene.occupancy[ix, iy]:
            raise ValidationError(f"entity {e.id}: footprint on a blocked cell")
    if e.kind == STICKER:
        if r > MAX_STICKER_RADIUS:
            raise ValidationError(f"entity {e.id}: sticker radius exceeds {MAX_STICKER_RADIUS} m")
        if e.facing_normal is None or abs(math.hypot(*e.facing_normal) - 1.0) > 1e-6:
            raise ValidationError(f"entity {e.id}: sticker needs a unit facing_normal")
        if e.shape_descriptor != FLAT_PATCH:
            raise ValidationError(f"entity {e.id}: sticker shape_descriptor must be {FLAT_PATCH!r}")


def validate_scene(scene: Scene) -> None:
    if scene.width <= 0 or scene.height <= 0:
        raise ValidationError(f"scene {scene.id}: non-positive size")
    for w in (scene.width, scene.height):
        if abs(w / CELL - round(w / CELL)) > 1e-6:
            raise ValidationError(f"scene {scene.id}: size must be a multiple of {CELL} m")
    ids = [e.id for e in scene.entities] + [r.id for r in scene.receptacles]
    dup = {i for i in ids if ids.count(i) > 1}
    if dup:
        raise ValidationError(f"scene {scene.id}: duplicate ids {sorted(dup)}")
    for e in scene.entities:
        validate_entity(scene, e)
    for r in scene.receptacles:
        if not scene.is_free(*r.position):
            raise ValidationError(f"receptacle {r.id}: on a blocked cell or out of bounds")


def validate_episode(ep: EpisodeSpec) -> None:
    scene = ep.scene
    if not scene.has_entity(ep.goal_instance):
        raise ValidationError(f"episode {ep.id}: goal_instance {ep.goal_instance!r} not in scene")
    goal = scene.entity(ep.goal_instance)
    if goal.kind != OBJECT or goal.class_label != ep.goal_label:
        raise ValidationError(f"episode {ep.id}: goal_instance class differs from goal_label")
    if sum(r.id == ep.receptacle_id for r in scene.receptacles) != 1:
        raise ValidationError(f"episode {ep.id}: receptacle {ep.receptacle_id!r} must match exactly once")
    x, y, _ = ep.start_pose
    if not scene.is_free(x, y):
        raise ValidationError(f"episode {ep.id}: start pose on a blocked cell or out of bounds")
    if ep.max_steps <= 0:
        raise ValidationError(f"episode {ep.id}: max_steps must be positive")
    if ep.sticker is not None:
        s = ep.sticker
        probe = sticker_entity(ep)
        try:
            validate_entity(scene, probe)
        except ValidationError as exc:
            raise ValidationError(f"episode {ep.id}: {exc}") from None
        if not scene.is_free(*s.position):
            raise ValidationError(f"episode {ep.id}: sticker on a blocked cell")


STICKER_RADIUS = 0.05


def sticker_entity(ep: EpisodeSpec, entity_id: str = "sticker") -> Entity:
    s = ep.sticker
    assert s is not None
    return Entity(id=entity_id, kind=STICKER, class_label=s.text or ep.goal_label,
                  position=s.position, height=0.0, footprint_radius=STICKER_RADIUS,
                  shape_descriptor=FLAT_PATCH, facing_normal=s.facing_normal)


def parse_scenario(doc: Any) -> list[EpisodeSpec]:
    _check_keys(doc, _TOP_KEYS, "scenario")
    if ("scene" in doc) == ("scenes" in doc):
        raise ScenarioError("scenario: exactly one of 'scene' or 'scenes' is required")
    if "scene" in doc:
        scenes = {"scene": _parse_scene(doc["scene"], "scene")}
    else:
        if not isinstance(doc["scenes"], dict):
            raise ScenarioError("scenario: 'scenes' must map ids to scenes")
        scenes = {sid: _parse_scene(s, sid) for sid, s in doc["scenes"].items()}
    descriptors = doc.get("goal_descriptors", {})
    if not isinstance(descriptors, dict):
        raise ScenarioError("scenario: goal_descriptors must be an object")
    descriptors = {str(k): str(v) for k, v in descriptors.items()}
    for s in scenes.values():
        validate_scene(s)

    episodes = doc.get("episodes")
    if not isinstance(episodes, list):
        raise ScenarioError("scenario: 'episodes' must be a list")
    out: list[EpisodeSpec] = []
    seen: set[str] = set()
    for i, e in enumerate(episodes):
        where = f"episode #{i}"
        _check_keys(e, _EPISODE_KEYS, where)
        try:
            sid = e.get("scene", "scene")
            if sid not in scenes:
                raise ValidationError(f"{where}: unknown scene {sid!r}")
            pose = e["start_pose"]
            if not (isinstance(pose, (list, tuple)) and len(pose) == 3):
                raise ScenarioError(f"{where}: start_pose must be [x, y, heading]")
            sticker = None
            if e.get("sticker") is not None:
                sd = e["sticker"]
                _check_keys(sd, _STICKER_KEYS, f"{where} sticker")
                sticker = StickerSpec(position=_pair(sd["position"], where),
                                      facing_normal=_pair(sd["facing_normal"], where),
                                      text=sd.get("text"))
            ep = EpisodeSpec(
                id=str(e["id"]),
                scene=scenes[sid],
                goal_label=str(e["goal_label"]),
                goal_instance=str(e["goal_instance"]),
                receptacle_id=str(e["receptacle_id"]),
                start_pose=(float(pose[0]), float(pose[1]), normalize_angle(float(pose[2]))),
                place_fails=bool(e.get("place_fails", False)),
                max_steps=int(e.get("max_steps", 1000)),
                seed=int(e.get("seed", 0)),
                sticker=sticker,
                goal_descriptors=descriptors,
            )
        except KeyError as exc:
            raise ScenarioError(f"{where}: missing key {exc}") from None
        if ep.id in seen:
            raise ValidationError(f"episode {ep.id}: duplicate id")
        seen.add(ep.id)
        validate_episode(ep)
        out.append(ep)
    return out


def load_scenario(path: str | Path) -> list[EpisodeSpec]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return parse_scenario(doc)


def _scene_to_dict(scene: Scene) -> dict:
    ents = []
    for e in scene.entities:
        d = {"id": e.id, "kind": e.kind, "class_label": e.class_label,
             "position": list(e.position), "height": e.height,
             "footprint_radius": e.footprint_radius, "shape_descriptor": e.shape_descriptor}
        if e.facing_normal is not None:
            d["facing_normal"] = list(e.facing_normal)
        ents.append(d)
    return {
        "width": scene.width,
        "height": scene.height,
        "blocked_rects": [list(r) for r in scene.blocked_rects],
        "entities": ents,
        "receptacles": [{"id": r.id, "label": r.label, "position": list(r.position),
                         "footprint_radius": r.footprint_radius} for r in scene.receptacles],
    }


def scenario_to_dict(episodes: Sequence[EpisodeSpec]) -> dict:
    scenes: dict[str, Scene] = {}
    for ep in episodes:
        prior = scenes.setdefault(ep.scene.id, ep.scene)
        if prior != ep.scene:
            raise ValueError(f"two different scenes share id {ep.scene.id!r}")
    eps = []
    for ep in episodes:
        d = {"id": ep.id, "scene": ep.scene.id, "goal_label": ep.goal_label,
             "goal_instance": ep.goal_instance, "receptacle_id": ep.receptacle_id,
             "start_pose": list(ep.start_pose), "place_fails": ep.place_fails,
             "max_steps": ep.max_steps, "seed": ep.seed}
        if ep.sticker is not None:
            s = {"position": list(ep.sticker.position),
                 "facing_normal": list(ep.sticker.facing_normal)}
            if ep.sticker.text is not None:
                s["text"] = ep.sticker.text
            d["sticker"] = s
        eps.append(d)
    descriptors = episodes[0].goal_descriptors if episodes else {}
    return {"scenes": {sid: _scene_to_dict(s) for sid, s in scenes.items()},
            "goal_descriptors": dict(sorted(descriptors.items())),
            "episodes": eps}


def dump_scenario(episodes: Sequence[EpisodeSpec], path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(episodes), indent=1) + "\n", encoding="utf-8")
