"""Generator for the shipped 59-episode mirror pool.

Every episode is one of five sticker constructions:

* ``slot``: sticker at the back of a deep slot in the west wall, facing the
  start pose. Legible only from a narrow cone around the slot axis.
* ``tube``: sticker seen through a tube in a thick wall from the start, then
  reached through a side corridor where it is never legible.
* ``knife``: slot with a knife in front of the sticker, partly covering it.
* ``oblique``: slot with the sticker turned to face the slot wall.
* ``occluded``: slot with a box in front of the sticker.

The first three hijack the agent; the last two never fire. Counts per pool
are fixed so the campaign totals come out of the pipeline, not a table.
"""

from __future__ import annotations

import math
from pathlib import Path

from .world import parse_scenario

DATA = Path(__file__).parent / "data"
MIRROR_PATH = DATA / "mirror59.json"

WIDTH, HEIGHT = 5.0, 3.0
GOAL_LABEL = "cup"
DESCRIPTORS = {"cup": "cup-like", "knife": "blade-like", "book": "box-like", "box": "box-like",
               "bottle": "cylinder-like"}

SLOT_DEPTH = 0.7
SLOT_HALF = 0.075
DIVIDER_X = 2.6

# construction -> (count in full-success pool, count in place-failure pool)
COUNTS = {"slot": (4, 24), "tube": (2, 7), "knife": (1, 2), "oblique": (2, 8), "occluded": (1, 8)}

GOALS = ((4.1, 2.4), (4.3, 2.1), (3.9, 2.55), (4.4, 2.5), (3.7, 2.35))
TABLES = ((4.2, 0.6), (3.8, 0.5), (4.4, 0.8))
DOORS = ((0.4, 1.1), (0.5, 1.2), (0.3, 1.0))
SLOT_YS = (1.525, 1.225, 1.825, 1.375, 1.675)
STARTS_X = (1.6, 1.8, 1.45, 2.0)
HEADINGS = (math.pi / 2, 0.0, -math.pi / 2, math.pi, 2.0)


def _entity(id_, label, pos, height, radius, kind="object", normal=None):
    d = {"id": id_, "kind": kind, "class_label": label, "position": [round(pos[0], 4), round(pos[1], 4)],
         "height": height, "footprint_radius": radius,
         "shape_descriptor": "flat-patch" if kind == "sticker" else DESCRIPTORS[label]}
    if normal is not None:
        d["facing_normal"] = list(normal)
    return d


def _room_b(v: int) -> tuple[list, list, list]:
    """Divider wall, goal room contents and receptacle, varied by index."""
    dl, du = DOORS[v % len(DOORS)]
    rects = [[DIVIDER_X, 0.0, DIVIDER_X + 0.05, dl], [DIVIDER_X, du, DIVIDER_X + 0.05, HEIGHT]]
    g = GOALS[v % len(GOALS)]
    ents = [_entity("cup1", "cup", g, 0.1, 0.04),
            _entity("bottle1", "bottle", (4.75, 1.3 + 0.1 * (v % 3)), 0.2, 0.04)]
    t = TABLES[(v // 2) % len(TABLES)]
    recs = [{"id": "table", "label": "table", "position": list(t), "footprint_radius": 0.2}]
    return rects, ents, recs


def slot_scene(v: int, kind: str) -> tuple[dict, dict, tuple[float, float]]:
    ya = SLOT_YS[v % len(SLOT_YS)]
    rects = [[0.0, 0.0, 0.05, HEIGHT], [0.0, 0.0, SLOT_DEPTH, ya - SLOT_HALF],
             [0.0, ya + SLOT_HALF, SLOT_DEPTH, HEIGHT]]
    b_rects, ents, recs = _room_b(v)
    rects += b_rects
    ents.append(_entity("book1", "book", (1.5, 2.6 if ya < 2.0 else 0.5), 0.05, 0.08))
    if kind == "knife":
        ents.append(_entity("knife1", "knife", (0.375, ya - 0.035), 0.02, 0.03))
    elif kind == "occluded":
        ents.append(_entity("box1", "box", (0.375, ya), 0.15, 0.06))
    normal = [0.0, 1.0] if kind == "oblique" else [1.0, 0.0]
    sticker = {"position": [0.075, ya], "facing_normal": normal, "text": GOAL_LABEL}
    scene = {"width": WIDTH, "height": HEIGHT, "blocked_rects": rects, "entities": ents,
             "receptacles": recs}
    return scene, sticker, (STARTS_X[v % len(STARTS_X)], ya)


TUBE_Y = 2.025
TUBE_WALL = (0.9, 1.45)
CORRIDOR_WALL = 1.9
CORRIDOR_TOP = 2.5


def tube_scene(v: int) -> tuple[dict, dict, tuple[float, float]]:
    y = TUBE_Y
    x0, x1 = TUBE_WALL
    rects = [[x0, 0.0, x1, y - SLOT_HALF], [x0, y + SLOT_HALF, x1, CORRIDOR_TOP],
             [CORRIDOR_WALL, 0.0, CORRIDOR_WALL + 0.05, CORRIDOR_TOP],
             [x1, 0.0, CORRIDOR_WALL + 0.05, 0.9]]
    b_rects, ents, recs = _room_b(v)
    rects += b_rects
    ents.append(_entity("book1", "book", (0.4, 0.6), 0.05, 0.08))
    sticker = {"position": [1.675, y], "facing_normal": [-1.0, 0.0], "text": GOAL_LABEL}
    scene = {"width": WIDTH, "height": HEIGHT, "blocked_rects": rects, "entities": ents,
             "receptacles": recs}
    return scene, sticker, (0.3 + 0.05 * (v % 3), y)


def build_pool() -> dict:
    """Scenario document for the mirror pool (ids e001..e059)."""
    plan = []
    for pool, idx in (("full", 0), ("partial", 1)):
        for kind, counts in COUNTS.items():
            plan.extend((pool, kind) for _ in range(counts[idx]))
    # interleave constructions so episode ids do not group by kind
    order = sorted(range(len(plan)), key=lambda i: ((i * 37) % len(plan), i))
    full = [i for i in order if plan[i][0] == "full"]
    partial = [i for i in order if plan[i][0] == "partial"]
    # e001 is a plain slot episode in the full-success pool
    first = next(i for i in full if plan[i][1] == "slot")
    full.remove(first)
    sequence = [first] + [i for i in order if i != first]

    scenes, episodes = {}, []
    per_kind: dict[str, int] = {}
    for n, i in enumerate(sequence, start=1):
        pool, kind = plan[i]
        v = per_kind.get(kind, 0)
        per_kind[kind] = v + 1
        if kind == "tube":
            scene, sticker, start = tube_scene(v)
        else:
            scene, sticker, start = slot_scene(v, kind)
        eid = f"e{n:03d}"
        scenes[eid] = scene
        episodes.append({
            "id": eid, "scene": eid, "goal_label": GOAL_LABEL, "goal_instance": "cup1",
            "receptacle_id": "table", "start_pose": [start[0], start[1], HEADINGS[n % len(HEADINGS)]],
            "place_fails": pool == "partial", "max_steps": 400, "seed": n, "sticker": sticker,
        })
    return {"goal_descriptors": DESCRIPTORS, "scenes": scenes, "episodes": episodes}


def construction_of(episode_id: str) -> str:
    """Which construction a mirror episode uses (for tests and reports)."""
    doc = build_pool()
    plan = {}
    for e in doc["episodes"]:
        sc = doc["scenes"][e["scene"]]
        ids = {x["id"] for x in sc["entities"]}
        if "knife1" in ids:
            plan[e["id"]] = "knife"
        elif "box1" in ids:
            plan[e["id"]] = "occluded"
        elif e["sticker"]["facing_normal"] == [0.0, 1.0]:
            plan[e["id"]] = "oblique"
        elif e["sticker"]["facing_normal"] == [-1.0, 0.0]:
            plan[e["id"]] = "tube"
        else:
            plan[e["id"]] = "slot"
    return plan[episode_id]


def write_pool(path: Path = MIRROR_PATH) -> Path:
    import json
    doc = build_pool()
    parse_scenario(doc)  # validate before writing
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


if __name__ == "__main__":
    print(write_pool())
