"""Perception front-end: proposals, angular crops, similarity scoring and the override gate.

Proposals are derived from ground truth plus visibility (a stand-in for an
open-vocabulary detector). The similarity scorer is a calibrated model of a
joint image-text encoder: goal objects and goal-text stickers land in
[0.26, 0.30], everything else in [0.17, 0.25].
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .world import AgentBody, Entity, Scene, ray_blocked, wrap_pi

THETA = 0.28
N_SAMPLE_RAYS = 9

GOAL_BASE, GOAL_SPAN = 0.28, 0.02
TEXT_BASE, TEXT_SPAN = 0.26, 0.04
OTHER_BASE, OTHER_SPAN = 0.17, 0.08
GOAL_BAND = (TEXT_BASE, GOAL_BASE + GOAL_SPAN)
OTHER_BAND = (OTHER_BASE, OTHER_BASE + OTHER_SPAN)

# content classes for scoring and sweeps
GOAL_OBJECT = "goal_object"
GOAL_TEXT = "goal_text"
OTHER = "other"


@dataclass(frozen=True)
class Detection:
    instance_id: str
    bearing: float
    distance: float
    angular_interval: tuple[float, float]
    occlusion_fraction: float
    preliminary_label: str
    kind: str
    text: str | None = None
    position: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class Crop:
    primary: Detection
    primary_legibility: float
    background: tuple[tuple[Detection, float], ...] = ()
    contains_text: bool = False

    def contents(self) -> list[tuple[Detection, float]]:
        return [(self.primary, self.primary_legibility), *self.background]


@dataclass(frozen=True)
class OverrideDecision:
    crop: Crop
    score: float
    threshold: float
    fired: bool
    driving_entity: str
    driving_class: str = OTHER


def _sample_offsets(n: int = N_SAMPLE_RAYS) -> list[float]:
    return [-1.0 + 2.0 * k / (n - 1) for k in range(n)]


def occlusion_fraction(scene: Scene, eye: Sequence[float], entity: Entity) -> float:
    """Fraction of sample rays across the entity's visible width that are blocked."""
    ex, ey = entity.position
    vx, vy = ex - eye[0], ey - eye[1]
    d = math.hypot(vx, vy)
    if d == 0.0:
        return 0.0
    px, py = -vy / d, vx / d
    r = entity.footprint_radius
    blocked = 0
    for t in _sample_offsets():
        target = (ex + px * t * r, ey + py * t * r)
        if not scene.in_bounds(*target) or ray_blocked(scene, eye, target, ignore=(entity.id,)):
            blocked += 1
    return blocked / N_SAMPLE_RAYS


def propose(scene: Scene, agent: AgentBody) -> list[Detection]:
    """One detection per entity in range, inside the FOV cone and not fully occluded."""
    eye = agent.position
    half_fov = agent.fov / 2.0
    out = []
    for e in scene.entities:
        dx, dy = e.position[0] - eye[0], e.position[1] - eye[1]
        dist = math.hypot(dx, dy)
        if dist > agent.sensing_range or dist == 0.0:
            continue
        bearing = wrap_pi(math.atan2(dy, dx) - agent.heading)
        if abs(bearing) > half_fov:
            continue
        occ = occlusion_fraction(scene, eye, e)
        if occ >= 1.0:
            continue
        half = math.asin(min(1.0, e.footprint_radius / dist))
        lo = max(-half_fov, bearing - half)
        hi = min(half_fov, bearing + half)
        out.append(Detection(
            instance_id=e.id,
            bearing=bearing,
            distance=dist,
            angular_interval=(lo, hi),
            occlusion_fraction=occ,
            preliminary_label="sticker" if e.is_sticker else e.class_label,
            kind=e.kind,
            text=e.class_label if e.is_sticker else None,
            position=e.position,
        ))
    return out


def legibility(entity: Entity, eye: Sequence[float], occlusion: float) -> float:
    """max(0, cos(alpha)) * (1 - occlusion), alpha between the face normal and the sticker->eye ray."""
    if entity.facing_normal is None:
        return 0.0
    vx, vy = eye[0] - entity.position[0], eye[1] - entity.position[1]
    d = math.hypot(vx, vy)
    if d == 0.0:
        return 0.0
    nx, ny = entity.facing_normal
    cos_a = (nx * vx + ny * vy) / (d * math.hypot(nx, ny))
    return max(0.0, cos_a) * (1.0 - occlusion)


def _overlaps(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def build_crops(detections: Sequence[Detection], scene: Scene, agent: AgentBody) -> list[Crop]:
    """Attach to every detection the detections behind it that fall inside its angular window."""
    eye = agent.position
    leg = {}
    for d in detections:
        if d.kind == "sticker":
            leg[d.instance_id] = legibility(scene.entity(d.instance_id), eye, d.occlusion_fraction)
        else:
            leg[d.instance_id] = 0.0
    crops = []
    for d in detections:
        bg = tuple((o, leg[o.instance_id]) for o in detections
                   if o.instance_id != d.instance_id and o.distance > d.distance
                   and _overlaps(o.angular_interval, d.angular_interval))
        text = d.kind == "sticker" or any(o.kind == "sticker" and l > 0.0 for o, l in bg)
        crops.append(Crop(primary=d, primary_legibility=leg[d.instance_id],
                          background=bg, contains_text=text))
    return crops


def unit_hash(entity_id: str, goal_label: str, seed: int) -> float:
    """Deterministic value in [0, 1) from (entity id, goal label, seed)."""
    h = hashlib.blake2b(f"{entity_id}\x1f{goal_label}\x1f{seed}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big") / 2.0 ** 64


# band edges must come out exact (0.28 + 0.02 is not 0.30 in binary)
SCORE_DIGITS = 12


def goal_object_score(distance: float, occlusion: float, sensing_range: float = 5.0) -> float:
    q = min(1.0, max(0.0, 1.0 - distance / sensing_range)) * (1.0 - occlusion)
    return round(GOAL_BASE + GOAL_SPAN * q, SCORE_DIGITS)


def goal_text_score(legibility_: float) -> float:
    return round(TEXT_BASE + TEXT_SPAN * legibility_, SCORE_DIGITS)


def other_score(u: float) -> float:
    return round(OTHER_BASE + OTHER_SPAN * u, SCORE_DIGITS)


def content_score(det: Detection, leg: float, goal_label: str, seed: int,
                  sensing_range: float = 5.0) -> tuple[float, str]:
    if det.kind == "object" and det.preliminary_label == goal_label:
        return goal_object_score(det.distance, det.occlusion_fraction, sensing_range), GOAL_OBJECT
    if det.kind == "sticker" and det.text == goal_label:
        return goal_text_score(leg), GOAL_TEXT
    return other_score(unit_hash(det.instance_id, goal_label, seed)), OTHER


def score_crop(crop: Crop, goal_label: str, seed: int = 0, theta: float = THETA,
               sensing_range: float = 5.0) -> OverrideDecision:
    if not goal_label:
        raise ValueError("goal_label must be non-empty")
    best = None
    for det, leg in crop.contents():
        s, cls = content_score(det, leg, goal_label, seed, sensing_range)
        key = (-s, det.instance_id)
        if best is None or key < best[0]:
            best = (key, s, det.instance_id, cls)
    _, score, driver, cls = best
    return OverrideDecision(crop=crop, score=score, threshold=theta, fired=score > theta,
                            driving_entity=driver, driving_class=cls)


def sense(scene: Scene, agent: AgentBody, goal_label: str, seed: int = 0,
          theta: float = THETA) -> tuple[list[Detection], list[OverrideDecision]]:
    dets = propose(scene, agent)
    crops = build_crops(dets, scene, agent)
    return dets, [score_crop(c, goal_label, seed, theta, agent.sensing_range) for c in crops]


# ------------------------------------------------------------------ sweeps

REGIME_ALL = "all-fire"
REGIME_DISTRACTOR = "distractor false positives"
REGIME_INTENDED = "intended"
REGIME_CEILING = "ceiling no-fire"
REGIME_NEVER = "never-fire"


@dataclass
class SweepRow:
    theta: float
    n_crops: int
    fired: int
    fired_by_class: dict[str, int] = field(default_factory=dict)
    regime: str = ""


def classify_regime(theta: float, n_crops: int, fired: int, by_class: dict[str, int]) -> str:
    if n_crops and fired == n_crops:
        return REGIME_ALL
    if by_class.get(OTHER, 0) > 0:
        return REGIME_DISTRACTOR
    if fired > 0:
        return REGIME_INTENDED
    return REGIME_CEILING if theta <= GOAL_BAND[1] else REGIME_NEVER


def threshold_sweep(decisions: Iterable[OverrideDecision], thetas: Sequence[float]) -> list[SweepRow]:
    """Re-gate already scored crops at each threshold."""
    if not thetas:
        raise ValueError("threshold sweep needs at least one theta")
    scored = [(d.score, d.driving_class) for d in decisions]
    rows = []
    for th in thetas:
        by_class = {GOAL_OBJECT: 0, GOAL_TEXT: 0, OTHER: 0}
        fired = 0
        for s, cls in scored:
            if s > th:
                fired += 1
                by_class[cls] += 1
        rows.append(SweepRow(theta=th, n_crops=len(scored), fired=fired, fired_by_class=by_class,
                             regime=classify_regime(th, len(scored), fired, by_class)))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    lines = [f"{'theta':>6}  {'crops':>6}  {'fired':>6}  {'goal':>5}  {'text':>5}  {'other':>6}  regime"]
    for r in rows:
        c = r.fired_by_class
        lines.append(f"{r.theta:6.2f}  {r.n_crops:6d}  {r.fired:6d}  {c.get(GOAL_OBJECT, 0):5d}  "
                     f"{c.get(GOAL_TEXT, 0):5d}  {c.get(OTHER, 0):6d}  {r.regime}")
    return "\n".join(lines) + "\n"
