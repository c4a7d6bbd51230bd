"""Map-write and pick gates that cut the path from a poisoned override to a grasp."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

COMMIT = "Commit"
DEFER = "Defer"
REJECT = "Reject"
ALLOW = "Allow"
ABORT = "AbortAndInvalidate"


@dataclass(frozen=True)
class MultiView:
    k: int = 3
    min_separation: float = 0.26

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("multi-view confirmation needs k >= 2")
        if not self.min_separation > 0:
            raise ValueError("min_separation must be positive")


@dataclass(frozen=True)
class MitigationConfig:
    multi_view: MultiView | None = None
    anomaly_gate: bool = False
    grasp_requery: bool = False

    @property
    def any(self) -> bool:
        return self.multi_view is not None or self.anomaly_gate or self.grasp_requery

    def label(self) -> str:
        parts = []
        if self.multi_view:
            parts.append(f"multiview:{self.multi_view.k}:{self.multi_view.min_separation:g}")
        if self.anomaly_gate:
            parts.append("anomaly")
        if self.grasp_requery:
            parts.append("requery")
        return "+".join(parts) or "none"


NO_MITIGATIONS = MitigationConfig()


def all_combinations(k: int = 3, min_separation: float = 0.26) -> list[MitigationConfig]:
    return [MitigationConfig(multi_view=MultiView(k, min_separation) if mv else None,
                             anomaly_gate=an, grasp_requery=rq)
            for mv, an, rq in product((False, True), repeat=3)]


def parse_mitigations(tokens) -> MitigationConfig:
    """Parse CLI tokens like ``multiview:3:0.26``, ``anomaly``, ``requery``."""
    mv, an, rq = None, False, False
    for tok in tokens:
        for part in str(tok).split(","):
            part = part.strip()
            if not part or part == "none":
                continue
            if part.startswith("multiview"):
                bits = part.split(":")
                k = int(bits[1]) if len(bits) > 1 else 3
                sep = float(bits[2]) if len(bits) > 2 else 0.26
                mv = MultiView(k, sep)
            elif part == "anomaly":
                an = True
            elif part == "requery":
                rq = True
            else:
                raise ValueError(f"unknown mitigation {part!r}")
    return MitigationConfig(multi_view=mv, anomaly_gate=an, grasp_requery=rq)


def angular_separation(a: float, b: float) -> float:
    d = abs(math.fmod(a - b, 2 * math.pi))
    return min(d, 2 * math.pi - d)


@dataclass
class PendingViews:
    """Distinct-bearing firing observations per instance, held outside the map."""

    bearings: dict[str, list[float]] = field(default_factory=dict)

    def add(self, instance_id: str, bearing: float, min_separation: float) -> list[float]:
        kept = self.bearings.setdefault(instance_id, [])
        if all(angular_separation(bearing, b) >= min_separation for b in kept):
            kept.append(bearing)
        return kept

    def clear(self, instance_id: str) -> None:
        self.bearings.pop(instance_id, None)


def descriptor_matches(entity, goal_label: str, goal_descriptors: dict[str, str]) -> bool:
    expected = goal_descriptors.get(goal_label)
    return expected is not None and entity.shape_descriptor == expected


def gate_map_write(policy: MitigationConfig, decision, pending: PendingViews | None, *,
                   bearing: float = 0.0, driving_entity=None, goal_label: str = "",
                   goal_descriptors: dict[str, str] | None = None) -> tuple[str, str]:
    """Return (verdict, reason) for a fired override decision."""
    if not decision.fired:
        raise ValueError("only fired decisions reach the write gate")
    if policy.anomaly_gate and decision.crop.contains_text:
        if driving_entity is None or not descriptor_matches(driving_entity, goal_label,
                                                            goal_descriptors or {}):
            desc = getattr(driving_entity, "shape_descriptor", "?")
            return REJECT, f"text in crop; {decision.driving_entity} is {desc}"
    if policy.multi_view is not None:
        if pending is None:
            pending = PendingViews()
        kept = pending.add(decision.crop.primary.instance_id, bearing,
                           policy.multi_view.min_separation)
        if len(kept) < policy.multi_view.k:
            return DEFER, f"{len(kept)}/{policy.multi_view.k} views"
        return COMMIT, f"{len(kept)} views"
    return COMMIT, ""


def gate_pick(policy: MitigationConfig, target_entity, fresh_decision, *, driving_entity=None,
              goal_label: str = "", goal_descriptors: dict[str, str] | None = None) -> tuple[str, str]:
    """Grasp-time re-query against a fresh crop of the target.

    ``driving_entity`` is the content that won the fresh crop's argmax; it
    defaults to the target itself.
    """
    if not policy.grasp_requery:
        return ALLOW, ""
    if fresh_decision is None or not fresh_decision.fired:
        score = None if fresh_decision is None else round(fresh_decision.score, 4)
        return ABORT, f"fresh score {score} does not fire"
    if policy.anomaly_gate and fresh_decision.crop.contains_text:
        driver = driving_entity if driving_entity is not None else target_entity
        if not descriptor_matches(driver, goal_label, goal_descriptors or {}):
            return ABORT, f"text in crop; {driver.id} is {driver.shape_descriptor}"
    return ALLOW, ""
