"""Persistent semantic voxel cache.

Labels are written when the override gate fires and read back by the state
machine with no re-scoring. Last write wins per voxel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from scipy import ndimage
import numpy as np

from .world import CELL, cell_center, footprint_cells

Coord = tuple[int, int, int]


class MapWriteRejected(RuntimeError):
    """A mitigation policy vetoed the write."""


@dataclass
class VoxelRecord:
    coords: Coord
    label: str
    score: float
    written_step: int
    provenance: str
    instance_id: str
    confirmations: int = 1
    view_bearings: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"coords": list(self.coords), "label": self.label, "score": round(self.score, 4),
                "step": self.written_step, "provenance": self.provenance,
                "instance": self.instance_id, "confirmations": self.confirmations,
                "view_bearings": [round(b, 4) for b in self.view_bearings]}


@dataclass(frozen=True)
class GoalCluster:
    centroid: tuple[float, float]
    coords: frozenset
    instance_ids: tuple[str, ...]


def z_levels(height: float) -> int:
    return max(1, int(math.ceil(height / CELL - 1e-9)))


def column_coords(position: Sequence[float], radius: float, height: float) -> list[Coord]:
    return [(ix, iy, iz) for ix, iy in footprint_cells(position, radius) for iz in range(z_levels(height))]


class SemanticMap:
    def __init__(self):
        self.records: dict[Coord, VoxelRecord] = {}

    def __len__(self):
        return len(self.records)

    def write_override(self, decision, footprint: Iterable[Coord], step: int, label: str,
                       bearings: Sequence[float] = (), vetoed: bool = False) -> list[Coord]:
        """Label every voxel of the relabelled instance; returns written coords in sorted order."""
        if not decision.fired:
            raise ValueError("write_override needs a fired decision")
        if vetoed:
            raise MapWriteRejected(decision.crop.primary.instance_id)
        views = list(bearings) or [0.0]
        written = sorted(set(footprint))
        for c in written:
            self.records[c] = VoxelRecord(
                coords=c, label=label, score=decision.score, written_step=step,
                provenance=decision.driving_entity,
                instance_id=decision.crop.primary.instance_id,
                confirmations=len(views), view_bearings=views)
        return written

    def clusters(self, label: str) -> list[GoalCluster]:
        cells = [c for c, r in self.records.items() if r.label == label]
        if not cells:
            return []
        arr = np.asarray(cells)
        lo = arr.min(axis=0)
        grid = np.zeros(tuple(arr.max(axis=0) - lo + 1), dtype=bool)
        grid[tuple((arr - lo).T)] = True
        labels, n = ndimage.label(grid, structure=np.ones((3, 3, 3), dtype=bool))
        out = []
        for k in range(1, n + 1):
            members = [tuple(int(v) for v in p + lo) for p in np.argwhere(labels == k)]
            cols = sorted({(m[0], m[1]) for m in members})
            cx = sum(cell_center(*c)[0] for c in cols) / len(cols)
            cy = sum(cell_center(*c)[1] for c in cols) / len(cols)
            ids = tuple(sorted({self.records[m].instance_id for m in members}))
            out.append(GoalCluster(centroid=(cx, cy), coords=frozenset(members), instance_ids=ids))
        return out

    def nearest_cluster(self, label: str, agent_position: Sequence[float] | None = None) -> GoalCluster | None:
        best = None
        for c in self.clusters(label):
            d = 0.0 if agent_position is None else math.hypot(
                c.centroid[0] - agent_position[0], c.centroid[1] - agent_position[1])
            key = (d, min(c.coords))
            if best is None or key < best[0]:
                best = (key, c)
        return None if best is None else best[1]

    def query_goal(self, label: str, agent_position: Sequence[float] | None = None):
        c = self.nearest_cluster(label, agent_position)
        return None if c is None else c.centroid

    def invalidate(self, coords: Iterable[Coord]) -> int:
        n = 0
        for c in coords:
            if self.records.pop(tuple(c), None) is not None:
                n += 1
        return n

    def snapshot(self) -> list[dict]:
        return [self.records[c].as_dict() for c in sorted(self.records)]


def write_override(smap: SemanticMap, decision, footprint, step: int, label: str, **kw) -> list[Coord]:
    return smap.write_override(decision, footprint, step, label, **kw)


def query_goal(smap: SemanticMap, label: str, agent_position=None):
    return smap.query_goal(label, agent_position)


def invalidate(smap: SemanticMap, coords) -> int:
    return smap.invalidate(coords)
