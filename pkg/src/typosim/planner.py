"""Fast Marching Eikonal solver on occupancy grids, path extraction, frontiers.

Arrival times are in cell lengths. The front is label-setting: a cell's value
is frozen when popped from the heap, and equal values pop in linear-index
order (``ix * ny + iy``) so fields are bit-reproducible.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

INF = math.inf
SQRT2 = math.sqrt(2.0)
INFLATE_CELLS = 2

_AXIS = ((-1, 0), (1, 0), (0, -1), (0, 1))
_DIAG = ((-1, -1), (1, 1), (-1, 1), (1, -1))
_NBR8 = _AXIS + _DIAG


class PlanningError(ValueError):
    pass


@dataclass
class DistanceField:
    T: np.ndarray
    source: tuple[int, int]
    blocked: np.ndarray

    def __getitem__(self, cell) -> float:
        return float(self.T[cell])

    def reachable(self, cell) -> bool:
        return math.isfinite(self.T[cell])


def upwind_update(a: float, b: float, h: float = 1.0) -> float:
    """Solve (T-a)^2 + (T-b)^2 = h^2 for the upwind root, falling back to one side."""
    if a > b:
        a, b = b, a
    if b == INF or b - a >= h:
        return a + h
    return 0.5 * (a + b + math.sqrt(2.0 * h * h - (a - b) ** 2))


def fmm_solve(blocked: np.ndarray, source: tuple[int, int], diagonal: bool = True) -> DistanceField:
    """First-order Fast Marching from one source cell at unit speed.

    Each trial cell takes the smaller of its two x-neighbours and its two
    y-neighbours and solves the upwind quadratic. With ``diagonal`` the same
    update is also done on the 45-degree rotated stencil (spacing sqrt 2) and
    the smaller result kept; this keeps T below the 8-connected path length.
    """
    nx, ny = blocked.shape
    sx, sy = source
    if not (0 <= sx < nx and 0 <= sy < ny):
        raise PlanningError(f"source {source} outside grid")
    if blocked[sx, sy]:
        raise PlanningError(f"source {source} is blocked")

    # padded flat layout: a ring of blocked cells removes bounds checks
    W = ny + 2
    padded = np.ones((nx + 2, ny + 2), dtype=bool)
    padded[1:-1, 1:-1] = blocked
    free = (~padded).ravel().tolist()
    n = len(free)
    T = [INF] * n
    K = [INF] * n  # frozen values only; INF while far or trial
    src = (sx + 1) * W + (sy + 1)
    T[src] = 0.0
    heap = [(0.0, (sx * ny + sy), src)]
    if diagonal:
        offsets = (-W, W, -1, 1, -W - 1, W + 1, -W + 1, W - 1)
    else:
        offsets = (-W, W, -1, 1)
    push, pop = heapq.heappush, heapq.heappop
    sqrt = math.sqrt
    while heap:
        t, _, i = pop(heap)
        if K[i] != INF or t > T[i]:
            continue
        K[i] = t
        for o in offsets:
            j = i + o
            if not free[j] or K[j] != INF:
                continue
            a = K[j - W]
            v = K[j + W]
            if v < a:
                a = v
            b = K[j - 1]
            v = K[j + 1]
            if v < b:
                b = v
            if a > b:
                a, b = b, a
            if a == INF:
                new = INF
            elif b - a >= 1.0:
                new = a + 1.0
            else:
                new = 0.5 * (a + b + sqrt(2.0 - (a - b) * (a - b)))
            if diagonal:
                c = K[j - W - 1]
                v = K[j + W + 1]
                if v < c:
                    c = v
                d = K[j - W + 1]
                v = K[j + W - 1]
                if v < d:
                    d = v
                if c > d:
                    c, d = d, c
                if c != INF:
                    if d - c >= SQRT2:
                        alt = c + SQRT2
                    else:
                        alt = 0.5 * (c + d + sqrt(4.0 - (c - d) * (c - d)))
                    if alt < new:
                        new = alt
            if new < T[j]:
                T[j] = new
                jx, jy = divmod(j, W)
                push(heap, (new, (jx - 1) * ny + (jy - 1), j))
    out = np.asarray(K).reshape(nx + 2, ny + 2)[1:-1, 1:-1].copy()
    return DistanceField(T=out, source=(sx, sy), blocked=blocked)


def extract_path(field: DistanceField, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Steepest descent over the 8 neighbours until the source is reached."""
    T = field.T
    nx, ny = T.shape
    if not field.reachable(start):
        raise PlanningError(f"start {start} is unreachable from {field.source}")
    path = [tuple(start)]
    cur = tuple(start)
    limit = int(np.isfinite(T).sum())
    while cur != field.source:
        best, best_t = None, T[cur]
        for dx, dy in _NBR8:
            c = (cur[0] + dx, cur[1] + dy)
            if 0 <= c[0] < nx and 0 <= c[1] < ny:
                t = T[c]
                if t < best_t or (t == best_t and best is not None and c < best):
                    best, best_t = c, t
        if best is None or len(path) > limit:
            raise PlanningError(f"descent stalled at {cur}")
        path.append(best)
        cur = best
    return path


def path_length(path) -> float:
    """Length of a cell path in cell units."""
    return sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(path, path[1:]))


def dijkstra8(blocked: np.ndarray, source: tuple[int, int]) -> np.ndarray:
    """8-connected shortest path lengths (edge costs 1 and sqrt 2)."""
    nx, ny = blocked.shape
    D = np.full((nx, ny), INF)
    D[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, (x, y) = heapq.heappop(heap)
        if d > D[x, y]:
            continue
        for dx, dy in _NBR8:
            a, b = x + dx, y + dy
            if 0 <= a < nx and 0 <= b < ny and not blocked[a, b]:
                nd = d + (SQRT2 if dx and dy else 1.0)
                if nd < D[a, b]:
                    D[a, b] = nd
                    heapq.heappush(heap, (nd, (a, b)))
    return D


def inflate(occupancy: np.ndarray, cells: int = INFLATE_CELLS) -> np.ndarray:
    """Grow obstacles by a disk of ``cells`` radius so paths keep clearance."""
    if cells <= 0:
        return occupancy.copy()
    r = np.arange(-cells, cells + 1)
    disk = (r[:, None] ** 2 + r[None, :] ** 2) <= cells * cells
    grown = ndimage.binary_dilation(occupancy, structure=disk)
    # the scene border counts as a wall
    grown[:cells, :] = True
    grown[-cells:, :] = True
    grown[:, :cells] = True
    grown[:, -cells:] = True
    return grown | occupancy


def frontier_cells(free: np.ndarray, explored: np.ndarray, min_region: int = 4) -> np.ndarray:
    """Free, explored cells 4-adjacent to an unexplored region of >= min_region cells."""
    unexplored = ~explored
    labels, n = ndimage.label(unexplored)
    if n == 0:
        return np.zeros_like(free)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    big = sizes[labels] >= min_region
    touch = np.zeros_like(free)
    touch[1:, :] |= big[:-1, :]
    touch[:-1, :] |= big[1:, :]
    touch[:, 1:] |= big[:, :-1]
    touch[:, :-1] |= big[:, 1:]
    return free & touch


def next_frontier(occupancy: np.ndarray, explored: np.ndarray, agent_cell: tuple[int, int],
                  field: DistanceField | None = None) -> tuple[int, int] | None:
    """Nearest free cell (by FMM distance from the agent) bordering unexplored space."""
    free = ~occupancy
    cand = frontier_cells(free, explored)
    if not cand.any():
        return None
    if field is None:
        field = fmm_solve(occupancy, agent_cell)
    T = np.where(cand, field.T, INF)
    flat = int(np.argmin(T))  # argmin returns the lowest linear index among ties
    if not math.isfinite(T.flat[flat]):
        return None
    return divmod(flat, T.shape[1])


class NavGrid:
    """Inflated occupancy plus a cache of distance fields keyed by source cell."""

    def __init__(self, occupancy: np.ndarray, inflate_cells: int = INFLATE_CELLS):
        self.raw = occupancy
        self.blocked = inflate(occupancy, inflate_cells)
        self._fields: dict[tuple[int, int], DistanceField] = {}

    @property
    def shape(self):
        return self.blocked.shape

    def field(self, source: tuple[int, int]) -> DistanceField:
        f = self._fields.get(source)
        if f is None:
            if len(self._fields) > 512:
                self._fields.clear()
            f = self._fields[source] = fmm_solve(self.blocked, source)
        return f

    def nearest_free(self, cell: tuple[int, int]) -> tuple[int, int] | None:
        """Closest navigable cell by Euclidean distance, ties by linear index."""
        nx, ny = self.blocked.shape
        cx = min(max(cell[0], 0), nx - 1)
        cy = min(max(cell[1], 0), ny - 1)
        if not self.blocked[cx, cy]:
            return (cx, cy)
        for r in range(1, max(nx, ny)):
            best = None
            for ix in range(cx - r, cx + r + 1):
                for iy in range(cy - r, cy + r + 1):
                    if max(abs(ix - cx), abs(iy - cy)) != r:
                        continue
                    if 0 <= ix < nx and 0 <= iy < ny and not self.blocked[ix, iy]:
                        key = ((ix - cx) ** 2 + (iy - cy) ** 2, ix * ny + iy)
                        if best is None or key < best[0]:
                            best = (key, (ix, iy))
            if best is not None:
                # a cell in ring r+1 can still be closer than a ring-r corner
                d2 = best[0][0]
                for rr in range(r + 1, int(math.ceil(math.sqrt(d2))) + 1):
                    for ix in range(cx - rr, cx + rr + 1):
                        for iy in range(cy - rr, cy + rr + 1):
                            if max(abs(ix - cx), abs(iy - cy)) != rr:
                                continue
                            if 0 <= ix < nx and 0 <= iy < ny and not self.blocked[ix, iy]:
                                key = ((ix - cx) ** 2 + (iy - cy) ** 2, ix * ny + iy)
                                if key < best[0]:
                                    best = (key, (ix, iy))
                return best[1]
        return None


@lru_cache(maxsize=32)
def _nav_for(width: float, height: float, rects: tuple) -> NavGrid:
    from .world import rasterize
    return NavGrid(rasterize(width, height, rects))


def nav_grid(scene) -> NavGrid:
    """Shared navigation grid for every scene with the same walls."""
    return _nav_for(scene.width, scene.height, scene.blocked_rects)
