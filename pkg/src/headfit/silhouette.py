"""Dense-reconstruction cleanup, silhouette masks and scalp feature extraction.

The dense reconstruction is the multi-view mesh of the subject; it typically
carries background debris and sliver triangles that must be filtered before a
silhouette is trusted. Scalp features pair extremal points of the projected
model scalp with extremal pixels of the upper silhouette.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .camera import DEPTH_EPS, PerspectiveCamera, SimilarityTransform, project_points
from .errors import InvalidInputError, OverFilteredError
from .shape_model import HeadMesh, MorphableModel

log = logging.getLogger(__name__)

# The dense reconstruction is an ordinary triangle mesh.
DenseReconstruction = HeadMesh

SCALP_DIRECTIONS = ("left", "right", "top")


@dataclass
class SilhouetteMask:
    """Binary coverage mask of one frame."""

    frame_id: str
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise InvalidInputError("mask must be a 2-d array")

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class ScalpCorrespondence:
    """One scalp feature: a model vertex paired with a silhouette pixel."""

    frame_id: str
    direction: str
    vertex_index: int
    pixel: np.ndarray

    def __post_init__(self):
        if self.direction not in SCALP_DIRECTIONS:
            raise InvalidInputError(f"unknown scalp direction {self.direction!r}")
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)


def _component_roots(num_vertices: int, triangles: np.ndarray) -> np.ndarray:
    """Union-find roots per vertex, connecting vertices that share a triangle."""
    parent = np.arange(num_vertices)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b, c in triangles:
        ra, rb, rc = find(a), find(b), find(c)
        root = min(ra, rb, rc)
        parent[ra] = parent[rb] = parent[rc] = root
    for v in range(num_vertices):
        parent[v] = find(v)
    return parent


def _unique_edge_lengths(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    edges = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)


def filter_reconstruction(mesh: HeadMesh, edge_factor: float = 8.0) -> HeadMesh:
    """Keep the largest connected component and drop long-edge triangles.

    The two steps repeat until nothing changes, which makes the whole
    operation idempotent even when edge removal splits the mesh or shifts the
    median edge length. Orphaned vertices are dropped and triangles reindexed.

    Raises:
        OverFilteredError: filtering removed every triangle.
    """
    if edge_factor <= 0.0:
        raise InvalidInputError(f"edge_factor must be positive, got {edge_factor}")
    triangles = mesh.triangles
    while True:
        if len(triangles) == 0:
            raise OverFilteredError("no triangles left after filtering")
        roots = _component_roots(mesh.num_vertices, triangles)
        tri_roots = roots[triangles[:, 0]]
        counts = np.bincount(tri_roots)
        best = int(np.flatnonzero(counts == counts.max())[0])
        kept = triangles[tri_roots == best]

        lengths = _unique_edge_lengths(mesh.vertices, kept)
        median = float(np.median(lengths))
        sides = np.stack(
            [
                np.linalg.norm(mesh.vertices[kept[:, 0]] - mesh.vertices[kept[:, 1]], axis=1),
                np.linalg.norm(mesh.vertices[kept[:, 1]] - mesh.vertices[kept[:, 2]], axis=1),
                np.linalg.norm(mesh.vertices[kept[:, 2]] - mesh.vertices[kept[:, 0]], axis=1),
            ]
        ).max(axis=0)
        kept = kept[sides <= edge_factor * median]
        if len(kept) == len(triangles) and np.array_equal(kept, triangles):
            break
        triangles = kept

    used = np.unique(triangles)
    remap = np.full(mesh.num_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return HeadMesh(mesh.vertices[used], remap[triangles])


def rasterize_silhouette(mesh: HeadMesh, camera: PerspectiveCamera,
                         frame_id: str | None = None) -> SilhouetteMask:
    """Binary coverage mask of the mesh at full camera resolution.

    A pixel is set iff its center lies inside the closed projection of a
    triangle whose three vertices are all in front of the camera. No
    z-buffering: this is pure coverage. Triangles partially behind the camera
    are skipped. Each triangle is resolved one image row at a time as the
    closed span between its edge crossings; spans accumulate in a difference
    image that a final scan turns into the boolean mask, which keeps the cost
    proportional to covered rows rather than covered pixels.
    """
    h, w = camera.height, camera.width
    empty = SilhouetteMask(
        frame_id if frame_id is not None else camera.frame_id, np.zeros((h, w), bool)
    )
    uv, depth = project_points(camera, mesh.vertices)
    tris = mesh.triangles[(depth[mesh.triangles] >= DEPTH_EPS).all(axis=1)]
    if len(tris) == 0:
        return empty
    tu = uv[:, 0][tris]
    tv = uv[:, 1][tris]
    area = (tu[:, 1] - tu[:, 0]) * (tv[:, 2] - tv[:, 0]) - (
        tv[:, 1] - tv[:, 0]
    ) * (tu[:, 2] - tu[:, 0])
    tu = tu[area != 0.0]
    tv = tv[area != 0.0]

    # pixel (r, c) has center (c + 0.5, r + 0.5)
    r0 = np.maximum(np.ceil(tv.min(axis=1) - 0.5), 0.0).astype(np.int64)
    r1 = np.minimum(np.floor(tv.max(axis=1) - 0.5), h - 1).astype(np.int64)
    counts = np.maximum(r1 - r0 + 1, 0)
    total = int(counts.sum())
    if total == 0:
        return empty
    tri_of = np.repeat(np.arange(len(tu)), counts)
    starts = np.cumsum(counts) - counts
    rows = r0[tri_of] + (np.arange(total) - starts[tri_of])
    y = rows + 0.5

    span_lo = np.full(total, np.inf)
    span_hi = np.full(total, -np.inf)
    for ea, eb in ((0, 1), (1, 2), (2, 0)):
        xa, ya = tu[tri_of, ea], tv[tri_of, ea]
        xb, yb = tu[tri_of, eb], tv[tri_of, eb]
        dy = yb - ya
        crossing = (dy != 0.0) & (y >= np.minimum(ya, yb)) & (y <= np.maximum(ya, yb))
        x = xa + (y - ya) * (xb - xa) / np.where(dy == 0.0, 1.0, dy)
        span_lo = np.minimum(span_lo, np.where(crossing, x, np.inf))
        span_hi = np.maximum(span_hi, np.where(crossing, x, -np.inf))
        # an edge lying exactly on the row contributes both of its endpoints
        level = (dy == 0.0) & (y == ya)
        span_lo = np.minimum(span_lo, np.where(level, np.minimum(xa, xb), np.inf))
        span_hi = np.maximum(span_hi, np.where(level, np.maximum(xa, xb), -np.inf))

    c0 = np.ceil(span_lo - 0.5)
    c1 = np.floor(span_hi - 0.5)
    ok = (c0 <= c1) & (c1 >= 0.0) & (c0 <= w - 1)
    rows = rows[ok]
    c0 = np.maximum(c0[ok], 0.0).astype(np.int64)
    c1 = np.minimum(c1[ok], w - 1).astype(np.int64)
    coverage = np.zeros((h, w + 1), dtype=np.int32)
    np.add.at(coverage, (rows, c0), 1)
    np.add.at(coverage, (rows, c1 + 1), -1)
    return SilhouetteMask(empty.frame_id, coverage.cumsum(axis=1)[:, :w] > 0)


def model_scalp_extrema(
    mesh: HeadMesh,
    top_region: np.ndarray,
    camera: PerspectiveCamera,
    alignment: SimilarityTransform,
) -> dict[str, int]:
    """Extremal scalp vertices of the aligned model as seen by a camera.

    Returns a direction -> vertex index mapping for the left-most (smallest
    u), right-most (largest u) and top-most (smallest v) projected top-region
    vertices with positive depth. Empty when no top-region vertex is in front
    of the camera. Ties resolve to the smallest vertex index.
    """
    top_region = np.asarray(top_region, dtype=np.int64)
    if top_region.size == 0:
        return {}
    world = alignment.apply(mesh.vertices[top_region])
    uv, depth = project_points(camera, world)
    ok = depth >= DEPTH_EPS
    if not np.any(ok):
        return {}
    idx = top_region[ok]
    uv = uv[ok]
    # top_region is sorted ascending, so first-minimum picks the smallest index
    return {
        "left": int(idx[np.argmin(uv[:, 0])]),
        "right": int(idx[np.argmax(uv[:, 0])]),
        "top": int(idx[np.argmin(uv[:, 1])]),
    }


def silhouette_scalp_extrema(
    mask: SilhouetteMask, upper_boundary_v: float
) -> dict[str, np.ndarray]:
    """Extremal pixels of the mask portion above a boundary row.

    Only pixels in rows strictly below ``upper_boundary_v`` (towards the image
    top) participate. Returns direction -> pixel center (u, v); empty when the
    restricted mask has no set pixel. Ties resolve to the smallest row-major
    pixel index.
    """
    rows_limit = min(int(np.ceil(upper_boundary_v)), mask.mask.shape[0])
    if rows_limit <= 0:
        return {}
    sub = mask.mask[:rows_limit]
    rows, cols = np.nonzero(sub)
    if rows.size == 0:
        return {}

    def center(r, c):
        return np.array([c + 0.5, r + 0.5])

    left = int(np.argmin(cols))
    right = int(np.argmax(cols == cols.max()))
    return {
        "left": center(rows[left], cols[left]),
        "right": center(rows[right], cols[right]),
        "top": center(rows[0], cols[0]),
    }


def ear_boundary_row(
    mesh: HeadMesh,
    model: MorphableModel,
    camera: PerspectiveCamera,
    alignment: SimilarityTransform,
) -> float | None:
    """Mean image row of the projected ear-level anchors, or None if hidden."""
    ids = model.ear_anchor_ids()
    if not ids:
        return None
    pts = alignment.apply(mesh.vertices[[model.landmark_table[k] for k in ids]])
    uv, depth = project_points(camera, pts)
    if np.any(depth < DEPTH_EPS):
        return None
    return float(uv[:, 1].mean())


def extract_scalp_features(
    mesh: HeadMesh,
    model: MorphableModel,
    mask: SilhouetteMask,
    camera: PerspectiveCamera,
    alignment: SimilarityTransform,
) -> list[ScalpCorrespondence]:
    """Pair model scalp extrema with silhouette extrema for one frame.

    Only directions recovered on both sides yield a correspondence, so a frame
    contributes at most three. A hidden ear anchor or an empty upper
    silhouette yields none.
    """
    boundary = ear_boundary_row(mesh, model, camera, alignment)
    if boundary is None:
        return []
    model_side = model_scalp_extrema(mesh, model.top_region, camera, alignment)
    pixel_side = silhouette_scalp_extrema(mask, boundary)
    out = []
    for direction in SCALP_DIRECTIONS:
        if direction in model_side and direction in pixel_side:
            out.append(
                ScalpCorrespondence(
                    frame_id=mask.frame_id,
                    direction=direction,
                    vertex_index=model_side[direction],
                    pixel=pixel_side[direction],
                )
            )
    return out
