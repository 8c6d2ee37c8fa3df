"""Statistical head shape model: mean shape plus linear deformation basis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

# Coefficient vectors are plain float64 arrays of length n_components.
ShapeParams = np.ndarray


@dataclass
class HeadMesh:
    """Triangle mesh with vertices in model or world units."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise InvalidInputError("triangle indices out of vertex range")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)


def _as_index_array(indices, n_vertices: int, what: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_vertices):
        raise InvalidInputError(f"{what}: vertex index out of range 0..{n_vertices - 1}")
    if len(np.unique(idx)) != len(idx):
        raise InvalidInputError(f"{what}: duplicate vertex indices")
    return idx


@dataclass
class MorphableModel:
    """PCA-style shape model.

    Attributes:
        mean_shape: flattened mean vertices, length 3V, vertex-major
            (x0, y0, z0, x1, ...).
        components: deformation basis, shape (3V, n_components).
        eigenvalues: per-component variances, positive, sorted descending.
        landmark_table: keypoint id -> vertex index. Contains facial landmarks
            and named scalp anchors; an id is facial iff its vertex lies in
            ``face_region``, and ids starting with "ear" mark the ear-level
            anchors used for silhouette splitting.
        top_region: vertex indices of the scalp region (head above the ears).
        face_region: vertex indices of the face.
        triangles: (T, 3) vertex indices.
    """

    mean_shape: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    landmark_table: dict[str, int]
    top_region: np.ndarray
    face_region: np.ndarray
    triangles: np.ndarray
    name: str = field(default="unnamed")

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        if self.mean_shape.size == 0 or self.mean_shape.size % 3:
            raise InvalidInputError(
                f"mean_shape length must be a positive multiple of 3, got {self.mean_shape.size}"
            )
        v = self.num_vertices
        self.components = np.asarray(self.components, dtype=np.float64)
        if self.components.ndim != 2 or self.components.shape[0] != 3 * v:
            raise InvalidInputError(
                f"components must be (3V, n), got {self.components.shape} for V={v}"
            )
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if self.eigenvalues.shape[0] != self.num_components:
            raise InvalidInputError(
                f"eigenvalue count {self.eigenvalues.shape[0]} != component count "
                f"{self.num_components}"
            )
        if self.num_components == 0:
            raise InvalidInputError("model needs at least one component")
        if not np.all(self.eigenvalues > 0.0):
            raise InvalidInputError("eigenvalues must all be positive")
        if np.any(np.diff(self.eigenvalues) > 0.0):
            raise InvalidInputError("eigenvalues must be sorted in descending order")
        if not isinstance(self.landmark_table, dict) or not self.landmark_table:
            raise InvalidInputError("landmark_table must be a non-empty id -> vertex dict")
        for kid, vi in self.landmark_table.items():
            if not isinstance(kid, str) or not kid:
                raise InvalidInputError("landmark ids must be non-empty strings")
            if not 0 <= int(vi) < v:
                raise InvalidInputError(f"landmark {kid!r}: vertex index {vi} out of range")
        if len(set(self.landmark_table.values())) != len(self.landmark_table):
            raise InvalidInputError("landmark_table maps two ids to the same vertex")
        self.top_region = _as_index_array(self.top_region, v, "top_region")
        self.face_region = _as_index_array(self.face_region, v, "face_region")
        if self.top_region.size == 0:
            raise InvalidInputError("top_region must not be empty")
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= v
        ):
            raise InvalidInputError("triangle indices out of vertex range")

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def num_components(self) -> int:
        return self.components.shape[1]

    def facial_landmark_ids(self) -> list[str]:
        """Landmark ids whose vertex lies in the face region, in table order."""
        face = set(self.face_region.tolist())
        return [kid for kid, vi in self.landmark_table.items() if vi in face]

    def ear_anchor_ids(self) -> list[str]:
        return [kid for kid in self.landmark_table if kid.startswith("ear")]


def synthesize(model: MorphableModel, alpha: ShapeParams) -> HeadMesh:
    """Instantiate the mesh for a coefficient vector.

    Vertices are ``mean + components @ alpha`` reshaped to (V, 3); the zero
    vector reproduces the mean shape exactly.
    """
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.shape[0] != model.num_components:
        raise InvalidInputError(
            f"alpha has {alpha.shape[0]} entries, model has {model.num_components} components"
        )
    flat = model.mean_shape + model.components @ alpha
    return HeadMesh(flat.reshape(-1, 3), model.triangles)


def sample_random_shape(
    model: MorphableModel, rng: np.random.Generator, scale: float = 1.0
) -> ShapeParams:
    """Draw coefficients with per-component variance ``scale**2 * eigenvalue``.

    One standard normal is drawn per component in component order, so a given
    generator state always yields the same vector.
    """
    if scale < 0.0:
        raise InvalidInputError(f"scale must be non-negative, got {scale}")
    z = rng.standard_normal(model.num_components)
    return scale * np.sqrt(model.eigenvalues) * z


def shape_distance(model: MorphableModel, alpha_a: ShapeParams, alpha_b: ShapeParams) -> float:
    """Squared Euclidean norm of the stacked vertex difference between two shapes."""
    alpha_a = np.asarray(alpha_a, dtype=np.float64).reshape(-1)
    alpha_b = np.asarray(alpha_b, dtype=np.float64).reshape(-1)
    if alpha_a.shape != alpha_b.shape or alpha_a.shape[0] != model.num_components:
        raise InvalidInputError("coefficient vectors must both match the model size")
    d = model.components @ (alpha_a - alpha_b)
    return float(d @ d)


def param_cosine_similarity(alpha_a: ShapeParams, alpha_b: ShapeParams) -> float:
    """Cosine of the angle between two coefficient vectors."""
    a = np.asarray(alpha_a, dtype=np.float64).reshape(-1)
    b = np.asarray(alpha_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InvalidInputError(f"coefficient vectors differ in length: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidInputError("cosine similarity undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def landmark_positions(model: MorphableModel, mesh: HeadMesh, ids) -> np.ndarray:
    """Stack the mesh positions of the given landmark ids, (len(ids), 3)."""
    try:
        rows = [model.landmark_table[kid] for kid in ids]
    except KeyError as exc:
        raise InvalidInputError(f"unknown landmark id {exc.args[0]!r}") from exc
    return mesh.vertices[rows]


def model_head_width(model: MorphableModel, mesh: HeadMesh | None = None) -> float:
    """Distance between the left-most and right-most top-region vertices."""
    verts = (mesh.vertices if mesh is not None else synthesize(
        model, np.zeros(model.num_components)).vertices)
    top = verts[model.top_region]
    left = top[np.argmin(top[:, 0])]
    right = top[np.argmax(top[:, 0])]
    return float(np.linalg.norm(right - left))
