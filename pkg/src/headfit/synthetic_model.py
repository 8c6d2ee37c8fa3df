"""Deterministic builder for a synthetic ellipsoid-family head model.

The mean shape is an ellipsoid with a parietal bulge, sampled on a latitude/
longitude grid (canonical units are millimeters, head width 160). The default
twelve-component basis is built from smooth localized radial bumps: five
facial bumps placed on the landmark clusters, then seven scalp bumps (crown,
forehead, parietal pair, occiput, rear pair). Low-order spherical harmonic
bands extend the span for larger component counts.

Candidate fields are constrained before orthonormalization so that the
two-stage fitting problem is well posed:

* every candidate is orthogonal to the global similarity gauge at the mean
  (translations, rotations, uniform scaling) and to the same seven fields
  restricted to the face region, so no coefficient direction can be traded
  against the rigid-plus-scale alignment that is re-estimated from facial
  anchors on every iteration;
* scalp bump candidates additionally vanish at the facial landmark vertices,
  so facial keypoints carry no information about them at all and their
  variance must be recovered from scalp silhouette features.
"""

from __future__ import annotations

import numpy as np
from scipy.special import sph_harm_y

from .errors import InvalidInputError
from .shape_model import MorphableModel

SEMI_AXES = np.array([80.0, 112.0, 96.0])  # x: half-width, y: up, z: facial

# Bump groups in basis candidate order, mixed with harmonic bands below.
# Facial bumps sit on the landmark clusters so the leading components are
# strongly observable from facial keypoints alone; scalp and side bumps stay
# away from the landmarks so their variance is only measurable through the
# silhouette features of the second fitting stage.
_BUMPS_FACIAL = np.array(
    [
        [0.0, 0.0, 1.0],      # nose and mid-face
        [0.0, 0.35, 0.9],     # brow
        [0.0, -0.75, 0.55],   # chin and jaw
        [-0.6, -0.12, 0.76],  # left cheek
        [0.6, -0.12, 0.76],   # right cheek
    ]
)
# Crown and forehead move the top-most silhouette feature directly, so they
# can carry more variance than the occiput, which silhouette extremes only
# see from one side (an outward bulge shifts the extreme, a dent hides).
_BUMPS_SCALP_TOP = np.array(
    [
        [0.0, 1.0, 0.0],     # crown
        [0.0, 0.93, 0.37],   # upper forehead, clear of the brow landmarks
    ]
)
_BUMPS_SIDES = np.array(
    [
        [-0.95, 0.32, 0.0],  # left parietal
        [0.95, 0.32, 0.0],   # right parietal
    ]
)
_BUMPS_OCCIPUT = np.array(
    [
        [0.0, 0.32, -0.95],  # occiput, at the widest band of the cranium
    ]
)
_BUMPS_REAR = np.array(
    [
        [-0.67, 0.32, -0.67],  # left rear diagonal, on the widest band
        [0.67, 0.32, -0.67],   # right rear diagonal
    ]
)
_BUMPS_EXTRA = np.array(
    [
        [0.0, 0.55, -0.84],  # upper back, only used beyond twelve components
    ]
)
# Angular bump widths in radians; facial bumps cover a landmark cluster each,
# scalp bumps stay narrow to concentrate their energy in the cranium.
_WIDTH_FACIAL = 0.45
_WIDTH_SCALP = 0.45
_WIDTH_SIDES = 0.5
_WIDTH_REAR = 0.45

_MAX_SH_ORDER = 6

# landmark id -> direction on the unit head sphere; mapped to nearest vertices.
# Ids are facial iff the vertex lands in the face region; "ear..." ids are the
# ear-level anchors used to split silhouettes.
_LANDMARK_DIRECTIONS = {
    "nose_tip": (0.0, -0.08, 1.0),
    "nose_bridge": (0.0, 0.18, 1.0),
    "chin": (0.0, -0.85, 0.45),
    "eye_outer_l": (-0.48, 0.22, 0.85),
    "eye_inner_l": (-0.18, 0.24, 0.92),
    "eye_inner_r": (0.18, 0.24, 0.92),
    "eye_outer_r": (0.48, 0.22, 0.85),
    "brow_l": (-0.35, 0.42, 0.82),
    "brow_r": (0.35, 0.42, 0.82),
    "mouth_l": (-0.3, -0.42, 0.82),
    "mouth_r": (0.3, -0.42, 0.82),
    "mouth_top": (0.0, -0.33, 0.95),
    "mouth_bottom": (0.0, -0.52, 0.88),
    "cheek_l": (-0.62, -0.12, 0.72),
    "cheek_r": (0.62, -0.12, 0.72),
    "nose_l": (-0.14, -0.1, 0.97),
    "nose_r": (0.14, -0.1, 0.97),
    "eye_center_l": (-0.33, 0.23, 0.89),
    "eye_center_r": (0.33, 0.23, 0.89),
    "temple_l": (-0.62, 0.35, 0.62),
    "temple_r": (0.62, 0.35, 0.62),
    "forehead_mid": (0.0, 0.52, 0.83),
    "philtrum": (0.0, -0.22, 0.99),
    "ear_left": (-1.0, 0.0, 0.0),
    "ear_right": (1.0, 0.0, 0.0),
    "crown": (0.0, 1.0, 0.0),
    "occiput": (0.0, 0.1, -1.0),
    "forehead_top": (0.0, 0.8, 0.6),
}


def _jaw_directions() -> dict[str, tuple[float, float, float]]:
    out = {}
    for k in range(9):
        ang = 1.25 * (k - 4) / 4.0
        out[f"jaw_{k}"] = (
            0.92 * np.sin(ang),
            -0.38 - 0.52 * np.cos(ang),
            0.45 + 0.42 * np.cos(ang),
        )
    return out


def _uv_sphere(lat_rings: int, lon_segments: int):
    """Unit directions and outward-oriented triangles for a pole-capped grid."""
    theta = np.pi * (np.arange(lat_rings) + 1) / (lat_rings + 1)
    phi = 2.0 * np.pi * np.arange(lon_segments) / lon_segments
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ring_dirs = np.stack(
        [np.sin(tt) * np.sin(pp), np.cos(tt), np.sin(tt) * np.cos(pp)], axis=-1
    ).reshape(-1, 3)
    dirs = np.vstack([[0.0, 1.0, 0.0], ring_dirs, [0.0, -1.0, 0.0]])

    def vid(i, j):
        return 1 + i * lon_segments + (j % lon_segments)

    tris = []
    for j in range(lon_segments):
        tris.append((0, vid(0, j), vid(0, j + 1)))
    for i in range(lat_rings - 1):
        for j in range(lon_segments):
            u1, u2 = vid(i, j), vid(i, j + 1)
            l1, l2 = vid(i + 1, j), vid(i + 1, j + 1)
            tris.append((u1, l1, l2))
            tris.append((u1, l2, u2))
    bottom = 1 + lat_rings * lon_segments
    for j in range(lon_segments):
        tris.append((bottom, vid(lat_rings - 1, j + 1), vid(lat_rings - 1, j)))
    return dirs, np.array(tris, dtype=np.int64)


def _sh_band(dirs: np.ndarray, order: int) -> np.ndarray:
    """Real spherical harmonic values of one band, one column per m."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    theta = np.arccos(np.clip(y, -1.0, 1.0))  # polar angle from the +y axis
    phi = np.arctan2(x, z)
    cols = [np.real(sph_harm_y(order, 0, theta, phi))]
    for m in range(1, order + 1):
        ylm = sph_harm_y(order, m, theta, phi)
        cols.append(np.real(ylm))
        cols.append(np.imag(ylm))
    return np.stack(cols, axis=1)


def _bump_profiles(dirs: np.ndarray, centers: np.ndarray, width: float) -> np.ndarray:
    angles = np.arccos(np.clip(dirs @ _normalized(centers).T, -1.0, 1.0))
    return np.exp(-((angles / width) ** 2))


NUM_FACIAL_CANDIDATES = 5
NUM_SCALP_CANDIDATES = 7


def _candidate_scalars(dirs: np.ndarray) -> np.ndarray:
    """Scalar radial profiles in final component order.

    The first twelve candidates carry the default benchmark model: five facial
    bumps, then the seven scalp bumps (crown, forehead, parietal pair,
    occiput, rear pair). All scalp bumps sit on the crown or on the widest
    band of the cranium, the only places the silhouette extremes of orbiting
    cameras ever sample, so every one of them is observable in the second
    fitting stage. Harmonic bands starting
    at l=2 extend the span; l=0 and l=1 mimic scaling and translation, which
    the gauge projection would mostly annihilate anyway.
    """
    groups = [
        _bump_profiles(dirs, _BUMPS_FACIAL, _WIDTH_FACIAL),
        _bump_profiles(dirs, _BUMPS_SCALP_TOP, _WIDTH_SCALP),
        _bump_profiles(dirs, _BUMPS_SIDES, _WIDTH_SIDES),
        _bump_profiles(dirs, _BUMPS_OCCIPUT, _WIDTH_SCALP),
        _bump_profiles(dirs, _BUMPS_REAR, _WIDTH_REAR),
        _sh_band(dirs, 2),
        _sh_band(dirs, 3),
        _bump_profiles(dirs, _BUMPS_EXTRA, _WIDTH_SCALP),
        _sh_band(dirs, 4),
        _sh_band(dirs, 5),
        _sh_band(dirs, 6),
    ]
    return np.concatenate(groups, axis=1)


def _similarity_fields(vertices: np.ndarray) -> np.ndarray:
    """First-order effect of the seven alignment parameters on the vertices.

    Columns are the stacked displacement fields of three translations, three
    rotations and one uniform scaling evaluated at the given shape.
    """
    n = len(vertices)
    fields = []
    for axis in range(3):
        t = np.zeros((n, 3))
        t[:, axis] = 1.0
        fields.append(t)
    for axis in range(3):
        omega = np.zeros(3)
        omega[axis] = 1.0
        fields.append(np.cross(np.broadcast_to(omega, (n, 3)), vertices))
    fields.append(vertices.copy())
    return np.stack([f.reshape(-1) for f in fields], axis=1)


def _gauge_basis(
    vertices: np.ndarray, face_mask: np.ndarray, lm_rows: np.ndarray | None = None
) -> np.ndarray:
    """Orthonormal basis of the directions the alignment stage can absorb.

    Besides the global similarity fields this includes the same seven fields
    restricted to the face region. Deformations whose face-region part looks
    like a rigid motion plus scale are indistinguishable from an alignment
    change once the model is re-registered on facial anchors, so the fitting
    loop could trade shape against pose along them without bound. Projecting
    the candidates against both sets removes that degeneracy.

    With ``lm_rows`` the basis additionally spans the given coordinate axes,
    so projected candidates become exactly zero at those coordinates.
    """
    g_full = _similarity_fields(vertices)
    g_face = g_full.copy()
    off_face = np.repeat(~face_mask, 3)
    g_face[off_face] = 0.0
    cols = [g_full, g_face]
    if lm_rows is not None:
        axes = np.zeros((g_full.shape[0], lm_rows.size))
        axes[lm_rows, np.arange(lm_rows.size)] = 1.0
        cols.append(axes)
    stacked = np.concatenate(cols, axis=1)
    q, r = np.linalg.qr(stacked)
    keep = np.abs(np.diag(r)) > 1e-9 * np.abs(np.diag(r)).max()
    return q[:, keep]


def _normalized(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def max_components(lat_rings: int = 23, lon_segments: int = 32) -> int:
    bumps = (
        len(_BUMPS_FACIAL)
        + len(_BUMPS_SCALP_TOP)
        + len(_BUMPS_SIDES)
        + len(_BUMPS_OCCIPUT)
        + len(_BUMPS_REAR)
        + len(_BUMPS_EXTRA)
    )
    harmonics = sum(2 * order + 1 for order in range(2, _MAX_SH_ORDER + 1))
    return bumps + harmonics


def build_synthetic_head_model(
    num_components: int = 12,
    lat_rings: int = 23,
    lon_segments: int = 32,
    name: str = "synthetic-head",
) -> MorphableModel:
    """Build the synthetic head model; identical inputs give identical output.

    Args:
        num_components: size of the deformation basis, at most
            ``max_components()``.
        lat_rings: latitude rings between the poles; must be odd so one ring
            lies exactly on the equator (ear level).
        lon_segments: vertices per ring; must be divisible by 4 so vertices
            exist exactly left/right/front/back.
    """
    if lat_rings % 2 == 0 or lat_rings < 5:
        raise InvalidInputError("lat_rings must be odd and at least 5")
    if lon_segments % 4 or lon_segments < 8:
        raise InvalidInputError("lon_segments must be a multiple of 4, at least 8")
    limit = max_components(lat_rings, lon_segments)
    if not 1 <= num_components <= limit:
        raise InvalidInputError(f"num_components must be in 1..{limit}")

    dirs, triangles = _uv_sphere(lat_rings, lon_segments)
    vertices = dirs * SEMI_AXES
    # Parietal bulge: real crania are widest above the ear line, not at it.
    # Without this the widest band of the upper head sits exactly on the
    # region boundary and the silhouette extremes stop responding to scalp
    # deformation.
    bulge = 1.0 + 0.18 * np.exp(-(((dirs[:, 1] - 0.32) / 0.28) ** 2))
    vertices[:, 0] *= bulge
    vertices[:, 2] *= bulge

    face_mask = (vertices[:, 2] > 0.28 * SEMI_AXES[2]) & (
        vertices[:, 1] < 0.55 * SEMI_AXES[1]
    )

    directions = dict(_LANDMARK_DIRECTIONS)
    directions.update(_jaw_directions())
    landmark_table = {}
    used = set()
    for kid, direction in directions.items():
        target = _normalized(np.asarray(direction)) * SEMI_AXES
        order = np.argsort(np.linalg.norm(vertices - target, axis=1), kind="stable")
        vi = next(int(i) for i in order if int(i) not in used)
        used.add(vi)
        landmark_table[kid] = vi
    facial_vertices = sorted(
        v for v in landmark_table.values() if face_mask[v]
    )
    lm_rows = (3 * np.asarray(facial_vertices)[:, None] + np.arange(3)).ravel()

    scalars = _candidate_scalars(dirs)
    # displacement of field f at vertex i is scalars[i, f] * dirs[i]
    fields = (scalars[:, None, :] * dirs[:, :, None]).reshape(-1, scalars.shape[1])
    n_fac, n_sca = NUM_FACIAL_CANDIDATES, NUM_SCALP_CANDIDATES
    scalp_block = slice(n_fac, n_fac + n_sca)
    gauge = _gauge_basis(vertices, face_mask)
    gauge_scalp = _gauge_basis(vertices, face_mask, lm_rows)
    fields -= gauge @ (gauge.T @ fields)
    fields[:, scalp_block] -= gauge_scalp @ (gauge_scalp.T @ fields[:, scalp_block])
    # Orthonormalize with the scalp block first so those columns stay inside
    # the span of the landmark-free candidates, then restore component order.
    order = np.concatenate(
        [
            np.arange(n_fac, n_fac + n_sca),
            np.arange(n_fac),
            np.arange(n_fac + n_sca, fields.shape[1]),
        ]
    )
    q, _ = np.linalg.qr(fields[:, order])
    q = q[:, np.argsort(order)]
    # fix QR sign freedom so the basis is reproducible
    lead = np.argmax(np.abs(q), axis=0)
    signs = np.sign(q[lead, np.arange(q.shape[1])])
    components = (q * signs)[:, :num_components]

    # Basis columns are unit-norm over all 3V coordinates, so coefficient
    # variances must be large for visible deformation: the leading component
    # moves a typical vertex by a few millimeters, matching anthropometric
    # head variability.
    eigenvalues = 10000.0 * 0.82 ** np.arange(num_components)

    top_region = np.flatnonzero(vertices[:, 1] >= -1e-9)
    face_region = np.flatnonzero(face_mask)

    return MorphableModel(
        mean_shape=vertices.reshape(-1),
        components=components,
        eigenvalues=eigenvalues,
        landmark_table=landmark_table,
        top_region=top_region,
        face_region=face_region,
        triangles=triangles,
        name=name,
    )
