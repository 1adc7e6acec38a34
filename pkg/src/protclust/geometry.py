"""Rotation-invariant geometry: neighbor search, chain frames, pair features.

Pair features never expose raw coordinates. Each ordered pair (n, k) is
described by a Gaussian radial lift of the distance, the direction to k
expressed in n's local chain frame, the relative frame rotation as a
sign-canonical quaternion, and the sequence offset scaled by chain length.
Rigidly moving the whole chain leaves all of it unchanged up to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError

DIST_BINS = 16
ENCODING_DIM = DIST_BINS + 3 + 4 + 1  # 24
DEFAULT_NEIGHBOR_CAP = 64
FRAME_EPS = 1e-8


@dataclass
class NeighborLists:
    """Per-node neighbor ids within a radius, each list sorted by (distance, id)."""

    lists: list
    radius: float
    cap: int

    def pair_arrays(self):
        """Flatten to (centers, neighbors, self_position) index arrays.

        self_position[n] is the flat index of node n's self pair, which always
        exists because a node is within any positive radius of itself.
        """
        centers = np.concatenate([np.full(len(l), n, dtype=np.int64)
                                  for n, l in enumerate(self.lists)])
        neighbors = np.concatenate([np.asarray(l, dtype=np.int64) for l in self.lists])
        offsets = np.cumsum([0] + [len(l) for l in self.lists[:-1]])
        self_pos = np.empty(len(self.lists), dtype=np.int64)
        for n, l in enumerate(self.lists):
            self_pos[n] = offsets[n] + int(np.nonzero(np.asarray(l) == n)[0][0])
        return centers, neighbors, self_pos


def radius_neighbors(coords: np.ndarray, radius: float, cap: int = DEFAULT_NEIGHBOR_CAP) -> NeighborLists:
    """All nodes within `radius` of each node, via a uniform hash grid.

    Cell edge equals the radius, so candidates live in the 27 surrounding
    cells. Each list is sorted by ascending distance with index as tiebreak,
    truncated to `cap` entries; the node itself is always kept.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"radius_neighbors: coords must be (N, 3), got {coords.shape}")
    if not np.isfinite(radius) or radius <= 0.0:
        raise NumericalError(f"radius_neighbors: radius must be positive, got {radius}")
    n = coords.shape[0]

    cells_of = np.floor(coords / radius).astype(np.int64)
    grid: dict = {}
    for i in range(n):
        grid.setdefault(tuple(cells_of[i]), []).append(i)

    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    lists = []
    for i in range(n):
        cx, cy, cz = cells_of[i]
        cand = []
        for dx, dy, dz in offsets:
            cand.extend(grid.get((cx + dx, cy + dy, cz + dz), ()))
        cand = np.asarray(cand, dtype=np.int64)
        d = np.linalg.norm(coords[cand] - coords[i], axis=1)
        within = d <= radius
        cand, d = cand[within], d[within]
        order = np.lexsort((cand, d))
        kept = cand[order]
        if kept.shape[0] > cap:
            kept = kept[:cap].copy()
            if i not in kept:
                kept[-1] = i  # self always survives the cap
        lists.append(kept)
    return NeighborLists(lists=lists, radius=float(radius), cap=cap)


def adjacency_from_lists(nbrs: NeighborLists) -> np.ndarray:
    """Dense symmetric 0/1 adjacency from neighbor lists, self loops included."""
    n = len(nbrs.lists)
    a = np.zeros((n, n), dtype=np.float64)
    for i, l in enumerate(nbrs.lists):
        a[i, l] = 1.0
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 1.0)
    return a


@dataclass
class LocalFrames:
    """Per-node orthonormal frames along the chain.

    rotations[n] has columns (b, j, b x j) built from the two bond directions
    meeting at node n. Terminal nodes and degenerate geometry (repeated
    points, collinear bonds) get the identity with valid = False.
    """

    rotations: np.ndarray  # (N, 3, 3)
    valid: np.ndarray      # (N,) bool


def local_frames(coords: np.ndarray, seq_index=None) -> LocalFrames:
    """Frames from consecutive chain steps; row order is chain order.

    seq_index is accepted for interface symmetry but not consulted: adjacency
    in the array is what defines the bonds.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"local_frames: coords must be (N, 3), got {coords.shape}")
    n = coords.shape[0]
    rotations = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    valid = np.zeros(n, dtype=bool)
    if n < 3:
        return LocalFrames(rotations, valid)

    steps = coords[1:] - coords[:-1]            # steps[i] = z_{i+1} - z_i
    step_norm = np.linalg.norm(steps, axis=1)
    safe = np.where(step_norm > FRAME_EPS, step_norm, 1.0)
    u = steps / safe[:, None]                   # u[i] points into node i+1

    # node i (1..n-2) uses incoming u[i-1] and outgoing u[i]
    uin, uout = u[:-1], u[1:]
    b = uin - uout
    j = np.cross(uin, uout)
    bn = np.linalg.norm(b, axis=1)
    jn = np.linalg.norm(j, axis=1)
    ok = (step_norm[:-1] > FRAME_EPS) & (step_norm[1:] > FRAME_EPS) \
        & (bn > FRAME_EPS) & (jn > FRAME_EPS)
    b = b / np.where(bn > FRAME_EPS, bn, 1.0)[:, None]
    j = j / np.where(jn > FRAME_EPS, jn, 1.0)[:, None]
    frames = np.stack([b, j, np.cross(b, j)], axis=2)  # columns b, j, b x j
    idx = np.nonzero(ok)[0] + 1
    rotations[idx] = frames[ok]
    valid[idx] = True
    return LocalFrames(rotations, valid)


def quat_from_rotation(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a proper rotation matrix.

    Raises NumericalError when the input is not orthonormal with determinant
    +1 to within 1e-4.
    """
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ShapeError(f"quat_from_rotation: need (3, 3), got {rot.shape}")
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-4 or abs(np.linalg.det(rot) - 1.0) > 1e-4:
        raise NumericalError("quat_from_rotation: input is not a rotation matrix")
    return quats_from_rotations(rot[None])[0]


def quats_from_rotations(rots: np.ndarray) -> np.ndarray:
    """Vectorized rotation-to-quaternion, sign-canonicalized (w >= 0)."""
    r = np.asarray(rots, dtype=np.float64)
    m00, m01, m02 = r[:, 0, 0], r[:, 0, 1], r[:, 0, 2]
    m10, m11, m12 = r[:, 1, 0], r[:, 1, 1], r[:, 1, 2]
    m20, m21, m22 = r[:, 2, 0], r[:, 2, 1], r[:, 2, 2]
    tr = m00 + m11 + m22

    # four Shepperd branches evaluated everywhere, selected per row
    sw = np.sqrt(np.maximum(1.0 + tr, 0.0)) * 2.0
    qw = np.stack([0.25 * sw,
                   np.divide(m21 - m12, sw, out=np.zeros_like(sw), where=sw > 0),
                   np.divide(m02 - m20, sw, out=np.zeros_like(sw), where=sw > 0),
                   np.divide(m10 - m01, sw, out=np.zeros_like(sw), where=sw > 0)], axis=1)
    sx = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0)) * 2.0
    qx = np.stack([np.divide(m21 - m12, sx, out=np.zeros_like(sx), where=sx > 0),
                   0.25 * sx,
                   np.divide(m01 + m10, sx, out=np.zeros_like(sx), where=sx > 0),
                   np.divide(m02 + m20, sx, out=np.zeros_like(sx), where=sx > 0)], axis=1)
    sy = np.sqrt(np.maximum(1.0 - m00 + m11 - m22, 0.0)) * 2.0
    qy = np.stack([np.divide(m02 - m20, sy, out=np.zeros_like(sy), where=sy > 0),
                   np.divide(m01 + m10, sy, out=np.zeros_like(sy), where=sy > 0),
                   0.25 * sy,
                   np.divide(m12 + m21, sy, out=np.zeros_like(sy), where=sy > 0)], axis=1)
    sz = np.sqrt(np.maximum(1.0 - m00 - m11 + m22, 0.0)) * 2.0
    qz = np.stack([np.divide(m10 - m01, sz, out=np.zeros_like(sz), where=sz > 0),
                   np.divide(m02 + m20, sz, out=np.zeros_like(sz), where=sz > 0),
                   np.divide(m12 + m21, sz, out=np.zeros_like(sz), where=sz > 0),
                   0.25 * sz], axis=1)

    # pick the numerically largest pivot per row
    use_tr = tr > 0.0
    x_big = (m00 >= m11) & (m00 >= m22)
    y_big = m11 >= m22
    q = np.where(use_tr[:, None], qw,
                 np.where(x_big[:, None], qx, np.where(y_big[:, None], qy, qz)))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    flip = q[:, 0] < 0.0
    q[flip] = -q[flip]
    return q


@dataclass
class PairEncoding:
    """One ordered pair's invariant features plus the raw pieces they came from."""

    features: np.ndarray       # (ENCODING_DIM,)
    dist: float
    rel_vec: np.ndarray        # k - n offset in the center's frame
    quat: np.ndarray           # relative frame rotation (w, x, y, z)
    rel_seq: float


def rbf_lift(d: np.ndarray, radius: float) -> np.ndarray:
    """Gaussian bins over [0, radius]; width equals the center spacing."""
    centers = np.linspace(0.0, radius, DIST_BINS)
    sigma = radius / (DIST_BINS - 1)
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-0.5 * ((d[..., None] - centers) / sigma) ** 2)


def pair_encoding_batch(frames: LocalFrames, coords: np.ndarray, seq_index: np.ndarray,
                        centers: np.ndarray, neighbors: np.ndarray,
                        radius: float, chain_len: int) -> np.ndarray:
    """(P, ENCODING_DIM) features for ordered pairs (centers[p], neighbors[p]).

    coords/seq_index/frames are indexed by the same node ids the pair arrays
    use. Direction is zeroed for self pairs and for centers without a valid
    frame; the relative quaternion falls back to identity when either frame
    is invalid.
    """
    pn = np.asarray(centers, dtype=np.int64)
    pk = np.asarray(neighbors, dtype=np.int64)
    delta = coords[pk] - coords[pn]
    d = np.linalg.norm(delta, axis=1)

    lift = rbf_lift(d, radius)

    nonzero = d > FRAME_EPS
    unit = np.zeros_like(delta)
    unit[nonzero] = delta[nonzero] / d[nonzero, None]
    rot_n = frames.rotations[pn]
    # O_n^T u, i.e. the offset direction in the center's frame
    direction = np.einsum("pji,pj->pi", rot_n, unit)
    usable = nonzero & frames.valid[pn]
    direction[~usable] = 0.0

    rel = np.einsum("pji,pjk->pik", rot_n, frames.rotations[pk])  # O_n^T O_k
    quats = quats_from_rotations(rel)
    both = frames.valid[pn] & frames.valid[pk]
    quats[~both] = np.array([1.0, 0.0, 0.0, 0.0])

    rel_seq = (seq_index[pk] - seq_index[pn]).astype(np.float64) / float(chain_len)

    return np.concatenate([lift, direction, quats, rel_seq[:, None]], axis=1)


def pair_encoding(frames: LocalFrames, coords: np.ndarray, seq_index: np.ndarray,
                  n: int, k: int, radius: float, chain_len: int) -> PairEncoding:
    """Single-pair convenience wrapper around pair_encoding_batch."""
    feats = pair_encoding_batch(frames, coords, seq_index,
                                np.array([n]), np.array([k]), radius, chain_len)[0]
    delta = coords[k] - coords[n]
    return PairEncoding(
        features=feats,
        dist=float(np.linalg.norm(delta)),
        rel_vec=frames.rotations[n].T @ delta,
        quat=feats[DIST_BINS + 3:DIST_BINS + 7].copy(),
        rel_seq=float(feats[-1]),
    )
