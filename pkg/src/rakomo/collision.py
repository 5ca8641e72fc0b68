"""Convex proximity queries: GJK distance, EPA penetration depth, witness points.

All primitives are handled as a convex core plus an inflation radius (the
sphere-swept convention), so smooth signed distances come out of a single
point/segment/box/hull support machinery.
"""

from dataclasses import dataclass, replace
from itertools import combinations
from typing import Optional

import numpy as np

from .kinematics import Configuration, KinematicModel, _arm_chain, fk_frame, point_jacobian

GJK_MAX_ITER = 128
GJK_TOL = 1e-9
EPA_TOL = 1e-6
EPA_MAX_ITER = 256


class GjkError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvexShape:
    """Convex primitive with a world pose and an inflation (swept) radius.

    kind-specific parameters: sphere -> radius; capsule -> radius +
    half_length (segment along local z); box -> half_extents; hull ->
    vertices (n, 3) in local frame.
    """

    kind: str
    pose: np.ndarray = None  # 4x4 world transform
    radius: float = 0.0
    half_length: float = 0.0
    half_extents: np.ndarray = None
    vertices: np.ndarray = None
    swept_radius: float = 0.0

    def __post_init__(self):
        if self.pose is None:
            object.__setattr__(self, "pose", np.eye(4))
        else:
            object.__setattr__(self, "pose", np.asarray(self.pose, dtype=float))
        if self.swept_radius < 0:
            raise ValueError("swept_radius must be non-negative")
        if self.kind == "sphere":
            if self.radius <= 0:
                raise ValueError("sphere radius must be positive")
        elif self.kind == "capsule":
            if self.radius <= 0 or self.half_length <= 0:
                raise ValueError("capsule radius and half_length must be positive")
        elif self.kind == "box":
            he = np.asarray(self.half_extents, dtype=float)
            object.__setattr__(self, "half_extents", he)
            if np.any(he <= 0):
                raise ValueError("box half extents must be positive")
        elif self.kind == "hull":
            v = np.asarray(self.vertices, dtype=float)
            object.__setattr__(self, "vertices", v)
            if len(v) < 4 or np.linalg.matrix_rank(v - v.mean(axis=0)) < 3:
                raise ValueError("hull needs at least 4 non-coplanar vertices")
        else:
            raise ValueError(f"unknown shape kind {self.kind!r}")

    @property
    def core_radius(self) -> float:
        """Inflation applied on top of the core support set."""
        base = self.radius if self.kind in ("sphere", "capsule") else 0.0
        return base + self.swept_radius

    def at_pose(self, pose: np.ndarray) -> "ConvexShape":
        return replace(self, pose=np.asarray(pose, dtype=float))


@dataclass(frozen=True)
class ProximityResult:
    distance: float  # negative = penetration depth
    witness_a: np.ndarray
    witness_b: np.ndarray
    normal: np.ndarray  # unit, from a to b


def _core_support(shape: ConvexShape, d_world: np.ndarray) -> np.ndarray:
    """Farthest core point along d_world (no inflation)."""
    R = shape.pose[:3, :3]
    t = shape.pose[:3, 3]
    dl = R.T @ d_world
    if shape.kind == "sphere":
        p = np.zeros(3)
    elif shape.kind == "capsule":
        p = np.array([0.0, 0.0, np.copysign(shape.half_length, dl[2])])
    elif shape.kind == "box":
        p = np.where(dl >= 0, shape.half_extents, -shape.half_extents)
    else:  # hull
        p = shape.vertices[np.argmax(shape.vertices @ dl)]
    return R @ p + t


def support(shape: ConvexShape, direction) -> np.ndarray:
    """Farthest point of the inflated shape along direction."""
    d = np.asarray(direction, dtype=float)
    nd = np.linalg.norm(d)
    if nd < 1e-15:
        raise ValueError("support direction must be non-zero")
    d = d / nd
    return _core_support(shape, d) + shape.core_radius * d


def _closest_on_simplex(pts: np.ndarray, must_include=None):
    """Min-norm point of the convex hull of <= 4 points.

    Returns (closest point, barycentric weights, kept index tuple); enumerates
    facial subsets, which is cheap and robust at this size. must_include
    restricts the search to subsets containing that vertex (in GJK the optimum
    always involves the newest support point).
    """
    n = len(pts)
    best = None
    for k in range(1, n + 1):
        for idx in combinations(range(n), k):
            if must_include is not None and must_include not in idx:
                continue
            P = pts[list(idx)]
            if k == 1:
                lam = np.array([1.0])
            else:
                G = P @ P.T
                A = np.zeros((k + 1, k + 1))
                A[:k, :k] = 2.0 * G
                A[:k, k] = 1.0
                A[k, :k] = 1.0
                rhs = np.zeros(k + 1)
                rhs[k] = 1.0
                try:
                    sol = np.linalg.solve(A, rhs)
                except np.linalg.LinAlgError:
                    continue
                lam = sol[:k]
                if np.any(lam < -1e-10):
                    continue
                lam = np.clip(lam, 0.0, None)
                s = lam.sum()
                if s <= 0:
                    continue
                lam = lam / s
            v = lam @ P
            nv = v @ v
            if best is None or nv < best[0] - 1e-18:
                best = (nv, v, lam, idx)
    _, v, lam, idx = best
    return v, lam, idx


def _minkowski_support(a: ConvexShape, b: ConvexShape, d: np.ndarray):
    """Support of core(A) - core(B) along d, with the contributing points."""
    pa = _core_support(a, d)
    pb = _core_support(b, -d)
    return pa - pb, pa, pb


def _gjk_core(a: ConvexShape, b: ConvexShape):
    """GJK on the shape cores.

    Returns (dist, wa, wb, simplex arrays) with dist 0 when the cores overlap;
    simplex arrays are the terminal (M, A, B) point lists.
    """
    d0 = b.pose[:3, 3] - a.pose[:3, 3]
    if np.linalg.norm(d0) < 1e-12:
        d0 = np.array([1.0, 0.0, 0.0])
    m0, pa0, pb0 = _minkowski_support(a, b, d0)
    M = [m0]
    PA = [pa0]
    PB = [pb0]
    for it in range(GJK_MAX_ITER):
        newest = len(M) - 1 if it > 0 else None
        v, lam, idx = _closest_on_simplex(np.array(M), must_include=newest)
        M = [M[i] for i in idx]
        PA = [PA[i] for i in idx]
        PB = [PB[i] for i in idx]
        nv = np.linalg.norm(v)
        if nv < 1e-12 or len(M) == 4:
            return 0.0, None, None, (M, PA, PB)
        d = -v / nv
        w, pa, pb = _minkowski_support(a, b, d)
        # upper bound |v| minus the support-plane lower bound (v@w)/|v|;
        # also stop on repeated support points (no further progress possible)
        gap = nv - (v @ w) / nv
        duplicate = any(np.linalg.norm(w - m) < 1e-14 for m in M)
        if gap <= GJK_TOL * max(1.0, nv) or duplicate:
            wa = np.einsum("i,ij->j", lam, np.array(PA))
            wb = np.einsum("i,ij->j", lam, np.array(PB))
            return nv, wa, wb, (M, PA, PB)
        M.append(w)
        PA.append(pa)
        PB.append(pb)
    raise GjkError(
        f"GJK failed to converge after {GJK_MAX_ITER} iterations "
        f"(kinds {a.kind}/{b.kind}); shapes may be ill-conditioned"
    )


def gjk_distance(a: ConvexShape, b: ConvexShape) -> ProximityResult:
    """Signed distance with witness points; non-penetrating cores required.

    When the inflated shapes overlap but the cores do not, the (negative)
    depth is still returned here; use epa_penetration for overlapping cores.
    """
    dist, wa, wb, _ = _gjk_core(a, b)
    if dist == 0.0:
        return epa_penetration(a, b)
    n = (wb - wa) / dist
    signed = dist - a.core_radius - b.core_radius
    return ProximityResult(
        distance=float(signed),
        witness_a=wa + a.core_radius * n,
        witness_b=wb - b.core_radius * n,
        normal=n,
    )


def _initial_tetrahedron(a: ConvexShape, b: ConvexShape, simplex):
    M, PA, PB = [list(x) for x in simplex]
    dirs = np.array(
        [
            [1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [0, 0, 1.0], [0, 0, -1.0],
            [1, 1, 1], [-1, -1, 1], [-1, 1, -1], [1, -1, -1],
        ],
        dtype=float,
    )
    for d in dirs:
        if len(M) >= 4 and abs(np.linalg.det(np.array(M[1:4]) - M[0])) > 1e-12:
            break
        w, pa, pb = _minkowski_support(a, b, d / np.linalg.norm(d))
        if all(np.linalg.norm(w - m) > 1e-12 for m in M):
            M.append(w)
            PA.append(pa)
            PB.append(pb)
    # keep any 4 affinely independent points
    for idx in combinations(range(len(M)), 4):
        P = np.array([M[i] for i in idx])
        if abs(np.linalg.det(P[1:] - P[0])) > 1e-12:
            return [M[i] for i in idx], [PA[i] for i in idx], [PB[i] for i in idx]
    raise GjkError("cannot build initial polytope (degenerate shape pair)")


def epa_penetration(a: ConvexShape, b: ConvexShape) -> ProximityResult:
    """Penetration depth (returned as negative distance) for overlapping shapes."""
    core_dist, wa, wb, simplex = _gjk_core(a, b)
    inflate = a.core_radius + b.core_radius
    if core_dist > 0.0:
        if core_dist - inflate >= 0.0:
            raise ValueError("epa_penetration called on non-overlapping shapes")
        n = (wb - wa) / core_dist
        return ProximityResult(
            distance=float(core_dist - inflate),
            witness_a=wa + a.core_radius * n,
            witness_b=wb - b.core_radius * n,
            normal=n,
        )

    try:
        M, PA, PB = _initial_tetrahedron(a, b, simplex)
    except GjkError:
        # flat or point-like Minkowski core (e.g. crossing segments, coincident
        # sphere centers): zero core depth, separate along the degenerate normal
        Ms, PAs, PBs = simplex
        arr = np.array(Ms)
        _, lam, idx = _closest_on_simplex(arr)
        wa = np.einsum("i,ij->j", lam, np.array([PAs[i] for i in idx]))
        wb = np.einsum("i,ij->j", lam, np.array([PBs[i] for i in idx]))
        if len(arr) >= 2:
            _, _, vt = np.linalg.svd(arr - arr.mean(axis=0))
            n = vt[-1]
        else:
            n = np.array([1.0, 0.0, 0.0])
        centers = b.pose[:3, 3] - a.pose[:3, 3]
        if n @ centers < 0:
            n = -n
        return ProximityResult(
            distance=float(-inflate),
            witness_a=wa + a.core_radius * n,
            witness_b=wb - b.core_radius * n,
            normal=n,
        )
    V = np.array(M)
    A_pts = list(PA)
    B_pts = list(PB)
    verts = list(M)
    centroid = V.mean(axis=0)

    def make_face(i, j, k):
        p1, p2, p3 = verts[i], verts[j], verts[k]
        n = np.cross(p2 - p1, p3 - p1)
        ln = np.linalg.norm(n)
        if ln < 1e-15:
            return None
        n = n / ln
        if n @ (p1 - centroid) < 0:
            n = -n
            i, j, k = i, k, j
        return [i, j, k, n, n @ p1]  # outward normal, plane offset

    faces = []
    for tri in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        f = make_face(*tri)
        if f is None:
            raise GjkError("degenerate initial polytope in EPA")
        faces.append(f)

    for _ in range(EPA_MAX_ITER):
        # closest face to the origin (offsets can be slightly negative near touch)
        fi = min(range(len(faces)), key=lambda i: faces[i][4])
        i, j, k, n, off = faces[fi]
        w, pa, pb = _minkowski_support(a, b, n)
        growth = n @ w - off
        if growth < EPA_TOL:
            # project origin on the face for witness barycentrics
            P = np.array([verts[i], verts[j], verts[k]])
            _, lam, idx = _closest_on_simplex(P)
            ids = [(i, j, k)[t] for t in idx]
            wa = np.einsum("i,ij->j", lam, np.array([A_pts[t] for t in ids]))
            wb = np.einsum("i,ij->j", lam, np.array([B_pts[t] for t in ids]))
            depth = max(off, 0.0) + inflate
            # n is the outward Minkowski face normal: moving b along +n
            # increases the signed distance
            return ProximityResult(
                distance=float(-depth),
                witness_a=wa + a.core_radius * n,
                witness_b=wb - b.core_radius * n,
                normal=n,
            )
        verts.append(w)
        A_pts.append(pa)
        B_pts.append(pb)
        wi = len(verts) - 1
        # remove faces visible from w, collect horizon edges
        visible = [f for f in faces if f[3] @ (w - verts[f[0]]) > 1e-12]
        if not visible:
            faces[fi][4] = n @ w  # numerical stall guard
            continue
        edges = {}
        for f in visible:
            faces.remove(f)
            for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = tuple(sorted(e))
                edges[key] = edges.pop(key, 0) + 1
        for (p, q), cnt in edges.items():
            if cnt == 1:
                nf = make_face(p, q, wi)
                if nf is not None:
                    faces.append(nf)
        if not faces:
            raise GjkError("EPA polytope collapsed")
    raise GjkError(f"EPA failed to converge after {EPA_MAX_ITER} iterations")


def signed_distance(a: ConvexShape, b: ConvexShape) -> ProximityResult:
    """One scalar per pair: positive separation or negative penetration depth."""
    res = gjk_distance(a, b)
    return res


# --- model-level queries --------------------------------------------------

def world_bodies(model: KinematicModel, q: Configuration, chain=None):
    """Robot collision bodies posed in the world: list of (link, shape)."""
    if chain is None:
        chain = _arm_chain(model, q)
    frames = chain[0]
    base_T = None
    out = []
    for link, shape in model.collision_bodies:
        if link == "base":
            if base_T is None:
                base_T = fk_frame(model, q, "base")
            T = base_T
        elif link == "ee":
            T = frames[-1] @ model.ee_offset
        elif link.startswith("arm_"):
            T = frames[int(link[4:]) - 1]
        else:
            T = fk_frame(model, q, link)
        out.append((link, shape.at_pose(T @ shape.pose)))
    return out


def default_pairs(model: KinematicModel, obstacles):
    """All robot-obstacle pairs plus non-adjacent robot self pairs."""
    n_rob = len(model.collision_bodies)
    links = [link for link, _ in model.collision_bodies]
    order = {"base": 0}
    for i in range(model.n_arm):
        order[f"arm_{i + 1}"] = i + 1
    order["ee"] = model.n_arm + 1

    def adjacent(la, lb):
        oa = order.get(la)
        ob = order.get(lb)
        if oa is None or ob is None:  # attached object: adjacent to its parent chain end
            return True
        return abs(oa - ob) <= 1

    pairs = []
    for i in range(n_rob):
        for j in range(i + 1, n_rob):
            if links[i] == links[j] or adjacent(links[i], links[j]):
                continue
            if frozenset((links[i], links[j])) in model.exclude_pairs:
                continue
            pairs.append((i, j))
    for i in range(n_rob):
        for j in range(len(obstacles)):
            pairs.append((i, n_rob + j))
    return pairs


def bounding_radius(shape: ConvexShape) -> float:
    """Radius of a center-ball certainly containing the inflated shape."""
    if shape.kind == "sphere":
        core = 0.0
    elif shape.kind == "capsule":
        core = shape.half_length
    elif shape.kind == "box":
        core = float(np.linalg.norm(shape.half_extents))
    else:
        core = float(np.max(np.linalg.norm(shape.vertices, axis=1)))
    return core + shape.core_radius


def pairwise_distances(
    model: KinematicModel,
    q: Configuration,
    obstacles,
    pairs=None,
    far_threshold: float = None,
):
    """Signed distance and configuration-space gradient for each body pair.

    Returns a list of ((i, j), ProximityResult, ddist_dq). Indices address the
    concatenation of robot collision bodies and obstacles. With far_threshold
    set, pairs whose bounding spheres are separated by more than it are
    reported with that certain lower bound and a zero gradient (cheap
    broad-phase reject; such a pair cannot activate a proximity constraint).
    """
    chain = _arm_chain(model, q)
    robot = world_bodies(model, q, chain=chain)
    all_bodies = [s for _, s in robot] + list(obstacles)
    links = [link for link, _ in robot] + [None] * len(obstacles)
    if pairs is None:
        pairs = default_pairs(model, obstacles)
    out = []
    for (i, j) in pairs:
        sa, sb = all_bodies[i], all_bodies[j]
        if far_threshold is not None:
            gap = (
                np.linalg.norm(sb.pose[:3, 3] - sa.pose[:3, 3])
                - bounding_radius(sa)
                - bounding_radius(sb)
            )
            if gap > far_threshold:
                n = (sb.pose[:3, 3] - sa.pose[:3, 3])
                n = n / np.linalg.norm(n)
                res = ProximityResult(gap, sa.pose[:3, 3], sb.pose[:3, 3], n)
                out.append(((i, j), res, np.zeros(model.dim)))
                continue
        res = gjk_distance(sa, sb)
        grad = np.zeros(model.dim)
        if links[j] is not None:
            grad += res.normal @ point_jacobian(model, q, links[j], res.witness_b, chain=chain)
        if links[i] is not None:
            grad -= res.normal @ point_jacobian(model, q, links[i], res.witness_a, chain=chain)
        out.append(((i, j), res, grad))
    return out
