import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from nodal_lab.fields import FieldFunction
from nodal_lab.geometry import Domain, GridChart

# Kuhn split of the unit cube: one tetrahedron per axis permutation.
_KUHN = np.array(
    [
        [
            [0, 0, 0],
            np.eye(3, dtype=int)[p[0]],
            np.eye(3, dtype=int)[p[0]] + np.eye(3, dtype=int)[p[1]],
            [1, 1, 1],
        ]
        for p in itertools.permutations(range(3))
    ]
)


def _tet_cases() -> dict[int, list[list[tuple[int, int]]]]:
    """Triangles, as triples of tet edges, for each of the 16 sign codes."""
    table = {}
    for code in range(16):
        pos = [v for v in range(4) if code >> v & 1]
        neg = [v for v in range(4) if not code >> v & 1]
        if len(pos) in (0, 4):
            table[code] = []
        elif len(pos) in (1, 3):
            a = pos[0] if len(pos) == 1 else neg[0]
            table[code] = [[(a, o) for o in range(4) if o != a]]
        else:
            a, b = pos
            c, d = neg
            table[code] = [[(a, c), (a, d), (b, d)], [(a, c), (b, d), (b, c)]]
    return table


_TET_CASES = _tet_cases()


@dataclass(frozen=True, eq=False)
class Primitives:
    """
    Raw extraction output: refined crossing points and the segments or
    triangles joining them, plus the crossings of Z with the boundary.
    Boundary cells have one vertex (m=2) or two (m=3, face segments).
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary_vertices: np.ndarray
    boundary_cells: np.ndarray
    boundary_normals: np.ndarray


def refine_flat(
    f: FieldFunction,
    starts: np.ndarray,
    directions: np.ndarray,
    start_positive: np.ndarray,
    steps: int,
) -> np.ndarray:
    """Bisection on start + tau * direction, tau in [0, 1], then one Newton step."""
    if len(starts) == 0:
        return starts.copy()
    lo = np.zeros(len(starts))
    hi = np.ones(len(starts))
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        same = (f.evaluate(starts + mid[:, None] * directions) > 0) == start_positive
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    tau = 0.5 * (lo + hi)
    jet = f.ambient_jet(starts + tau[:, None] * directions)
    slope = np.einsum("nd,nd->n", jet.gradient, directions)
    with np.errstate(divide="ignore", invalid="ignore"):
        newton = tau - jet.value / slope
    ok = np.isfinite(newton) & (newton >= lo) & (newton <= hi)
    tau = np.where(ok, newton, tau)
    return starts + tau[:, None] * directions


def refine_sphere(
    f: FieldFunction,
    a: np.ndarray,
    b: np.ndarray,
    start_positive: np.ndarray,
    steps: int,
) -> np.ndarray:
    """Same as refine_flat along the normalised chord from a to b."""
    if len(a) == 0:
        return a.copy()

    def point(tau):
        x = a + tau[:, None] * (b - a)
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    lo = np.zeros(len(a))
    hi = np.ones(len(a))
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        same = (f.evaluate(point(mid)) > 0) == start_positive
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    tau = 0.5 * (lo + hi)
    x = point(tau)
    chord = a + tau[:, None] * (b - a)
    length = np.linalg.norm(chord, axis=1, keepdims=True)
    velocity = (b - a) - np.sum((b - a) * x, axis=1, keepdims=True) * x
    velocity = velocity / length
    jet = f.ambient_jet(x)
    slope = np.einsum("nd,nd->n", jet.gradient, velocity)
    with np.errstate(divide="ignore", invalid="ignore"):
        newton = tau - jet.value / slope
    ok = np.isfinite(newton) & (newton >= lo) & (newton <= hi)
    return point(np.where(ok, newton, tau))


def _compact(cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Used ids and cells rewritten as indices into them."""
    used, inverse = np.unique(cells, return_inverse=True)
    return used, inverse.reshape(cells.shape)


def march_squares(
    f: FieldFunction,
    positive: np.ndarray,
    axes: tuple[np.ndarray, np.ndarray],
    spacing: tuple[float, float],
    periodic: bool,
    embed: Callable[[np.ndarray, np.ndarray], np.ndarray],
    steps: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Marching squares on a node grid. Edge ids: x-edge (i,j)->(i+1,j) is
    i*n1 + j, y-edge (i,j)->(i,j+1) is N + i*n1 + j. Saddle cells are
    resolved by the sign of f at the exact cell centre.

    Returns the used edge ids, their refined crossing points and the
    segments as pairs of indices into those points.
    """
    n0, n1 = positive.shape
    total = n0 * n1
    nc0, nc1 = (n0, n1) if periodic else (n0 - 1, n1 - 1)
    i, j = np.meshgrid(np.arange(nc0), np.arange(nc1), indexing="ij")
    i, j = i.reshape(-1), j.reshape(-1)
    ip, jp = (i + 1) % n0, (j + 1) % n1
    s0, s1, s2, s3 = positive[i, j], positive[ip, j], positive[ip, jp], positive[i, jp]
    edges = np.stack(
        [i * n1 + j, total + ip * n1 + j, i * n1 + jp, total + i * n1 + j], axis=1
    )
    cross = np.stack([s0 != s1, s1 != s2, s3 != s2, s0 != s3], axis=1)
    count = cross.sum(axis=1)

    segments = []
    two = np.flatnonzero(count == 2)
    if len(two):
        order = np.argsort(~cross[two], axis=1, kind="stable")[:, :2]
        segments.append(np.take_along_axis(edges[two], order, axis=1))
    four = np.flatnonzero(count == 4)
    if len(four):
        centre = embed(
            axes[0][i[four]] + 0.5 * spacing[0], axes[1][j[four]] + 0.5 * spacing[1]
        )
        same = ((f.evaluate(centre) > 0) == s0[four])[:, None]
        e = edges[four]
        segments.append(np.where(same, e[:, [0, 1]], e[:, [3, 0]]))
        segments.append(np.where(same, e[:, [2, 3]], e[:, [1, 2]]))
    if not segments:
        dim = embed(np.zeros(1), np.zeros(1)).shape[-1]
        return (
            np.zeros(0, dtype=np.int64),
            np.zeros((0, dim)),
            np.zeros((0, 2), dtype=np.int64),
        )

    used, cells = _compact(np.concatenate(segments))
    is_y = used >= total
    node = np.where(is_y, used - total, used)
    ei, ej = np.divmod(node, n1)
    u, v = axes[0][ei], axes[1][ej]
    starts = embed(u, v)
    ends = embed(u + np.where(is_y, 0.0, spacing[0]), v + np.where(is_y, spacing[1], 0.0))
    points = refine_flat(f, starts, ends - starts, positive[ei, ej], steps)
    return used, points, cells


def _march_flat_2d(
    f: FieldFunction, domain: Domain, chart: GridChart, values: np.ndarray, steps: int
) -> Primitives:
    positive = values.reshape(chart.shape) > 0

    def embed(u, v):
        return np.stack([u, v], axis=-1)

    used, points, cells = march_squares(
        f, positive, chart.axes, chart.spacing, chart.periodic, embed, steps
    )

    b_index, b_normals = [], []
    if domain.has_boundary and len(used):
        n0, n1 = chart.shape
        total = n0 * n1
        is_y = used >= total
        ei, ej = np.divmod(np.where(is_y, used - total, used), n1)
        sides = [
            (~is_y & (ej == 0), (0.0, -1.0)),
            (~is_y & (ej == n1 - 1), (0.0, 1.0)),
            (is_y & (ei == 0), (-1.0, 0.0)),
            (is_y & (ei == n0 - 1), (1.0, 0.0)),
        ]
        for mask, normal in sides:
            idx = np.flatnonzero(mask)
            b_index.append(idx)
            b_normals.append(np.tile(normal, (len(idx), 1)))

    if b_index:
        b_index = np.concatenate(b_index)
        return Primitives(
            points,
            cells,
            points[b_index],
            np.arange(len(b_index))[:, None],
            np.vstack(b_normals),
        )
    return Primitives(
        points, cells, np.zeros((0, 2)), np.zeros((0, 1), dtype=np.int64), np.zeros((0, 2))
    )


def _march_flat_3d(
    f: FieldFunction, domain: Domain, chart: GridChart, values: np.ndarray, steps: int
) -> Primitives:
    shape = chart.shape
    n0, n1, n2 = shape
    positive = values.reshape(shape) > 0
    flat_positive = positive.reshape(-1)
    n_nodes = n0 * n1 * n2
    nc = shape if chart.periodic else tuple(n - 1 for n in shape)
    grid = np.meshgrid(*[np.arange(n) for n in nc], indexing="ij")
    base = np.stack([g.reshape(-1) for g in grid], axis=1)
    spacing = np.asarray(chart.spacing)
    origin = np.stack([chart.axes[a][base[:, a]] for a in range(3)], axis=1)

    keys, starts, dirs, signs = [], [], [], []
    for tet in _KUHN:
        corner = (base[:, None, :] + tet[None]) % np.asarray(shape)
        nodes = (corner[:, :, 0] * n1 + corner[:, :, 1]) * n2 + corner[:, :, 2]
        pos = origin[:, None, :] + tet[None] * spacing
        sign = flat_positive[nodes]
        code = sign @ (1 << np.arange(4))
        for c, triangles in _TET_CASES.items():
            if not triangles:
                continue
            idx = np.flatnonzero(code == c)
            if len(idx) == 0:
                continue
            for triangle in triangles:
                tri_keys = []
                for a, b in triangle:
                    na, nb = nodes[idx, a], nodes[idx, b]
                    tri_keys.append(np.minimum(na, nb) * n_nodes + np.maximum(na, nb))
                    starts.append(pos[idx, a])
                    dirs.append(pos[idx, b] - pos[idx, a])
                    signs.append(sign[idx, a])
                keys.append(np.stack(tri_keys, axis=1))

    if keys:
        # occurrences are stored edge-major per triangle block
        all_keys = np.concatenate([k.T.reshape(-1) for k in keys])
        starts = np.concatenate(starts)
        dirs = np.concatenate(dirs)
        signs = np.concatenate(signs)
        unique, first, inverse = np.unique(all_keys, return_index=True, return_inverse=True)
        points = refine_flat(f, starts[first], dirs[first], signs[first], steps)
        cells = []
        offset = 0
        for k in keys:
            block = inverse[offset : offset + k.size].reshape(3, -1).T
            cells.append(block)
            offset += k.size
        cells = np.concatenate(cells)
    else:
        points = np.zeros((0, 3))
        cells = np.zeros((0, 3), dtype=np.int64)

    b_vertices, b_cells, b_normals = [], [], []
    if domain.has_boundary:
        offset = 0
        for face in domain.boundary_faces():
            others = [a for a in range(3) if a != face.axis]
            index = 0 if face.side == 0 else shape[face.axis] - 1
            face_positive = np.take(positive, index, axis=face.axis)

            def embed(u, v, face=face, others=others):
                cols = [None, None, None]
                cols[others[0]] = u
                cols[others[1]] = v
                cols[face.axis] = np.full(np.shape(u), face.value)
                return np.stack(cols, axis=-1)

            _, fpoints, fcells = march_squares(
                f,
                face_positive,
                (chart.axes[others[0]], chart.axes[others[1]]),
                (chart.spacing[others[0]], chart.spacing[others[1]]),
                False,
                embed,
                steps,
            )
            if len(fcells) == 0:
                continue
            b_vertices.append(fpoints)
            b_cells.append(fcells + offset)
            b_normals.append(np.tile(face.normal, (len(fcells), 1)))
            offset += len(fpoints)

    if b_cells:
        return Primitives(
            points, cells, np.vstack(b_vertices), np.vstack(b_cells), np.vstack(b_normals)
        )
    return Primitives(
        points, cells, np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64), np.zeros((0, 3))
    )


def _march_sphere(
    f: FieldFunction, domain: Domain, values: np.ndarray, steps: int
) -> Primitives:
    mesh = domain.mesh
    positive = values > 0
    edge_cross = positive[mesh.edges[:, 0]] != positive[mesh.edges[:, 1]]
    face_cross = edge_cross[mesh.face_edges]
    faces = np.flatnonzero(face_cross.sum(axis=1) == 2)
    empty = Primitives(
        np.zeros((0, 3)),
        np.zeros((0, 2), dtype=np.int64),
        np.zeros((0, 3)),
        np.zeros((0, 1), dtype=np.int64),
        np.zeros((0, 3)),
    )
    if len(faces) == 0:
        return empty
    order = np.argsort(~face_cross[faces], axis=1, kind="stable")[:, :2]
    segments = np.take_along_axis(mesh.face_edges[faces], order, axis=1)
    used, cells = _compact(segments)
    a = mesh.vertices[mesh.edges[used, 0]]
    b = mesh.vertices[mesh.edges[used, 1]]
    points = refine_sphere(f, a, b, positive[mesh.edges[used, 0]], steps)
    return Primitives(points, cells, empty.boundary_vertices, empty.boundary_cells, empty.boundary_normals)


def march(
    f: FieldFunction,
    domain: Domain,
    chart: GridChart,
    values: np.ndarray,
    steps: int,
) -> Primitives:
    """Dispatches to marching squares, marching tetrahedra or mesh edges."""
    if domain.is_sphere:
        return _march_sphere(f, domain, values, steps)
    if domain.dims == 2:
        return _march_flat_2d(f, domain, chart, values, steps)
    return _march_flat_3d(f, domain, chart, values, steps)
