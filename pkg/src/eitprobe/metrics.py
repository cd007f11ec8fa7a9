"""Voxel-space figures of merit for nodal reconstruction images.

A nodal image is sampled onto a regular voxel grid by P1 interpolation
inside the containing tetrahedron, thresholded at a quarter of the peak
signed value, and compared against the analytically voxelized truth
ellipsoid. Three numbers summarize the comparison: NADE (symmetric
difference volume inside a 2x region of interest, divided by the truth
surface area and the probe diameter), |dRES| (difference of the cube-root
volume fractions, in percent) and SD (fraction of the reconstruction
lying outside the truth, in percent).

All metric values reduce to integer voxel counts pushed through one
arithmetic expression, so independently coded counting oracles must match
them exactly, and positive rescaling of the input image cannot move them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ellipeinc, ellipkinc

from .datagen import target_probe_distance
from .errors import DimensionError, EmptyImageError
from .gn import element_to_nodal  # noqa: F401  (re-export convenience)
from .mesh import Mesh

V_DOMAIN = 4.0 / 3.0 * math.pi * 10.0 ** 3  # sphere of the placement bound
PROBE_DIAMETER = 2.0


@dataclass(frozen=True)
class GridSpec:
    """Uniform cubic voxel grid: ``dims`` voxels per axis spanning a cube
    of half-width ``half_width`` around ``center``."""

    half_width: float = 14.0
    dims: int = 64
    center: tuple = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        if self.dims < 8:
            raise ValueError("grid needs at least 8 voxels per axis")
        if len(self.center) != 3:
            raise ValueError("center must be a 3-vector")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.dims

    @property
    def origin(self) -> tuple:
        h = self.spacing
        return tuple(c - self.half_width + 0.5 * h for c in self.center)

    @property
    def shape(self) -> tuple:
        return (self.dims, self.dims, self.dims)


DEFAULT_GRID = GridSpec()


@dataclass(eq=False)
class VoxelGrid:
    """Scalar samples on a regular grid; zero marks outside-mesh voxels."""

    origin: tuple
    spacing: float
    values: np.ndarray  # (nx, ny, nz)

    @property
    def dims(self) -> tuple:
        return self.values.shape


@dataclass(eq=False)
class BinaryVolume:
    """Thresholded volume on the same geometry as its source grid."""

    origin: tuple
    spacing: float
    bits: np.ndarray  # (nx, ny, nz) bool

    @property
    def dims(self) -> tuple:
        return self.bits.shape


def _axes_points(obj) -> tuple:
    """Per-axis voxel center coordinates for a GridSpec, VoxelGrid or
    BinaryVolume."""
    if isinstance(obj, GridSpec):
        origin, spacing, dims = obj.origin, obj.spacing, obj.shape
    else:
        origin, spacing, dims = obj.origin, obj.spacing, obj.dims
    return tuple(origin[k] + spacing * np.arange(dims[k]) for k in range(3))


def _same_geometry(a, b) -> None:
    if a.origin != b.origin or a.spacing != b.spacing or a.dims != b.dims:
        raise DimensionError("volumes live on different grids")


class Voxelizer:
    """Precomputed voxel-to-tetrahedron interpolation for one mesh/grid
    pairing; building it walks every element once, applying it to an
    image is a single gather."""

    def __init__(self, mesh: Mesh, spec: GridSpec):
        spec.validate()
        self.mesh_id = mesh.mesh_id
        self.spec = spec
        xs, ys, zs = _axes_points(spec)
        nx, ny, nz = spec.shape
        n_vox = nx * ny * nz
        h = spec.spacing
        origin = spec.origin

        tet_of = np.full(n_vox, -1, dtype=np.int64)
        bary = np.zeros((n_vox, 4))
        nodes = mesh.nodes
        tets = mesh.tets
        v0 = nodes[tets[:, 0]]
        edges = np.stack([nodes[tets[:, k]] - v0 for k in (1, 2, 3)], axis=2)
        inv_t = np.linalg.inv(edges).transpose(0, 2, 1)

        lo_idx = np.ceil((nodes[tets].min(axis=1) - origin) / h - 1e-12)
        hi_idx = np.floor((nodes[tets].max(axis=1) - origin) / h + 1e-12)
        lo_idx = np.clip(lo_idx, 0, np.array(spec.shape) - 1).astype(np.int64)
        hi_idx = np.clip(hi_idx, -1, np.array(spec.shape) - 1).astype(np.int64)

        for e in range(mesh.n_elements):
            (x0, y0, z0), (x1, y1, z1) = lo_idx[e], hi_idx[e]
            if x1 < x0 or y1 < y0 or z1 < z0:
                continue
            gx, gy, gz = np.meshgrid(np.arange(x0, x1 + 1),
                                     np.arange(y0, y1 + 1),
                                     np.arange(z0, z1 + 1), indexing="ij")
            flat = ((gx * ny + gy) * nz + gz).ravel()
            flat = flat[tet_of[flat] < 0]
            if flat.size == 0:
                continue
            pts = np.column_stack([xs[flat // (ny * nz)],
                                   ys[(flat // nz) % ny],
                                   zs[flat % nz]])
            lam = (pts - v0[e]) @ inv_t[e]
            lam0 = 1.0 - lam.sum(axis=1)
            ok = (lam.min(axis=1) >= -1e-12) & (lam0 >= -1e-12)
            if not ok.any():
                continue
            sel = flat[ok]
            tet_of[sel] = e
            bary[sel, 0] = lam0[ok]
            bary[sel, 1:] = lam[ok]

        self.tet_of = tet_of
        self.bary = bary
        self.inside = tet_of >= 0
        self.corner_nodes = tets[np.where(self.inside, tet_of, 0)]

    def apply(self, img: np.ndarray) -> np.ndarray:
        vals = np.einsum("vk,vk->v", self.bary, img[self.corner_nodes])
        return np.where(self.inside, vals, 0.0).reshape(self.spec.shape)


_VOXELIZERS: dict = {}


def get_voxelizer(mesh: Mesh, spec: GridSpec = DEFAULT_GRID) -> Voxelizer:
    key = (mesh.mesh_id, spec)
    if key not in _VOXELIZERS:
        _VOXELIZERS[key] = Voxelizer(mesh, spec)
    return _VOXELIZERS[key]


def voxelize(mesh: Mesh, img: np.ndarray,
             spec: GridSpec = DEFAULT_GRID) -> VoxelGrid:
    """Sample a nodal image onto the grid; outside-mesh voxels are zero."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (mesh.n_nodes,):
        raise DimensionError("image length does not match the mesh")
    vox = get_voxelizer(mesh, spec)
    return VoxelGrid(origin=spec.origin, spacing=spec.spacing,
                     values=vox.apply(img))


def threshold_quarter(grid: VoxelGrid, contrast_sign: float = 1.0) -> BinaryVolume:
    """Voxels at or above a quarter of the peak signed value."""
    signed = grid.values * (1.0 if contrast_sign >= 0 else -1.0)
    peak = float(signed.max())
    if peak <= 0.0:
        raise EmptyImageError("image has no contrast of the expected sign")
    return BinaryVolume(origin=grid.origin, spacing=grid.spacing,
                        bits=signed >= 0.25 * peak)


def _ellipsoid_bits(center, rot, semi_axes, geom) -> np.ndarray:
    xs, ys, zs = _axes_points(geom)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1) - np.asarray(center, dtype=np.float64)
    body = pts @ rot
    return np.sum((body / np.asarray(semi_axes, dtype=np.float64)) ** 2,
                  axis=-1) <= 1.0


def voxelize_ellipsoid(target, geom) -> BinaryVolume:
    """Analytic rasterization of a target ellipsoid: voxel center inside."""
    if isinstance(geom, GridSpec):
        origin, spacing = geom.origin, geom.spacing
    else:
        origin, spacing = geom.origin, geom.spacing
    bits = _ellipsoid_bits(target.center, target.rotation_matrix(),
                           target.semi_axes, geom)
    return BinaryVolume(origin=origin, spacing=spacing, bits=bits)


def ellipsoid_surface_area(semi_axes) -> float:
    """Exact triaxial ellipsoid surface area via Legendre integrals."""
    a, b, c = sorted((float(v) for v in semi_axes), reverse=True)
    if a - c < 1e-12 * a:
        return 4.0 * math.pi * a * c
    phi = math.acos(c / a)
    m = (a * a * (b * b - c * c)) / (b * b * (a * a - c * c))
    sin_phi = math.sin(phi)
    return (2.0 * math.pi * c * c
            + (2.0 * math.pi * a * b / sin_phi)
            * (ellipeinc(phi, m) * sin_phi ** 2
               + ellipkinc(phi, m) * math.cos(phi) ** 2))


def nade(recon: BinaryVolume, target,
         probe_diameter: float = PROBE_DIAMETER) -> float:
    """Normalized average distance error against the analytic truth.

    Error volume is the symmetric difference between the reconstruction
    restricted to a 2x concentric region of interest and the voxelized
    truth; it is divided by the truth surface area, then by the probe
    diameter.
    """
    rot = target.rotation_matrix()
    truth = _ellipsoid_bits(target.center, rot, target.semi_axes, recon)
    roi = _ellipsoid_bits(target.center, rot,
                          tuple(2.0 * v for v in target.semi_axes), recon)
    err = int(np.count_nonzero((recon.bits & roi) ^ truth))
    h = recon.spacing
    return ((err * h ** 3) / ellipsoid_surface_area(target.semi_axes)) / probe_diameter


def delta_res(recon: BinaryVolume, truth: BinaryVolume,
              domain_volume: float = V_DOMAIN) -> float:
    """Cube-root volume-fraction difference, in percent."""
    _same_geometry(recon, truth)
    h = recon.spacing
    res_r = (int(np.count_nonzero(recon.bits)) * h ** 3 / domain_volume) ** (1.0 / 3.0)
    res_t = (int(np.count_nonzero(truth.bits)) * h ** 3 / domain_volume) ** (1.0 / 3.0)
    return abs(res_r - res_t) * 100.0


def shape_deformation(recon: BinaryVolume, truth: BinaryVolume) -> float:
    """Share of the reconstruction lying outside the truth, in percent."""
    _same_geometry(recon, truth)
    n_recon = int(np.count_nonzero(recon.bits))
    if n_recon == 0:
        raise EmptyImageError("empty reconstruction")
    spurious = int(np.count_nonzero(recon.bits & ~truth.bits))
    return 100.0 * spurious / n_recon


@dataclass(frozen=True)
class ErrorReport:
    """One case's figures of merit."""

    method: str
    case_id: str
    distance: float
    nade: float
    delta_res_pct: float
    sd_pct: float
    worst_case: bool = False


def full_report(mesh: Mesh, img: np.ndarray, target,
                spec: GridSpec = DEFAULT_GRID, method: str = "",
                case_id: str = "", contrast_sign: float = 1.0,
                probe_diameter: float = PROBE_DIAMETER,
                domain_volume: float = V_DOMAIN) -> ErrorReport:
    """Voxelize, threshold and score one reconstruction.

    A reconstruction with no contrast of the expected sign cannot be
    thresholded; it scores the worst-case values (the whole truth missed,
    SD pinned at 100) and is tagged so sweeps can count such cases.
    """
    distance = target_probe_distance(target)
    grid = voxelize(mesh, img, spec)
    truth = voxelize_ellipsoid(target, spec)
    h = spec.spacing
    try:
        recon = threshold_quarter(grid, contrast_sign)
    except EmptyImageError:
        truth_count = int(np.count_nonzero(truth.bits))
        area = ellipsoid_surface_area(target.semi_axes)
        return ErrorReport(
            method=method, case_id=case_id, distance=distance,
            nade=((truth_count * h ** 3) / area) / probe_diameter,
            delta_res_pct=(truth_count * h ** 3 / domain_volume) ** (1.0 / 3.0) * 100.0,
            sd_pct=100.0, worst_case=True)
    return ErrorReport(
        method=method, case_id=case_id, distance=distance,
        nade=nade(recon, target, probe_diameter),
        delta_res_pct=delta_res(recon, truth, domain_volume),
        sd_pct=shape_deformation(recon, truth), worst_case=False)


REPORT_HEADER = "method,distance,nade,delta_res_pct,sd_pct,case_id"


def write_report_csv(reports, path: str | Path) -> None:
    lines = [REPORT_HEADER]
    for r in reports:
        for field in (r.method, r.case_id):
            if "," in field or "\n" in field:
                raise ValueError("method and case_id must not contain "
                                 "commas or newlines")
        lines.append(f"{r.method},{r.distance!r},{r.nade!r},"
                     f"{r.delta_res_pct!r},{r.sd_pct!r},{r.case_id}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_volume(vol, path: str | Path, name: str = "volume") -> None:
    """Write set/nonzero voxels in the legacy ASCII visualization layout
    (POINTS / CELLS / POINT_DATA sections, one vertex cell per voxel)."""
    if isinstance(vol, BinaryVolume):
        mask = vol.bits
        values = np.ones(int(np.count_nonzero(mask)))
    else:
        mask = vol.values != 0.0
        values = vol.values[mask]
    idx = np.argwhere(mask)
    xs, ys, zs = _axes_points(vol)
    n = idx.shape[0]
    out = [
        "# vtk DataFile Version 3.0",
        name,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {n} double",
    ]
    for i, j, k in idx:
        out.append(f"{xs[i]!r} {ys[j]!r} {zs[k]!r}")
    out.append(f"CELLS {n} {2 * n}")
    out.extend(f"1 {i}" for i in range(n))
    out.append(f"CELL_TYPES {n}")
    out.extend("1" for _ in range(n))
    out.append(f"POINT_DATA {n}")
    out.append(f"SCALARS {name} double 1")
    out.append("LOOKUP_TABLE default")
    out.extend(f"{v!r}" for v in values)
    Path(path).write_text("\n".join(out) + "\n")
