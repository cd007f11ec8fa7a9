"""One-step Gauss-Newton difference imaging through a precomputed matrix.

Building the reconstruction matrix R is the expensive phase; applying it to
a voltage difference is a single matrix-vector product. The Jacobian columns
are scaled by element volume to undo the grading bias of the mesh, the
normal equations are regularized by a smoothness prior, and the solve uses
the push-through identity

    (U U' + S)^-1 U = S^-1 U (I + U' S^-1 U)^-1

so only the sparse prior S and a dense measurement-by-measurement block are
ever factorized; an element-by-element dense matrix is never formed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse import identity as speye
from scipy.sparse.linalg import splu

from .errors import DimensionError, IllConditionedError, ProvenanceError
from .forward import Jacobian, VoltageFrame
from .ioutil import ByteReader, canonical_json_bytes, hash_of, pack_str, pack_u32
from .mesh import Mesh
from .pdipm import build_tv_operator

DEFAULT_LAMBDA = 0.03
PRIORS = ("laplacian", "tikhonov")
_PRIOR_RIDGE = 1e-8

EITR_MAGIC = b"EITR"
EITR_VERSION = 1


@dataclass(frozen=True)
class GnConfig:
    """Regularization weight (against normalized operators), prior choice
    and the background conductivity the Jacobian was linearized at."""

    lam: float = DEFAULT_LAMBDA
    prior: str = "laplacian"
    sigma_ref: float = 0.15

    def validate(self) -> None:
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError("lam must be positive and finite")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}")
        if not (self.sigma_ref > 0 and math.isfinite(self.sigma_ref)):
            raise ValueError("sigma_ref must be positive and finite")

    def to_dict(self) -> dict:
        return {"lam": self.lam, "prior": self.prior, "sigma_ref": self.sigma_ref}

    @classmethod
    def from_dict(cls, data: dict) -> "GnConfig":
        cfg = cls(lam=float(data["lam"]), prior=str(data["prior"]),
                  sigma_ref=float(data["sigma_ref"]))
        cfg.validate()
        return cfg


@dataclass(eq=False)
class ReconstructionMatrix:
    """Dense map from a 928-long voltage difference to a per-element
    conductivity change, tied to the mesh and schedule it was built for."""

    matrix: np.ndarray
    mesh_id: str
    schedule_id: str
    config: GnConfig

    @cached_property
    def config_hash(self) -> str:
        return hash_of(self.config.to_dict())


def smoothness_prior(mesh: Mesh, prior: str):
    """Sparse SPD prior: identity, or the face-weighted graph Laplacian of
    the element adjacency normalized to unit mean diagonal plus a small
    ridge that removes the constant nullspace."""
    n = mesh.n_elements
    if prior == "tikhonov":
        return speye(n, format="csc")
    lop = build_tv_operator(mesh).matrix
    lap = (lop.T @ lop).tocsc()
    lap = lap * (n / lap.diagonal().sum())
    return (lap + _PRIOR_RIDGE * speye(n, format="csc")).tocsc()


def build_reconstruction_matrix(jac: Jacobian, mesh: Mesh,
                                cfg: GnConfig) -> ReconstructionMatrix:
    cfg.validate()
    if jac.mesh_id != mesh.mesh_id:
        raise ProvenanceError("Jacobian was computed on a different mesh")
    vols = mesh.volumes
    # sensitivity entries grow with element volume; dividing the columns by
    # volume puts coarse far elements and fine near elements on one scale
    jt = jac.matrix / vols[None, :]
    n_meas = jt.shape[0]
    scale = np.linalg.norm(jt) / math.sqrt(n_meas)
    u = np.ascontiguousarray(jt.T) / scale
    lam2 = cfg.lam ** 2
    if cfg.prior == "tikhonov":
        w = u / lam2
    else:
        s = (lam2 * smoothness_prior(mesh, cfg.prior)).tocsc()
        try:
            factor = splu(s, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise IllConditionedError(f"prior factorization failed: {exc}") from exc
        w = factor.solve(u)
    g = np.eye(n_meas) + u.T @ w
    g = 0.5 * (g + g.T)
    try:
        cho = cho_factor(g, lower=True)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError(
            f"regularized normal matrix is not positive definite: {exc}") from exc
    r = cho_solve(cho, w.T).T / (vols[:, None] * scale)
    if not np.all(np.isfinite(r)):
        raise IllConditionedError("reconstruction matrix has non-finite entries")
    return ReconstructionMatrix(matrix=r, mesh_id=jac.mesh_id,
                                schedule_id=jac.schedule_id, config=cfg)


def element_to_nodal(values: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Volume-weighted mean of the elements incident to each node."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (mesh.n_elements,):
        raise DimensionError(
            f"image has {values.shape} entries, mesh has {mesh.n_elements} elements")
    flat = mesh.tets.ravel()
    wsum = np.bincount(flat, weights=np.repeat(mesh.volumes, 4),
                       minlength=mesh.n_nodes)
    vsum = np.bincount(flat, weights=np.repeat(mesh.volumes * values, 4),
                       minlength=mesh.n_nodes)
    return np.where(wsum > 0, vsum / np.where(wsum > 0, wsum, 1.0), 0.0)


def reconstruct_gn(rmat: ReconstructionMatrix, dv, mesh: Mesh) -> np.ndarray:
    """Nodal conductivity-change image from a voltage difference."""
    if rmat.mesh_id != mesh.mesh_id:
        raise ProvenanceError("reconstruction matrix belongs to a different mesh")
    if isinstance(dv, VoltageFrame):
        if dv.schedule_id != rmat.schedule_id:
            raise ProvenanceError("frame schedule does not match the matrix")
        values = dv.values
    else:
        values = np.asarray(dv, dtype=np.float64)
    if values.shape != (rmat.matrix.shape[1],):
        raise DimensionError("voltage difference length does not match the matrix")
    return element_to_nodal(rmat.matrix @ values, mesh)


def save_matrix(rmat: ReconstructionMatrix, path: str | Path) -> None:
    cfg_json = canonical_json_bytes(rmat.config.to_dict()).decode("utf-8")
    blob = b"".join([
        EITR_MAGIC,
        pack_u32(EITR_VERSION),
        pack_u32(rmat.matrix.shape[0]),
        pack_u32(rmat.matrix.shape[1]),
        pack_str(rmat.mesh_id),
        pack_str(rmat.schedule_id),
        pack_str(cfg_json),
        np.ascontiguousarray(rmat.matrix, dtype="<f8").tobytes(),
    ])
    Path(path).write_bytes(blob)


def load_matrix(path: str | Path) -> ReconstructionMatrix:
    reader = ByteReader(Path(path).read_bytes())
    if reader.bytes(4) != EITR_MAGIC:
        raise ValueError("not a reconstruction matrix file")
    version = reader.u32()
    if version != EITR_VERSION:
        raise ValueError(f"unsupported matrix file version {version}")
    rows, cols = reader.u32(), reader.u32()
    mesh_id = reader.str_()
    schedule_id = reader.str_()
    cfg = GnConfig.from_dict(json.loads(reader.str_()))
    matrix = reader.f64_array(rows * cols).reshape(rows, cols)
    if not reader.at_end():
        raise ValueError("trailing bytes in matrix file")
    return ReconstructionMatrix(matrix=matrix, mesh_id=mesh_id,
                                schedule_id=schedule_id, config=cfg)
