import numpy as np
import pytest

from eitprobe.errors import DimensionError, ProvenanceError
from eitprobe.forward import VoltageFrame
from eitprobe.gn import (GnConfig, build_reconstruction_matrix,
                         element_to_nodal, load_matrix, reconstruct_gn,
                         save_matrix, smoothness_prior)


@pytest.fixture(scope="module")
def rmat(tiny_jacobian, tiny_mesh):
    return build_reconstruction_matrix(tiny_jacobian, tiny_mesh, GnConfig())


def _normal_equation_residual(jac, mesh, rmat):
    # the matrix must satisfy (Js'Js + lam^2 s^2 P) (V R) = Js' for the
    # volume-scaled Jacobian Js = J / vol; checked without forming inverses
    vols = mesh.volumes
    js = jac.matrix / vols[None, :]
    s2 = np.linalg.norm(js) ** 2 / js.shape[0]
    prior = smoothness_prior(mesh, rmat.config.prior)
    m = rmat.matrix * vols[:, None]
    lhs = js.T @ (js @ m) + (rmat.config.lam ** 2 * s2) * (prior @ m)
    return np.linalg.norm(lhs - js.T) / np.linalg.norm(js.T)


def test_solves_regularized_normal_equations(tiny_jacobian, tiny_mesh, rmat):
    assert _normal_equation_residual(tiny_jacobian, tiny_mesh, rmat) < 1e-4


def test_tikhonov_prior_normal_equations(tiny_jacobian, tiny_mesh):
    rm = build_reconstruction_matrix(tiny_jacobian, tiny_mesh,
                                     GnConfig(prior="tikhonov"))
    assert _normal_equation_residual(tiny_jacobian, tiny_mesh, rm) < 1e-9


def test_huge_lambda_suppresses_image(tiny_jacobian, tiny_mesh, rmat):
    rm = build_reconstruction_matrix(tiny_jacobian, tiny_mesh,
                                     GnConfig(lam=1e6))
    assert np.abs(rm.matrix).max() < 1e-6 * np.abs(rmat.matrix).max()


def test_single_element_localization(tiny_jacobian, tiny_mesh, rmat):
    c = tiny_mesh.centroids
    e_star = int(np.argmin((np.hypot(c[:, 0], c[:, 1]) - 1.3) ** 2
                           + c[:, 2] ** 2))
    dv = tiny_jacobian.matrix[:, e_star] * 0.15
    image = rmat.matrix @ dv
    top = int(np.argmax(np.abs(image)))
    shared = set(tiny_mesh.tets[top]) & set(tiny_mesh.tets[e_star])
    assert shared, f"peak element {top} does not touch perturbed {e_star}"


def test_rebuild_bit_identical(tiny_jacobian, tiny_mesh, rmat):
    again = build_reconstruction_matrix(tiny_jacobian, tiny_mesh, GnConfig())
    assert np.array_equal(again.matrix, rmat.matrix)


def test_zero_dv_gives_zero_image(rmat, tiny_mesh):
    img = reconstruct_gn(rmat, np.zeros(928), tiny_mesh)
    assert img.shape == (tiny_mesh.n_nodes,)
    assert np.all(img == 0.0)


def test_reconstruction_is_linear(rmat, tiny_mesh):
    rng = np.random.default_rng(4)
    dv1 = rng.normal(size=928) * 1e-6
    dv2 = rng.normal(size=928) * 1e-6
    a, b = 0.7, -2.3
    combo = reconstruct_gn(rmat, a * dv1 + b * dv2, tiny_mesh)
    parts = (a * reconstruct_gn(rmat, dv1, tiny_mesh)
             + b * reconstruct_gn(rmat, dv2, tiny_mesh))
    assert np.abs(combo - parts).max() <= 1e-10 * np.abs(combo).max()


def test_element_to_nodal_constant(tiny_mesh):
    out = element_to_nodal(np.full(tiny_mesh.n_elements, 3.25), tiny_mesh)
    assert np.abs(out - 3.25).max() < 1e-12


def test_element_to_nodal_single_element(tiny_mesh):
    img = np.zeros(tiny_mesh.n_elements)
    img[17] = 1.0
    out = element_to_nodal(img, tiny_mesh)
    assert set(np.flatnonzero(out)) == set(tiny_mesh.tets[17])


def test_element_to_nodal_matches_accumulation_oracle(tiny_mesh):
    rng = np.random.default_rng(9)
    img = rng.normal(size=tiny_mesh.n_elements)
    acc = np.zeros(tiny_mesh.n_nodes)
    wt = np.zeros(tiny_mesh.n_nodes)
    for e in range(tiny_mesh.n_elements):
        for v in tiny_mesh.tets[e]:
            acc[v] += tiny_mesh.volumes[e] * img[e]
            wt[v] += tiny_mesh.volumes[e]
    expected = acc / wt
    got = element_to_nodal(img, tiny_mesh)
    assert np.abs(got - expected).max() < 1e-12


def test_matrix_file_round_trip(rmat, tmp_path):
    path = tmp_path / "r.eitr"
    save_matrix(rmat, path)
    back = load_matrix(path)
    assert np.array_equal(back.matrix, rmat.matrix)
    assert back.mesh_id == rmat.mesh_id
    assert back.schedule_id == rmat.schedule_id
    assert back.config == rmat.config
    assert back.config_hash == rmat.config_hash


def test_matrix_file_rejects_corruption(rmat, tmp_path):
    path = tmp_path / "r.eitr"
    save_matrix(rmat, path)
    blob = path.read_bytes()
    bad = tmp_path / "bad.eitr"
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(ValueError, match="not a reconstruction"):
        load_matrix(bad)
    bad.write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_matrix(bad)
    bad.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_matrix(bad)


def test_mesh_provenance_enforced(tiny_jacobian, tiny_mesh, tiny_mesh_alt, rmat):
    with pytest.raises(ProvenanceError):
        reconstruct_gn(rmat, np.zeros(928), tiny_mesh_alt)
    with pytest.raises(ProvenanceError):
        build_reconstruction_matrix(tiny_jacobian, tiny_mesh_alt, GnConfig())
    frame = VoltageFrame(values=np.zeros(928), schedule_id="somethingelse")
    with pytest.raises(ProvenanceError):
        reconstruct_gn(rmat, frame, tiny_mesh)


def test_dv_length_checked(rmat, tiny_mesh):
    with pytest.raises(DimensionError):
        reconstruct_gn(rmat, np.zeros(927), tiny_mesh)


def test_config_validation():
    with pytest.raises(ValueError, match="lam"):
        GnConfig(lam=0.0).validate()
    with pytest.raises(ValueError, match="prior"):
        GnConfig(prior="ridge").validate()
    with pytest.raises(ValueError, match="sigma_ref"):
        GnConfig(sigma_ref=-1.0).validate()
    cfg = GnConfig.from_dict(GnConfig().to_dict())
    assert cfg == GnConfig()
