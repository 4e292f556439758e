import json

import numpy as np
import pytest

from linfvar import (
    ClosedFormMap,
    DomainBox,
    GridMap,
    Hamiltonian,
    SingularityError,
    Subdomain,
    hamiltonian_jet,
    hamiltonian_value,
    load_problem,
    map_jet,
    read_grid_csv,
    write_grid_csv,
)
from linfvar.problem import prescan_singularities

from conftest import ARONSSON_EXPR, random_polynomial_sources


class TestDomainBox:
    def test_validation(self):
        with pytest.raises(ValueError):
            DomainBox((0.0,), (0.0,), (5,))
        with pytest.raises(ValueError):
            DomainBox((0.0,), (1.0,), (2,))

    def test_spacing_and_coords(self):
        box = DomainBox((0.0, -1.0), (1.0, 1.0), (11, 21))
        assert np.allclose(box.spacing, [0.1, 0.1])
        assert box.nearest_node(np.array([0.3, -0.5])) == (3, 5)
        with pytest.raises(ValueError, match="not a grid node"):
            box.nearest_node(np.array([0.33, -0.5]))


class TestSubdomain:
    def test_box_subdomain_masks(self):
        box = DomainBox((-1.0, -1.0), (1.0, 1.0), (9, 9))
        sub = Subdomain.from_box(box, (-0.5, -0.5), (0.5, 0.5))
        assert sub.mask.sum() == 25
        assert sub.boundary_mask.sum() == 16
        assert sub.interior_mask.sum() == 9
        assert set(map(tuple, sub.boundary_nodes())) <= set(map(tuple, sub.evaluable_nodes()))

    def test_whole_box_boundary(self):
        box = DomainBox((0.0,), (1.0,), (5,))
        sub = Subdomain.whole(box)
        assert sub.boundary_mask.sum() == 2
        assert sub.interior_mask.sum() == 3

    def test_ball_subdomain(self):
        box = DomainBox((-1.0, -1.0), (1.0, 1.0), (17, 17))
        sub = Subdomain.from_ball(box, (0.0, 0.0), 0.5)
        assert sub.contains_point([0.3, 0.3])
        assert not sub.contains_point([0.5, 0.5])
        assert sub.interior_mask.sum() > 0


class TestMapJets:
    def test_linear_map_exact(self):
        A = np.array([[2.0, -1.0], [0.5, 3.0]])
        u = ClosedFormMap.from_expressions(
            ["2*x1 - x2 + 0.7", "0.5*x1 + 3*x2 - 1"], n=2)
        jet = map_jet(u, np.array([0.3, -0.4]))
        assert np.array_equal(jet.gradient, A)
        assert np.abs(jet.hessian).max() == 0.0

    def test_aronsson_jet_at_1_1(self, aronsson_map):
        jet = map_jet(aronsson_map, np.array([1.0, 1.0]))
        assert jet.value[0] == pytest.approx(0.0, abs=1e-15)
        assert np.allclose(jet.gradient, [[4 / 3, -4 / 3]], atol=1e-14)
        assert jet.hessian[0, 0, 0] == pytest.approx(4 / 9, abs=1e-14)
        assert jet.hessian[0, 1, 1] == pytest.approx(-4 / 9, abs=1e-14)
        assert jet.hessian[0, 0, 1] == 0.0

    def test_grid_quadratic_exact(self):
        box = DomainBox((0.0,), (1.0,), (11,))
        xs = box.axis_coords(0)
        g = GridMap(box, (xs**2)[None, :])
        jet = g.jet2(np.array([0.5]))
        # central difference exact on quadratics (up to 1 ulp from squaring coords)
        assert jet.gradient[0, 0] == pytest.approx(1.0, rel=1e-15)
        assert jet.hessian[0, 0, 0] == pytest.approx(2.0, abs=1e-12)
        # one-sided stencils at the faces are exact on quadratics too
        jet0 = g.jet2(np.array([0.0]))
        assert jet0.gradient[0, 0] == pytest.approx(0.0, abs=1e-13)
        assert jet0.hessian[0, 0, 0] == pytest.approx(2.0, abs=1e-11)

    def test_grid_nodes_only(self):
        box = DomainBox((0.0,), (1.0,), (11,))
        g = GridMap(box, np.zeros((1, 11)))
        with pytest.raises(ValueError, match="not a grid node"):
            g.jet2(np.array([0.517]))

    def test_hessian_symmetry_grid(self):
        rng = np.random.default_rng(1)
        u = ClosedFormMap.from_expressions(
            [random_polynomial_sources(rng, 2, terms=5)], n=2)
        box = DomainBox((0.0, 0.0), (1.0, 1.0), (17, 17))
        gm = u.sample(box)
        jets = gm.jet_at_nodes(box.all_nodes())
        assert np.array_equal(jets.hessian[:, 0, 1], jets.hessian[:, 1, 0])

    def test_grid_convergence_factor(self):
        u = ClosedFormMap.from_expressions(["sin(2*x1)*cos(x2) + x1^3*x2"], n=2)
        errs = []
        for res in (17, 33):
            box = DomainBox((0.0, 0.0), (1.0, 1.0), (res, res))
            gm = u.sample(box)
            nodes = box.all_nodes()
            fd = gm.jet_at_nodes(nodes)
            exact = u.jet2(box.node_coords(nodes))
            errs.append(np.max(np.abs(fd.gradient - exact.gradient)))
        assert errs[0] / errs[1] >= 3.5

    def test_prescan_and_fallback_stencils(self):
        box = DomainBox((-1.0,), (1.0,), (9,))
        u = ClosedFormMap.from_expressions(["abs(x1)^(4/3)"], n=1)
        bad = prescan_singularities(u, box)
        assert list(np.argwhere(bad).ravel()) == [4]
        gm = GridMap(box, u.sample(box).values, valid=~bad)
        assert not gm.jet_valid[4]
        # neighbours of the kink get one-sided stencils pointing away
        assert gm.jet_valid[3] and gm.jet_valid[5]
        with pytest.raises(SingularityError):
            gm.jet2(np.array([0.0]))

    def test_stencil_exhaustion_distinct_error(self):
        # invalid nodes hem in a valid one: no 3-point stencil fits
        from linfvar import StencilError
        box = DomainBox((0.0,), (1.0,), (7,))
        valid = np.array([True, False, True, False, True, True, True])
        gm = GridMap(box, np.linspace(0, 1, 7)[None, :].copy(), valid=valid)
        assert not gm.jet_valid[2]
        with pytest.raises(StencilError):
            gm.jet2(np.array([box.axis_coords(0)[2]]))


class TestHamiltonian:
    def test_dirichlet_jet(self):
        H = Hamiltonian.dirichlet(2, 1)
        P = np.array([[3.0, 5.0]])
        hj = hamiltonian_jet(H, np.zeros(2), np.zeros(1), P)
        assert hj.value == 34.0
        assert np.array_equal(hj.P_grad, 2 * P)
        assert np.all(hj.eta_grad == 0) and np.all(hj.x_grad == 0)

    def test_p_polynomial(self):
        H = Hamiltonian.from_expression("P11^2", 2, 1)
        hj = hamiltonian_jet(H, np.zeros(2), np.zeros(1), np.array([[3.0, 5.0]]))
        assert hj.value == 9.0
        assert np.array_equal(hj.P_grad, [[6.0, 0.0]])

    def test_mixed_dependence(self):
        H = Hamiltonian.from_expression("x1*P11^2 + eta1^2", 2, 1)
        hj = hamiltonian_jet(H, np.array([2.0, 0.0]), np.array([1.0]), np.array([[1.0, 0.0]]))
        assert hj.value == 3.0
        assert np.array_equal(hj.x_grad, [1.0, 0.0])
        assert np.array_equal(hj.eta_grad, [2.0])
        assert np.array_equal(hj.P_grad, [[4.0, 0.0]])
        assert H.depends_on_x and H.depends_on_eta

    def test_structural_identity_dirichlet(self):
        # (xi^T H_P).(xi^T P) = 2|xi^T P|^2 = (1/2)|xi^T H_P|^2
        rng = np.random.default_rng(3)
        H = Hamiltonian.dirichlet(3, 2)
        for _ in range(50):
            xi = rng.normal(size=2)
            P = rng.normal(size=(2, 3))
            hp = hamiltonian_jet(H, np.zeros(3), np.zeros(2), P).P_grad
            lhs = (xi @ hp) @ (xi @ P)
            assert lhs == pytest.approx(2 * np.sum((xi @ P) ** 2), rel=1e-12)
            assert lhs == pytest.approx(0.5 * np.sum((xi @ hp) ** 2), rel=1e-12)


class TestProblemIO:
    def test_load_problem_and_digest(self, tmp_path):
        spec = {
            "n": 2, "N": 1,
            "domain": {"lo": [1.0, 1.0], "hi": [2.0, 2.0], "resolution": [17, 17]},
            "H": "dirichlet",
            "u": [ARONSSON_EXPR],
            "subdomain": {"lo": [1.25, 1.25], "hi": [1.75, 1.75]},
        }
        path = tmp_path / "prob.json"
        path.write_text(json.dumps(spec))
        prob = load_problem(path)
        assert prob.n == 2 and prob.N == 1
        assert prob.subdomain.mask.sum() == 9 * 9
        assert prob.H.builtin == "dirichlet"

    def test_singular_declaration_and_prescan(self):
        spec = {
            "n": 1, "N": 1,
            "domain": {"lo": [-1.0], "hi": [1.0], "resolution": [9]},
            "H": "dirichlet",
            "u": ["abs(x1)^(4/3)"],
            "singular": [{"axis": 0, "value": 0.0}],
        }
        prob = load_problem(spec)
        assert prob.subdomain.singular[4]
        assert prob.subdomain.evaluable_mask.sum() == 8

    def test_grid_csv_round_trip(self, tmp_path):
        box = DomainBox((0.0, 0.0), (1.0, 1.0), (5, 5))
        rng = np.random.default_rng(0)
        gm = GridMap(box, rng.normal(size=(2, 5, 5)))
        path = tmp_path / "grid.csv"
        write_grid_csv(path, gm)
        back = read_grid_csv(path, box, 2)
        assert np.array_equal(back.values, gm.values)

    def test_grid_problem_from_csv(self, tmp_path):
        box = DomainBox((0.0,), (1.0,), (11,))
        xs = box.axis_coords(0)
        gm = GridMap(box, (xs**2)[None, :])
        csv_path = tmp_path / "u.csv"
        write_grid_csv(csv_path, gm)
        spec = {
            "n": 1, "N": 1,
            "domain": {"lo": [0.0], "hi": [1.0], "resolution": [11]},
            "H": "dirichlet",
            "u": {"grid": csv_path.name},
        }
        ppath = tmp_path / "prob.json"
        ppath.write_text(json.dumps(spec))
        prob = load_problem(ppath)
        jet = prob.u.jet2(np.array([0.5]))
        assert jet.gradient[0, 0] == pytest.approx(1.0, rel=1e-15)
