import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad_vec
from scipy.linalg import expm
from scipy.signal import cont2discrete

from linefdi.model import (
    FAULT_TYPES,
    K_MATRIX,
    LineParameters,
    ModelError,
    build_single_section,
    concatenate_sections,
    discretize,
    fault_branches,
    fault_conductance,
    fault_event_basis,
    fault_injection,
    fault_signature,
    null_space_of_c,
    StateSpaceModel,
)

# Table 1 as printed (Cap in uF); Cap(N,B) is the only entry changed on load.
R_TABLE = [[12.270, 7.180, 7.197, 6.748], [7.180, 12.310, 7.216, 6.750],
           [7.197, 7.216, 12.350, 6.757], [6.748, 6.750, 6.757, 147.3]]
L_TABLE = [[0.2881, 0.1521, 0.1342, 0.1472], [0.1521, 0.2878, 0.1519, 0.1331],
           [0.1342, 0.1519, 0.2878, 0.1234], [0.1472, 0.1331, 0.1234, 0.4356]]
CAP_TABLE = [[0.5624, -0.1447, -0.0728, -0.1086], [-0.1447, 0.5807, -0.1479, -0.0565],
             [-0.0728, -0.1479, 0.5525, -0.0387], [-0.1086, 0.1331, -0.0387, 0.4104]]

alphas = st.floats(min_value=1e-3, max_value=1 - 1e-3)


def _ident_params():
    I = np.eye(4)
    return LineParameters(R=I, L=I, Cap=I, length_km=1.0, v_rated=1.0, i_rated=1.0)


class TestLineParameters:
    def test_table_entries(self, line):
        assert line.R[0, 0] == 12.270
        np.testing.assert_array_equal(line.R, R_TABLE)
        np.testing.assert_array_equal(line.L, L_TABLE)
        cap = np.array(CAP_TABLE)
        cap[3, 1] = cap[1, 3]
        np.testing.assert_allclose(line.Cap, cap * 1e-6, rtol=1e-15)

    def test_cap_nb_symmetrized(self, line):
        assert line.Cap[3, 1] == line.Cap[1, 3] == pytest.approx(-0.0565e-6)

    def test_printed_cap_is_asymmetric(self, line):
        with pytest.raises(ModelError, match="Cap"):
            LineParameters(R=line.R, L=line.L, Cap=np.array(CAP_TABLE) * 1e-6, length_km=128,
                           v_rated=115e3, i_rated=1300)

    def test_voltage_base(self, line):
        assert line.v_base == pytest.approx(115e3 * np.sqrt(2) / np.sqrt(3))

    def test_current_base(self, line):
        assert line.i_base == pytest.approx(np.sqrt(2) * 100e6 / (np.sqrt(3) * 115e3))
        rated = LineParameters(R=line.R, L=line.L, Cap=line.Cap, length_km=128, v_rated=115e3,
                               i_rated=1300, s_base=None)
        assert rated.i_base == pytest.approx(1300 * np.sqrt(2))

    @pytest.mark.parametrize("name", ["R", "L"])
    def test_not_positive_definite(self, line, name):
        kw = dict(R=line.R, L=line.L, Cap=line.Cap, length_km=128, v_rated=115e3, i_rated=1300)
        kw[name] = -np.eye(4)
        with pytest.raises(ModelError, match=name):
            LineParameters(**kw)

    def test_zero_matrices_rejected(self, line):
        with pytest.raises(ModelError):
            LineParameters(R=np.zeros((4, 4)), L=np.zeros((4, 4)), Cap=line.Cap, length_km=1,
                           v_rated=1, i_rated=1)

    def test_singular_cap(self, line):
        with pytest.raises(ModelError, match="Cap"):
            LineParameters(R=line.R, L=line.L, Cap=np.ones((4, 4)), length_km=1, v_rated=1, i_rated=1)

    def test_nonpositive_length(self, line):
        with pytest.raises(ModelError, match="length_km"):
            LineParameters(R=line.R, L=line.L, Cap=line.Cap, length_km=0, v_rated=1, i_rated=1)


class TestSingleSection:
    def test_identity_parameters_closed_form(self):
        m = build_single_section(_ident_params(), per_unit=False)
        I, Z = np.eye(4), np.zeros((4, 4))
        expected = np.block([[Z, Z, -I], [Z, Z, I], [I, -I, -I]])
        np.testing.assert_array_equal(m.A, expected)

    def test_dimensions_and_ranks(self, line):
        m = build_single_section(line)
        assert m.A.shape == (12, 12) and m.B.shape == (12, 12) and m.C.shape == (8, 12)
        assert np.linalg.matrix_rank(m.C) == 8

    def test_common_mode_kernel(self, line):
        # Equal terminal voltages with no series current are an equilibrium,
        # so A has a 4-dimensional kernel and rank 8.
        m = build_single_section(line, per_unit=False)
        assert np.linalg.matrix_rank(m.A) == 8
        cap = line.Cap
        z = np.concatenate([cap @ np.ones(4), cap @ np.ones(4), np.zeros(4)])
        assert np.abs(m.A @ z).max() <= 1e-9 * np.abs(m.A).max() * np.abs(z).max()
        assert m.time_tag == "continuous"

    def test_input_map(self, line):
        B = build_single_section(line).B
        np.testing.assert_array_equal(B[:8, :8], np.eye(8))
        assert not B[8:].any() and not B[:, 8:].any()

    def test_null_space_of_c(self, line):
        m = build_single_section(line)
        N0 = null_space_of_c()
        assert np.abs(m.C @ N0).max() == 0.0
        assert np.linalg.matrix_rank(N0) == 4

    def test_k_invertible(self):
        assert np.linalg.matrix_rank(K_MATRIX) == 4

    def test_spectrum_stable(self, line):
        # Independent eigensolver path: SI model, then per-unit model.
        for pu in (False, True):
            ev = np.linalg.eigvals(build_single_section(line, per_unit=pu).A)
            assert ev.real.max() <= 1e-9

    def test_per_unit_similarity(self, line):
        # Per-unit scaling multiplies A by nothing but a change of units of z.
        si = np.sort_complex(np.linalg.eigvals(build_single_section(line, per_unit=False).A))
        pu = np.sort_complex(np.linalg.eigvals(build_single_section(line).A))
        np.testing.assert_allclose(pu, si, rtol=1e-9, atol=1e-6)


class TestEventBasis:
    def test_exact(self):
        F = fault_event_basis()
        E4, Z = np.eye(4), np.zeros((4, 4))
        assert np.array_equal(F, np.block([[E4, Z], [Z, E4], [Z, Z]]))
        assert np.array_equal(F[:, 0], np.eye(12)[0])

    def test_orthonormal(self):
        F = fault_event_basis()
        assert np.array_equal(F.T @ F, np.eye(8))

    def test_output_separable(self, line):
        C = build_single_section(line).C
        assert np.linalg.matrix_rank(C @ fault_event_basis()) == 8


class TestFaults:
    def test_ground_fault_conductance(self):
        np.testing.assert_array_equal(fault_conductance("A-G", 1000.0), np.diag([1e-3, 0, 0, 0]))

    @given(st.floats(-1e5, 1e5), st.floats(-1e5, 1e5), st.floats(-1e5, 1e5), st.floats(0.1, 1e4))
    def test_phase_phase_equal_voltages(self, v, x, y, rf):
        G = fault_conductance("A-B", rf)
        assert np.abs(G @ np.array([v, v, x, y])).max() <= 1e-12 * max(abs(v), 1.0)

    def test_three_phase_current(self):
        # Delta of 1-ohm resistors: i_A = (2 - (-1)) + (2 - (-1)) = 6 A.
        i = fault_conductance("A-B-C", 1.0) @ np.array([2.0, -1.0, -1.0, 0.0])
        assert i[0] == pytest.approx(6.0)
        assert i[1] == pytest.approx(-3.0) and i[2] == pytest.approx(-3.0)

    def test_three_phase_rows_sum_to_zero(self):
        assert np.abs(fault_conductance("A-B-C", 5.0)[:3, :3].sum(axis=1)).max() < 1e-15

    @pytest.mark.parametrize("rf", [0.0, -1.0, np.inf])
    def test_bad_resistance(self, rf):
        with pytest.raises(ModelError):
            fault_conductance("A-G", rf)

    def test_unknown_type(self):
        with pytest.raises(ModelError):
            fault_branches("A-N", 1.0)

    def test_aliases(self):
        np.testing.assert_array_equal(fault_conductance("ac", 2.0), fault_conductance("C-A", 2.0))


class TestSignatures:
    def test_single_phase(self):
        sig = fault_signature("A-G", 0.3)
        v = sig.vector()
        expected = 0.7 * np.eye(12)[0] + 0.3 * np.eye(12)[4]
        np.testing.assert_allclose(v, expected, rtol=0, atol=1e-15)
        assert "vaf" in sig.magnitude_symbol and "Rf" in sig.magnitude_symbol

    def test_bad_data(self):
        sig = fault_signature("bad-data", channel=0)
        np.testing.assert_array_equal(sig.vector(), np.eye(12)[0])
        assert sig.magnitude_symbol == "ia1(t)"

    def test_midpoint(self):
        v = fault_signature("B-G", 0.5).vector()
        assert v[1] == v[5] == 0.5

    def test_phase_phase_structure(self):
        v = fault_signature("A-B", 0.25).vector()
        np.testing.assert_allclose(v[:8], [0.75, -0.75, 0, 0, 0.25, -0.25, 0, 0])

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, None])
    def test_alpha_domain(self, alpha):
        with pytest.raises(ModelError):
            fault_signature("A-G", alpha)

    @settings(max_examples=100)
    @given(alphas, st.sampled_from(FAULT_TYPES), st.floats(0.5, 2000.0),
           st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3))
    def test_linearity(self, alpha, ftype, rf, v):
        # The failure term from G vf equals the signature evaluated at G vf.
        vf = np.array(v + [0.0])
        gv = fault_conductance(ftype, rf) @ vf
        sig = fault_signature(ftype, alpha)
        mags = {mag: gv[idx % 4] * (1 if coef >= 0 else -1) for idx, coef, mag in sig.combination}
        np.testing.assert_allclose(sig.vector(mags), fault_injection(ftype, rf, alpha, vf), atol=1e-12)


class TestDiscretize:
    def test_nilpotent(self):
        m = StateSpaceModel(A=np.array([[0.0, 1.0], [0.0, 0.0]]), B=np.eye(2), C=np.eye(2))
        np.testing.assert_allclose(discretize(m, 1.0).A, [[1.0, 1.0], [0.0, 1.0]], atol=1e-15)

    def test_small_dt(self, line):
        m = build_single_section(line)
        h = 1e-9
        d = discretize(m, h)
        # First-order agreement: remainder is O((h |A|)^2).
        bound = (h * np.linalg.norm(m.A, 2)) ** 2
        assert np.abs(d.A - np.eye(12) - h * m.A).max() <= bound

    def test_spectral_radius(self, line):
        d = discretize(build_single_section(line), 1e-4)
        assert np.abs(np.linalg.eigvals(d.A)).max() < 1 + 1e-9

    def test_against_cont2discrete(self, line):
        m = build_single_section(line)
        Ad, Bd, *_ = cont2discrete((m.A, m.B, m.C, np.zeros((8, 12))), 1e-4, method="zoh")
        d = discretize(m, 1e-4)
        np.testing.assert_allclose(d.A, Ad, atol=1e-12)
        np.testing.assert_allclose(d.B, Bd, atol=1e-12)
        np.testing.assert_array_equal(d.C, m.C)

    def test_hold_split_by_quadrature(self, line):
        m = build_single_section(line)
        dt = 1e-4
        d = discretize(m, dt)
        Bn, _ = quad_vec(lambda s: expm(m.A * (dt - s)) @ m.B * (s / dt), 0.0, dt, epsabs=1e-14)
        np.testing.assert_allclose(d.B_next, Bn, atol=1e-11)

    def test_rejects_discrete_and_bad_dt(self, line):
        m = build_single_section(line)
        with pytest.raises(ModelError):
            discretize(discretize(m, 1e-4), 1e-4)
        with pytest.raises(ModelError):
            discretize(m, 0.0)


class TestLadder:
    def test_single_section_topology(self, line):
        lad = concatenate_sections(line, 1)
        np.testing.assert_array_equal(lad.R_section, line.R)
        np.testing.assert_array_equal(lad.L_section, line.L)
        assert len(lad.node_capacitance) == 2
        for c in lad.node_capacitance:
            np.testing.assert_array_equal(c, line.Cap)

    def test_total_shunt(self, line):
        lad = concatenate_sections(line, 16)
        np.testing.assert_allclose(sum(lad.node_capacitance), 2 * line.Cap, rtol=1e-12)

    def test_one_section_impedance_nodal(self, line):
        # Nodal solve of the pi-section with the far end open.
        w = 2 * np.pi * 60
        Y0 = 1j * w * line.Cap
        Ys = np.linalg.inv(line.R + 1j * w * line.L)
        Y = np.block([[Y0 + Ys, -Ys], [-Ys, Y0 + Ys]])
        Z = np.linalg.inv(Y)[:4, :4]
        np.testing.assert_allclose(concatenate_sections(line, 1).input_impedance(w), Z, rtol=1e-10)

    @pytest.mark.parametrize("remote", ["open", "shorted"])
    def test_two_sections_close_to_one(self, line, remote):
        w = 2 * np.pi * 60
        Z1 = concatenate_sections(line, 1).input_impedance(w, remote)
        Z2 = concatenate_sections(line, 2).input_impedance(w, remote)
        assert np.linalg.norm(Z2 - Z1) / np.linalg.norm(Z1) < 0.02

    def test_zero_sections(self, line):
        with pytest.raises(ModelError):
            concatenate_sections(line, 0)
