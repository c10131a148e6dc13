import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowrecover.library import (LibraryError, SparseODEModel, build_library, check_identifiability,
                                 eval_features, expected_term_count, model_rhs)


def test_lv_library_order():
    lib = build_library(2, 1, 2)
    assert lib.names == ["u", "x1", "x2", "x1^2", "x1*x2", "x2^2"]


def test_multi_input_and_constant_names():
    lib = build_library(2, 2, 1, include_constant=True)
    assert lib.names == ["u1", "u2", "1", "x1", "x2"]


@given(st.integers(1, 4), st.integers(0, 3), st.integers(1, 4), st.booleans())
@settings(max_examples=60, deadline=None)
def test_term_count_formula(n, m, order, const):
    lib = build_library(n, m, order, const)
    assert lib.term_count == math.comb(order + n, n) - 1 + m + int(const)
    assert lib.term_count == expected_term_count(n, m, order, const)
    assert len(set(lib.names)) == lib.term_count


def test_eval_features_examples():
    lib = build_library(2, 1, 2)
    assert eval_features(lib, [2, 3], [1]).tolist() == [1, 2, 3, 4, 6, 9]
    assert eval_features(lib, [1, 1], [0]).tolist() == [0, 1, 1, 1, 1, 1]


def test_eval_features_shape_errors():
    lib = build_library(2, 1, 2)
    with pytest.raises(LibraryError):
        eval_features(lib, [1, 2, 3], [1])
    with pytest.raises(LibraryError):
        eval_features(lib, [1, 2], [1, 2])


def test_bad_dimensions():
    with pytest.raises(LibraryError):
        build_library(0, 1, 2)
    with pytest.raises(LibraryError):
        build_library(2, 1, 0)


def test_lv_rhs_example(lv_truth):
    np.testing.assert_allclose(model_rhs(lv_truth, [10, 5], [0]), [3.9, -2.255], rtol=1e-12)


def test_threshold_zeroes_small_entries():
    lib = build_library(1, 0, 2)
    m = SparseODEModel(lib, [[0.0005, -0.002]], threshold=1e-3)
    assert m.coefficients.tolist() == [[0.0, -0.002]]
    assert m.support_size == 1


def test_model_json_round_trip(lv_truth):
    back = SparseODEModel.from_json(lv_truth.to_json())
    assert np.array_equal(back.coefficients, lv_truth.coefficients)
    assert back.library == lv_truth.library
    assert back.support_terms() == [{"x1", "x1*x2"}, {"u", "x2", "x1*x2"}]


def test_from_dict_rejects_foreign_document():
    with pytest.raises(LibraryError):
        SparseODEModel.from_dict({"format": "other"})


def test_identifiability_lv(lv_truth):
    rep = check_identifiability(lv_truth, [30.0, 4.0], np.ones(1), horizon=20.0, dt=0.01)
    assert rep.identifiable.all()
    assert len(rep.entries) == 5


def test_identifiability_flags_dead_term():
    lib = build_library(2, 0, 1)
    # x2 stays at zero and nothing drives it, so its coefficient in the first equation never acts
    model = SparseODEModel(lib, [[-1.0, 0.5], [0.0, -1.0]])
    rep = check_identifiability(model, [1.0, 0.0], horizon=2.0, dt=0.01)
    idx = rep.entries.index((0, 1))
    assert rep.sensitivity[idx] == 0.0
    assert not rep.identifiable[idx]
    assert rep.identifiable[rep.entries.index((0, 0))]
