import json

import numpy as np
import pytest

from app.grid.errors import CaseValidationError
from app.schemas.path import (
    DispatchIn,
    dispatch_to_u,
    path_document,
    read_dispatch,
    read_path,
    u_to_dispatch,
    write_document,
    write_path,
)


@pytest.fixture
def document(two_bus, two_bus_path):
    return path_document(two_bus_path, two_bus, "cost", 1.0, 0.01)


class TestPathDocument:
    def test_layout(self, document, two_bus, two_bus_path):
        assert document.case == "two_bus"
        assert document.control_names == two_bus.control_names()
        assert document.segments == two_bus_path.iterations
        first, last = document.iterations[0], document.iterations[-1]
        assert first.objective is None and first.bounds is None
        assert last.step_norm == pytest.approx(two_bus_path.step_norms[-1])
        assert document.certificate.certified
        assert len(document.stats.solver_times) == two_bus_path.iterations

    def test_text_round_trip(self, document, two_bus_path):
        text = write_document(document)
        assert text.endswith("}\n")
        assert list(json.loads(text)) == sorted(json.loads(text))
        again = read_path(text)
        assert again == document
        for a, b in zip(again.setpoints(), two_bus_path.setpoints):
            np.testing.assert_allclose(a, b)


class TestDispatch:
    def test_round_trip_in_case_units(self, case9):
        u = case9.file_dispatch()
        dispatch = u_to_dispatch(case9, u)
        assert dispatch.pg_mw[1] == pytest.approx(163.0)
        np.testing.assert_allclose(dispatch_to_u(case9, dispatch), u)

    def test_read_dispatch_file(self, tmp_path, case9):
        path = tmp_path / "dispatch.json"
        path.write_text(json.dumps({"pg_mw": [0.0, 100.0, 80.0], "vg": [1.05, 1.02, 1.01]}))
        u = read_dispatch(path, case9)
        assert u[case9.control_index("pg:2")] == pytest.approx(1.0)
        assert u[case9.control_index("vg:1")] == pytest.approx(1.05)

    @pytest.mark.parametrize("content", ["not json", json.dumps({"pg_mw": [1.0]})])
    def test_bad_dispatch_file(self, tmp_path, case9, content):
        path = tmp_path / "dispatch.json"
        path.write_text(content)
        with pytest.raises(CaseValidationError):
            read_dispatch(path, case9)

    def test_wrong_length(self, case9):
        with pytest.raises(CaseValidationError):
            dispatch_to_u(case9, DispatchIn(pg_mw=[0.0, 1.0], vg=[1.0, 1.0]))


def test_single_point_path(two_bus):
    from app.grid.matrices import build_admittances
    from app.grid.powerflow import solve_pf
    from app.grid.sequential import FeasiblePath

    u = two_bus.file_dispatch()
    op = solve_pf(two_bus, build_admittances(two_bus), u)
    text = write_path(FeasiblePath(setpoints=[u], points=[op], costs=[0.0]), two_bus)
    doc = read_path(text)
    assert doc.segments == 0
    assert doc.certificate is None
    assert write_path(FeasiblePath(setpoints=[u], points=[op], costs=[0.0]), two_bus) == text
