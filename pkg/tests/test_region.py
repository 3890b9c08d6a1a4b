import numpy as np
import pytest

from app.grid.region import FEASIBLE, IN_RESTRICTION, INFEASIBLE, classify_grid
from app.schemas.path import region_document
from tests.conftest import two_bus_u


@pytest.fixture(scope="module")
def slice3(two_bus):
    return classify_grid(two_bus, two_bus_u(two_bus, 0.0, 0.0), ("pg:2", "qg:2"), (-0.1, 0.7), (-0.3, 0.3), 3)


def test_grid_shape_and_counts(slice3):
    assert slice3.labels.shape == (3, 3)
    np.testing.assert_allclose(slice3.x, [-0.1, 0.3, 0.7])
    np.testing.assert_allclose(slice3.y, [-0.3, 0.0, 0.3])
    assert sum(slice3.counts.values()) == 9


def test_labels(slice3):
    # the base point (0, 0) is not on the grid; (0.7, 0) lies past the loadability limit
    assert slice3.labels[1, 2] == INFEASIBLE
    assert slice3.labels[1, 0] in (IN_RESTRICTION, FEASIBLE)
    assert set(slice3.labels.ravel()) <= {IN_RESTRICTION, FEASIBLE, INFEASIBLE}


def test_restriction_points_are_feasible(slice3):
    assert slice3.certificate_violations == 0


def test_document(two_bus, slice3):
    doc = region_document(slice3, two_bus)
    assert doc.axes == ["pg:2", "qg:2"]
    assert len(doc.labels) == 3
    assert doc.labels[1][2] == INFEASIBLE
    assert doc.counts == dict(sorted(slice3.counts.items()))


@pytest.mark.parametrize(("axes", "n"), [(("pg:2", "qg:2"), 0), (("pg:2", "pg:2"), 3)])
def test_bad_arguments(two_bus, axes, n):
    with pytest.raises(ValueError):
        classify_grid(two_bus, two_bus_u(two_bus, 0.0, 0.0), axes, (0.0, 0.1), (0.0, 0.1), n)


def test_threaded_rows_match_serial(two_bus, slice3):
    threaded = classify_grid(two_bus, two_bus_u(two_bus, 0.0, 0.0), ("pg:2", "qg:2"), (-0.1, 0.7), (-0.3, 0.3), 3, workers=2)
    np.testing.assert_array_equal(threaded.labels, slice3.labels)
    assert threaded.counts == slice3.counts
    assert threaded.certificate_violations == slice3.certificate_violations


def test_workers_must_be_positive(two_bus):
    with pytest.raises(ValueError):
        classify_grid(two_bus, two_bus_u(two_bus, 0.0, 0.0), ("pg:2", "qg:2"), (0.0, 0.1), (0.0, 0.1), 2, workers=0)
