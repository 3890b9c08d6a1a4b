import warnings
from datetime import datetime, timedelta, timezone

from app.crud import get_path_document, get_path_run, list_path_runs, save_path_run
from app.schemas.path import PathRunSummaryOut, path_document


def test_save_and_read_back(db_session, two_bus, two_bus_path):
    doc = path_document(two_bus_path, two_bus, "cost", 1.0, 0.01)
    saved = save_path_run(db_session, doc, status="certified")

    row = get_path_run(db_session, saved.id)
    assert row.case_name == "two_bus"
    assert row.iterations == two_bus_path.iterations
    assert row.certified
    assert row.initial_cost == doc.iterations[0].cost
    assert [it.iteration for it in row.iterates] == list(range(len(doc.iterations)))
    assert row.iterates[0].solver_time is None
    assert row.iterates[1].solver_time == two_bus_path.solver_times[0]
    assert get_path_document(db_session, saved.id) == doc


def test_listing(db_session, two_bus, two_bus_path):
    doc = path_document(two_bus_path, two_bus, "cost", 1.0, 0.01)
    first = save_path_run(db_session, doc)
    second = save_path_run(db_session, doc.model_copy(update={"case": "other"}))

    assert [r.id for r in list_path_runs(db_session)] == [second.id, first.id]
    assert [r.id for r in list_path_runs(db_session, case_name="other")] == [second.id]
    assert len(list_path_runs(db_session, limit=1)) == 1
    assert get_path_document(db_session, 999) is None


def test_created_at_is_utc_without_deprecations(db_session, two_bus, two_bus_path):
    doc = path_document(two_bus_path, two_bus, "cost", 1.0, 0.01)
    with warnings.catch_warnings():
        warnings.simplefilter("error", DeprecationWarning)
        saved = save_path_run(db_session, doc)
    created = saved.created_at
    if created.tzinfo is None:
        # sqlite drops the offset on read
        created = created.replace(tzinfo=timezone.utc)
    assert abs(datetime.now(timezone.utc) - created) < timedelta(minutes=5)


def test_summary_reads_orm_rows(db_session, two_bus, two_bus_path):
    doc = path_document(two_bus_path, two_bus, "cost", 1.0, 0.01)
    saved = save_path_run(db_session, doc, status="certified")
    summary = PathRunSummaryOut.model_validate(saved)
    assert summary.id == saved.id
    assert summary.case_name == "two_bus"
    assert summary.status == "certified"
    assert summary.created_at is not None
