import pytest


@pytest.fixture
def two_bus_text(cases_dir):
    return (cases_dir / "two_bus.m").read_text()


def test_health(client):
    response = client.get("/health/live")
    assert response.status_code == 200
    assert response.json() == {"status": "alive"}


class TestPowerFlow:
    def test_file_dispatch(self, client, two_bus_text):
        response = client.post("/v1/grid/pf", json={"case_text": two_bus_text})
        assert response.status_code == 200
        body = response.json()
        assert body["converged"] and body["feasible"]
        assert body["v"] == pytest.approx([1.0, 1.0])
        assert body["violations"] == []
        assert body["cost"] == pytest.approx(0.0)

    def test_beyond_loadability(self, client, two_bus_text):
        dispatch = {"pg_mw": [0.0, 60.0], "vg": [1.0, 1.0]}
        response = client.post("/v1/grid/pf", json={"case_text": two_bus_text, "dispatch": dispatch})
        assert response.status_code == 200
        body = response.json()
        assert not body["converged"]
        assert not body["feasible"]
        assert body["cost"] is None

    def test_bad_case_text(self, client):
        response = client.post("/v1/grid/pf", json={"case_text": "mpc.bus = [\n1 3 0"})
        assert response.status_code == 422
        assert response.json()["error"] in ("CaseParseError", "CaseValidationError")


class TestPaths:
    def test_create_list_fetch(self, client, two_bus_text):
        payload = {"case_text": two_bus_text, "settings": {"max_iterations": 2}}
        response = client.post("/v1/grid/paths", json=payload)
        assert response.status_code == 200, response.text
        created = response.json()
        run_id = created["run_id"]
        assert created["document"]["certificate"]["certified"]

        listing = client.get("/v1/grid/paths", params={"case_name": "two_bus"})
        assert listing.status_code == 200
        (summary,) = listing.json()
        assert summary["id"] == run_id
        assert summary["status"] == "certified"

        fetched = client.get(f"/v1/grid/paths/{run_id}")
        assert fetched.status_code == 200
        assert fetched.json() == created["document"]

    def test_distance_without_target(self, client, two_bus_text):
        payload = {"case_text": two_bus_text, "settings": {"objective": "distance"}}
        assert client.post("/v1/grid/paths", json=payload).status_code == 422

    def test_infeasible_start(self, client, two_bus_text):
        start = {"pg_mw": [0.0, 60.0], "vg": [1.0, 1.0]}
        response = client.post("/v1/grid/paths", json={"case_text": two_bus_text, "start": start})
        assert response.status_code == 409

    def test_missing_run(self, client):
        assert client.get("/v1/grid/paths/12345").status_code == 404

    def test_limit_checked(self, client):
        assert client.get("/v1/grid/paths", params={"limit": 0}).status_code == 400
