import json
import os

import pandas as pd
import pytest

import app

EM_FLAGS = ["--k-range", "1..3", "--max-iter", "50", "--restarts", "1"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in list(os.environ):
        if name.upper().startswith(app.ENV_PREFIX):
            monkeypatch.delenv(name)
    return tmp_path


def run(workdir, *argv):
    return app.main([argv[0], "--log-dir", str(workdir / "logs"), *argv[1:]])


@pytest.fixture
def city(workdir):
    assert run(workdir, "synth", "--flows", "3", "--per-flow", "12", "--step", "100",
               "--output", "trips.csv", "--labels", "truth.csv") == app.EXIT_OK
    return workdir


class TestPipeline:

    def test_end_to_end(self, city):
        assert run(city, "distances", "--input", "trips.csv", "--output", "d.bin") == 0
        assert run(city, "cluster", "--input", "d.bin", "--trajectories", "trips.csv",
                   "--k", "3", "--output", "labels.csv") == 0
        assert run(city, "fit", "--input", "trips.csv", "--labels", "labels.csv",
                   "--output", "model.json", *EM_FLAGS) == 0
        assert run(city, "predict", "--model", "model.json", "--input", "trips.csv",
                   "--completion", "0.5", "--flags", "all", "--rule", "1", "--output", "pred.csv") == 0
        assert run(city, "evaluate", "--input", "trips.csv", "--distances", "d.bin", "--k", "3",
                   "--grid", "0.5,1", "--output", "report", *EM_FLAGS) == 0
        assert run(city, "export", "--input", "trips.csv", "--labels", "labels.csv", "--model", "model.json",
                   "--predict", "--partition", "--output", "flows.geojson") == 0

        labels = pd.read_csv(city / "labels.csv", dtype={"trip_id": str})
        assert len(labels) == 36
        assert set(labels["label"]) == {1, 2, 3}

        model = json.loads((city / "model.json").read_text())
        assert model["K"] == 3

        predictions = pd.read_csv(city / "pred.csv")
        assert len(predictions) == 36
        assert (predictions["rule"] == 1).all()
        assert predictions["pred_lon"].equals(predictions["pred1_lon"])

        metrics = pd.read_csv(city / "report" / "metrics.csv")
        assert set(metrics["p"]) == {0.5, 1.0}
        assert (city / "report" / "auc.csv").exists()

        kinds = {f["properties"]["kind"] for f in json.loads((city / "flows.geojson").read_text())["features"]}
        assert kinds == {"trajectory", "component", "mean_destination", "partition", "prediction"}
        assert (city / "logs" / "flowcast.log").exists()

    def test_default_output_names(self, city):
        assert run(city, "distances", "--input", "trips.csv") == 0
        assert (city / "distances.bin").exists()

    def test_ingest_porto(self, workdir):
        (workdir / "porto.csv").write_text(
            'TRIP_ID,TIMESTAMP,POLYLINE\n'
            '"1","1372636800","[[-8.6110,41.1456],[-8.6100,41.1460]]"\n'
            '"2","1372636800","[[-8.7000,41.2000],[-8.6100,41.1460]]"\n'
        )
        assert run(workdir, "ingest", "--input", "porto.csv", "--origin", "sao-bento", "--output", "out.csv") == 0
        out = pd.read_csv(workdir / "out.csv", dtype={"trip_id": str})
        assert list(out["trip_id"]) == ["1"]
        assert list(out.columns) == ["trip_id", "start_epoch", "start_hour", "start_weekday", "polyline"]

    def test_reproducible_outputs(self, city):
        for name in ("a", "b"):
            assert run(city, "synth", "--flows", "2", "--per-flow", "10", "--output", f"trips_{name}.csv",
                       "--labels", f"truth_{name}.csv") == 0
            assert run(city, "fit", "--input", f"trips_{name}.csv", "--labels", f"truth_{name}.csv",
                       "--output", f"model_{name}.json", *EM_FLAGS) == 0
        assert (city / "trips_a.csv").read_bytes() == (city / "trips_b.csv").read_bytes()
        assert (city / "model_a.json").read_bytes() == (city / "model_b.json").read_bytes()


class TestOptions:

    def count_rows(self, workdir):
        return len(pd.read_csv(workdir / "trips.csv"))

    def test_config_file(self, workdir):
        (workdir / "flowcast.cfg").write_text("per-flow = 4\nflows = 2\nstep = 200\n")
        assert run(workdir, "synth", "--config", "flowcast.cfg", "--output", "trips.csv") == 0
        assert self.count_rows(workdir) == 8

    def test_flag_beats_config(self, workdir):
        (workdir / "flowcast.cfg").write_text("per-flow = 4\nflows = 2\n")
        assert run(workdir, "synth", "--config", "flowcast.cfg", "--flows", "1", "--output", "trips.csv") == 0
        assert self.count_rows(workdir) == 4

    def test_config_beats_environment(self, workdir, monkeypatch):
        monkeypatch.setenv("FLOWCAST_PER_FLOW", "7")
        (workdir / "flowcast.cfg").write_text("PER_FLOW = 3\n")
        assert run(workdir, "synth", "--config", "flowcast.cfg", "--flows", "1", "--output", "trips.csv") == 0
        assert self.count_rows(workdir) == 3

    def test_environment_beats_default(self, workdir, monkeypatch):
        monkeypatch.setenv("FLOWCAST_PER_FLOW", "7")
        assert run(workdir, "synth", "--flows", "1", "--output", "trips.csv") == 0
        assert self.count_rows(workdir) == 7

    def test_parse_origin(self):
        assert app.parse_origin("caltrain") == app.STATIONS["caltrain"]
        assert app.parse_origin("Sao Bento") == app.STATIONS["sao-bento"]
        origin = app.parse_origin("-8.61,41.14")
        assert (origin.lon, origin.lat) == (-8.61, 41.14)


class TestExitCodes:

    @pytest.mark.parametrize("argv", [
        ["bogus"],
        ["synth", "--flows", "abc"],
        ["synth", "--log-level", "LOUD"],
        ["synth", "--config", "missing.cfg"],
        ["fit"],
        ["cluster", "--input", "d.bin"],
        ["predict", "--model", "m.json", "--input", "t.csv", "--rule", "3"],
        ["predict", "--model", "m.json", "--input", "t.csv", "--completion", "1.5"],
        ["fit", "--input", "t.csv", "--labels", "l.csv", "--bic-penalty", "weird"],
    ])
    def test_usage_errors(self, workdir, argv):
        assert run(workdir, *argv) == app.EXIT_USAGE

    def test_missing_input_is_data_error(self, workdir):
        assert run(workdir, "distances", "--input", "nowhere.csv") == app.EXIT_DATA

    def test_inconsistent_inputs_are_data_errors(self, city):
        assert run(city, "distances", "--input", "trips.csv", "--output", "d.bin") == 0
        (city / "short.csv").write_text("trip_id\nonly-one\n")
        assert run(city, "cluster", "--input", "d.bin", "--trajectories", "short.csv", "--k", "2") == app.EXIT_DATA

    def test_unlabelled_trajectory_is_data_error(self, city):
        (city / "partial.csv").write_text("trip_id,label\nnot-a-trip,1\n")
        assert run(city, "fit", "--input", "trips.csv", "--labels", "partial.csv", *EM_FLAGS) == app.EXIT_DATA
