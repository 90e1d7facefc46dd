import json

import numpy as np

from utils.draws import ChainDraws, assemble
from utils.errors import ConvergenceError
from utils.json_output import SCHEMA_VERSION, RunManifest, build_record, dumps, to_jsonable, write_json
from utils.stacking import ChainWeights


def test_non_finite_values_become_null():
    assert to_jsonable({"k": np.array([-np.inf, 0.5, np.nan])}) == {"k": [None, 0.5, None]}


def test_numpy_scalars_are_plain():
    converted = to_jsonable({"n": np.int64(3), "x": np.float64(0.25), "flag": np.bool_(True)})
    assert converted == {"n": 3, "x": 0.25, "flag": True}
    assert type(converted["n"]) is int


def test_objects_with_to_dict():
    assert to_jsonable(ChainWeights([0.5, 0.5], "uniform"))["weights"] == [0.5, 0.5]


def test_envelope():
    record = build_record("weights", {"weights": ChainWeights([1.0])})
    assert record["schema"] == SCHEMA_VERSION
    assert record["tool"] == "chainstack"
    assert record["kind"] == "weights"
    assert record["manifest"]["inputs"] == []


def test_manifest_parses_json_provenance():
    ds = assemble([ChainDraws(np.zeros((2, 1)), "a")], sources=["a.loglik.csv"],
                  provenance={"scenario": '{"a": 10.0}', "note": "plain text"})
    manifest = RunManifest.from_drawset(ds, {"lambda": 1.001})
    assert manifest.provenance == {"scenario": {"a": 10.0}, "note": "plain text"}
    assert manifest.inputs == ["a.loglik.csv"]
    assert manifest.to_dict()["config"] == {"lambda": 1.001}


def test_identical_records_write_identical_bytes(tmp_path):
    record = build_record("weights", {"weights": ChainWeights([0.1, 0.9])})
    first = write_json(record, tmp_path / "a.json").read_bytes()
    second = write_json(record, tmp_path / "b.json").read_bytes()
    assert first == second
    assert first.endswith(b"\n")


def test_error_record():
    error = ConvergenceError("no luck", best=ChainWeights([1.0]), module="stacking", iterations=3)
    record = json.loads(dumps(error.to_record()))
    assert record["error"]["code"] == "CONVERGENCE"
    assert record["error"]["iterations"] == 3
