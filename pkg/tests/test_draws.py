import json

import numpy as np
import pytest

from utils.draws import (
    ChainDraws,
    DrawSet,
    EstimandSeries,
    assemble,
    concat_chains,
    estimand_from_params,
    load_chain_csv,
    load_chain_dir,
    load_matrix_csv,
    load_param_csv,
    select_half,
    write_chain_csv,
    write_manifest,
)
from utils.errors import DimensionMismatch, DomainError, InputMissing, ParseError, TooFewDraws


def _chain(n_draws=6, n_obs=3, chain_id="c"):
    return ChainDraws(np.arange(n_draws * n_obs, dtype=float).reshape(n_draws, n_obs) * -0.1, chain_id)


class TestChainDraws:
    def test_shapes_and_read_only(self):
        chain = _chain()
        assert chain.n_draws == 6
        assert chain.n_obs == 3
        with pytest.raises(ValueError):
            chain.log_lik[0, 0] = 1.0

    def test_input_array_is_copied(self):
        values = np.zeros((4, 2))
        chain = ChainDraws(values)
        values[0, 0] = 5.0
        assert chain.log_lik[0, 0] == 0.0

    def test_single_draw_is_rejected(self):
        with pytest.raises(TooFewDraws):
            ChainDraws(np.zeros((1, 3)))

    def test_non_finite_log_lik_names_position(self):
        values = np.zeros((4, 3))
        values[2, 1] = np.nan
        with pytest.raises(ParseError) as info:
            ChainDraws(values, "bad")
        assert info.value.details["row"] == 2
        assert info.value.details["column"] == 1

    def test_params_row_count_must_match(self):
        with pytest.raises(DimensionMismatch):
            ChainDraws(np.zeros((4, 2)), params=np.zeros((3, 1)))

    def test_default_param_names(self):
        chain = ChainDraws(np.zeros((4, 2)), params=np.zeros((4, 2)))
        assert chain.param_names == ("theta_1", "theta_2")

    def test_missing_param_column(self):
        with pytest.raises(DimensionMismatch):
            _chain().param("mu")


class TestDrawSet:
    def test_observation_counts_must_agree(self):
        with pytest.raises(DimensionMismatch) as info:
            assemble([_chain(n_obs=3), _chain(n_obs=4, chain_id="d")])
        assert info.value.details["chain_index"] == 1

    def test_empty_set_is_rejected(self):
        with pytest.raises(DimensionMismatch):
            DrawSet(())

    def test_order_and_counts_preserved(self):
        ds = assemble([_chain(6, chain_id="a"), _chain(8, chain_id="b")])
        assert ds.chain_ids == ["a", "b"]
        np.testing.assert_array_equal(ds.draw_counts, [6, 8])
        manifest = ds.manifest()
        assert manifest["n_obs"] == 3
        assert [c["n_draws"] for c in manifest["chains"]] == [6, 8]

    def test_manifest_written_as_json(self, tmp_path):
        ds = assemble([_chain()], provenance={"origin": "unit test"})
        path = write_manifest(ds, tmp_path / "manifest.json")
        assert json.loads(path.read_text())["provenance"] == {"origin": "unit test"}


class TestEstimands:
    def test_from_params_with_transform(self):
        chain = ChainDraws(np.zeros((4, 1)), params=np.array([[-1.0], [2.0], [0.5], [-3.0]]), param_names=("mu",))
        series = estimand_from_params(assemble([chain]), "mu", lambda mu: mu > 0)
        np.testing.assert_array_equal(series.values[0], [0.0, 1.0, 1.0, 0.0])

    def test_length_checked_against_draw_set(self):
        ds = assemble([_chain(6)])
        with pytest.raises(DimensionMismatch):
            EstimandSeries((np.zeros(5),)).check_against(ds)
        with pytest.raises(DimensionMismatch):
            EstimandSeries((np.zeros(6), np.zeros(6))).check_against(ds)


class TestCsv:
    def test_round_trip_is_exact(self, tmp_path, rng):
        chain = ChainDraws(rng.normal(size=(5, 4)), "chain_1", rng.normal(size=(5, 2)), ("mu", "lp__"))
        write_chain_csv(chain, tmp_path)
        ds = load_chain_dir(tmp_path)
        loaded = ds.chains[0]
        assert loaded.chain_id == "chain_1"
        np.testing.assert_array_equal(loaded.log_lik, chain.log_lik)
        np.testing.assert_array_equal(loaded.params, chain.params)
        assert loaded.param_names == ("mu", "lp__")

    def test_headerless_file(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("-1,-2\n-3,-4\n-5,-6\n")
        chain = load_chain_csv(path)
        assert chain.chain_id == "a"
        np.testing.assert_array_equal(chain.log_lik, [[-1, -2], [-3, -4], [-5, -6]])

    def test_observations_layout_is_transposed(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("-1,-2,-3\n-4,-5,-6\n")
        chain = load_chain_csv(path, layout="observations")
        assert (chain.n_draws, chain.n_obs) == (3, 2)
        np.testing.assert_array_equal(chain.log_lik[:, 0], [-1, -2, -3])

    def test_skip_rows(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("9,9\n-1,-2\n-3,-4\n")
        np.testing.assert_array_equal(load_chain_csv(path, skip_rows=1).log_lik, [[-1, -2], [-3, -4]])

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("1,2\n3,abc\n")
        with pytest.raises(ParseError) as info:
            load_chain_csv(path)
        assert info.value.details["row"] == 2
        assert info.value.details["column"] == 2
        assert info.value.exit_code == 2

    def test_empty_cell_in_first_row_is_not_a_header(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("1,,3\n4,5,6\n7,8,9\n")
        with pytest.raises(ParseError) as info:
            load_chain_csv(path)
        assert info.value.details["row"] == 1
        assert info.value.details["column"] == 2

    def test_short_row(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("1,2,3\n4,5\n6,7,8\n")
        with pytest.raises(ParseError) as info:
            load_chain_csv(path)
        assert info.value.details["row"] == 2

    def test_long_row(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("1,2\n3,4\n5,6,7\n")
        with pytest.raises(ParseError):
            load_chain_csv(path)

    def test_nan_cell(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("1,2\nnan,4\n")
        with pytest.raises(ParseError) as info:
            load_chain_csv(path)
        assert info.value.details["column"] == 1

    def test_single_row_is_too_few(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("y1,y2\n-1,-2\n")
        with pytest.raises(TooFewDraws):
            load_chain_csv(path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(InputMissing) as info:
            load_chain_dir(tmp_path / "nope")
        assert info.value.exit_code == 2
        assert info.value.to_record()["error"]["code"] == "IO"

    def test_empty_directory(self, tmp_path):
        with pytest.raises(InputMissing):
            load_chain_dir(tmp_path)

    def test_param_csv_drops_iter_column(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("iter,mu\n1,0.5\n2,0.25\n")
        names, values = load_param_csv(path)
        assert names == ("mu",)
        np.testing.assert_array_equal(values, [[0.5], [0.25]])

    def test_matrix_csv(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b\n-1,-2\n")
        np.testing.assert_array_equal(load_matrix_csv(path), [[-1, -2]])

    def test_directory_order_and_thread_count(self, tmp_path, rng):
        for name in ("b", "a", "c"):
            write_chain_csv(ChainDraws(rng.normal(size=(4, 2)), name), tmp_path)
        serial = load_chain_dir(tmp_path)
        threaded = load_chain_dir(tmp_path, threads=3)
        assert serial.chain_ids == ["a", "b", "c"]
        for left, right in zip(serial.chains, threaded.chains):
            np.testing.assert_array_equal(left.log_lik, right.log_lik)

    def test_scenario_file_becomes_provenance(self, tmp_path):
        write_chain_csv(_chain(), tmp_path)
        (tmp_path / "scenario.json").write_text('{"a": 10}\n')
        assert json.loads(load_chain_dir(tmp_path).provenance["scenario"]) == {"a": 10}


class TestSplitting:
    def test_halves_of_odd_chain(self):
        chain = _chain(n_draws=5)
        assert select_half(chain, "first").n_draws == 2
        assert select_half(chain, "second").n_draws == 3

    def test_too_short_to_split(self):
        with pytest.raises(TooFewDraws):
            select_half(_chain(n_draws=3), "first")

    def test_unknown_half(self):
        with pytest.raises(DomainError) as info:
            select_half(_chain(), "middle")
        assert info.value.module == "draws-core"
        assert info.value.exit_code == 3

    def test_concat_keeps_shared_params(self):
        a = ChainDraws(np.zeros((3, 2)), "a", np.zeros((3, 1)), ("mu",))
        b = ChainDraws(np.ones((2, 2)) * -1, "b", np.ones((2, 1)), ("mu",))
        merged = concat_chains([a, b], "ab")
        assert merged.n_draws == 5
        np.testing.assert_array_equal(merged.param("mu"), [0, 0, 0, 1, 1])

    def test_concat_drops_mismatched_params(self):
        a = ChainDraws(np.zeros((3, 2)), "a", np.zeros((3, 1)), ("mu",))
        b = ChainDraws(np.zeros((3, 2)), "b")
        assert concat_chains([a, b], "ab").params is None
