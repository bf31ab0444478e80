import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icegraph import data
from icegraph.errors import ConfigError, DataError, RecordRejected


def record_from_tops(tops_by_column, n_rows=40):
    """Build a record whose columns have layer tops at the given row lists."""
    n_cols = len(tops_by_column)
    mask = np.zeros((n_rows, n_cols), dtype=np.uint8)
    for c, rows in enumerate(tops_by_column):
        mask[list(rows), c] = 1
    coords = np.column_stack(
        [np.full(n_cols, 67.0), -48.0 + 0.001 * np.arange(n_cols), np.full(n_cols, 1200.0)]
    )
    return data.EchogramRecord(id="rec", mask=mask, geo=coords)


def stub_table(record_id, n_layers, n_columns=3):
    return data.ThicknessTable(
        record_id=record_id, layers=np.ones((n_layers, n_columns))
    )


class TestExtractThicknesses:
    def test_simple_subtraction(self):
        rec = record_from_tops([(10, 14, 19)])
        table = data.extract_thicknesses(rec)
        np.testing.assert_array_equal(table.layers[:, 0], [4.0, 5.0])

    def test_single_top_rejected(self):
        rec = record_from_tops([(10,)])
        with pytest.raises(RecordRejected, match="at least 2"):
            data.extract_thicknesses(rec)

    def test_inconsistent_counts_rejected_with_report(self):
        rec = record_from_tops([(10, 14, 19), (8, 12), (9, 13, 20)])
        with pytest.raises(RecordRejected, match="inconsistent layer counts"):
            data.extract_thicknesses(rec)

    def test_three_column_hand_oracle(self):
        tops = [(5, 9, 16, 20), (6, 8, 13, 21), (4, 10, 11, 19)]
        rec = record_from_tops(tops)
        table = data.extract_thicknesses(rec)
        expected = np.array(
            [
                [4.0, 2.0, 6.0],
                [7.0, 5.0, 1.0],
                [4.0, 8.0, 8.0],
            ]
        )
        np.testing.assert_array_equal(table.layers, expected)
        assert table.n_layers == 3

    def test_deepest_top_contributes_no_thickness(self):
        rec = record_from_tops([(10, 14, 19)])
        assert data.extract_thicknesses(rec).n_layers == 2


class TestFilterUsable:
    def test_paper_shaped_counts(self):
        tables = [stub_table(f"u{i}", 15 + i % 4) for i in range(1254)]
        tables += [stub_table(f"d{i}", 3 + i % 12) for i in range(3147 - 1254)]
        kept = data.filter_usable(tables)
        assert len(kept) == 1254
        assert all(t.record_id.startswith("u") for t in kept)

    def test_boundary_kept_and_dropped(self):
        assert data.filter_usable([stub_table("a", 15)]) != []
        assert data.filter_usable([stub_table("b", 14)]) == []

    def test_idempotent(self):
        tables = [stub_table(f"r{i}", 10 + i) for i in range(10)]
        once = data.filter_usable(tables)
        assert data.filter_usable(once) == once


class TestMakeSplits:
    def test_paper_scale_sizes(self):
        ids = [f"r{i}" for i in range(1254)]
        plans = data.make_splits(ids, master_seed=11)
        assert len(plans) == 5
        for plan in plans:
            assert (len(plan.train), len(plan.val), len(plan.test)) == (752, 251, 251)
            combined = set(plan.all_ids())
            assert len(combined) == 1254
            assert combined == set(ids)

    def test_minimum_corpus(self):
        plans = data.make_splits(list("abcde"), master_seed=0)
        for plan in plans:
            assert (len(plan.train), len(plan.val), len(plan.test)) == (3, 1, 1)

    def test_too_small_rejected(self):
        with pytest.raises(ConfigError):
            data.make_splits(["a", "b", "c", "d"], master_seed=0)

    def test_deterministic(self):
        ids = [f"r{i}" for i in range(37)]
        assert data.make_splits(ids, master_seed=5) == data.make_splits(ids, master_seed=5)

    def test_trials_differ(self):
        ids = [f"r{i}" for i in range(50)]
        plans = data.make_splits(ids, master_seed=1)
        assert len({plan.train for plan in plans}) == 5

    @given(st.integers(min_value=5, max_value=4000))
    @settings(max_examples=60)
    def test_size_rule_all_n(self, n):
        side = data._split_side_size(n)
        train = n - 2 * side
        assert train + 2 * side == n
        assert side >= 1 and train >= 1
        # 3:1:1 to within rounding: each side block is n/5 +- 0.5
        assert abs(side - n / 5) <= 0.5


class TestSyntheticCorpus:
    def test_deterministic_bit_identical(self):
        cfg = data.SyntheticConfig(n_records=3, n_layers=16, n_columns=24, seed=7)
        a = data.generate_synthetic(cfg)
        b = data.generate_synthetic(cfg)
        for ra, rb in zip(a, b):
            assert ra.id == rb.id
            np.testing.assert_array_equal(ra.mask, rb.mask)
            np.testing.assert_array_equal(ra.geo, rb.geo)

    def test_round_trip_extraction(self):
        cfg = data.SyntheticConfig(n_records=5, n_layers=16, n_columns=20, seed=3)
        for rec in data.generate_synthetic(cfg):
            table = data.extract_thicknesses(rec)
            assert table.n_layers == 16
            assert table.layers.min() >= 1.0

    def test_render_extract_identity(self):
        rng = np.random.default_rng(8)
        layers = rng.integers(1, 30, size=(16, 12))
        mask = data.render_mask(layers, surface_rows=10)
        rec = data.EchogramRecord(
            id="rt",
            mask=mask,
            geo=np.column_stack(
                [np.full(12, 67.0), -48 + 0.001 * np.arange(12), np.full(12, 1100.0)]
            ),
        )
        np.testing.assert_array_equal(
            data.extract_thicknesses(rec).layers, layers.astype(float)
        )

    def test_unusable_when_layers_below_threshold(self):
        cfg = data.SyntheticConfig(n_records=4, n_layers=12, n_columns=16, seed=1)
        tables = [data.extract_thicknesses(r) for r in data.generate_synthetic(cfg)]
        assert data.filter_usable(tables) == []

    def test_columns_spaced_at_footprint(self):
        cfg = data.SyntheticConfig(n_records=1, n_layers=16, n_columns=10, seed=2)
        rec = data.generate_synthetic(cfg)[0]
        from icegraph.geo import GeoCoordinate, haversine_central_angle

        spacing = [
            haversine_central_angle(
                GeoCoordinate(*rec.geo[i]), GeoCoordinate(*rec.geo[i + 1])
            )
            * 6_371_000.0
            for i in range(9)
        ]
        np.testing.assert_allclose(spacing, 14.5, rtol=1e-6)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            data.SyntheticConfig(n_records=0)
        with pytest.raises(ConfigError):
            data.SyntheticConfig(n_records=1, year_persistence=1.0)


class TestCorpusFiles:
    def test_write_load_round_trip(self, tmp_path):
        cfg = data.SyntheticConfig(n_records=3, n_layers=15, n_columns=10, seed=5)
        records = data.generate_synthetic(cfg)
        manifest = data.write_corpus(records, tmp_path)
        loaded = data.load_corpus(manifest)
        assert [r.id for r in loaded] == [r.id for r in records]
        for orig, back in zip(records, loaded):
            np.testing.assert_array_equal(orig.mask, back.mask)
            np.testing.assert_allclose(orig.geo, back.geo, rtol=0, atol=0)

    def test_write_is_byte_deterministic(self, tmp_path):
        cfg = data.SyntheticConfig(n_records=2, n_layers=15, n_columns=8, seed=9)
        for sub in ("a", "b"):
            data.write_corpus(data.generate_synthetic(cfg), tmp_path / sub)
        for rel in ["manifest.json", "masks/synth-0000.png", "geo/synth-0001.csv"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_corrupt_geo_row_count_named(self, tmp_path):
        cfg = data.SyntheticConfig(n_records=2, n_layers=15, n_columns=8, seed=4)
        manifest = data.write_corpus(data.generate_synthetic(cfg), tmp_path)
        geo_file = tmp_path / "geo" / "synth-0001.csv"
        lines = geo_file.read_text().splitlines()
        geo_file.write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(DataError, match="synth-0001"):
            data.load_corpus(manifest)

    def test_bad_manifest_format(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"format": "something-else"}))
        with pytest.raises(DataError, match="unknown corpus format"):
            data.load_corpus(path)


class TestPrepareTrials:
    def corpus(self, n=8, layers=16, seed=2):
        cfg = data.SyntheticConfig(n_records=n, n_layers=layers, n_columns=12, seed=seed)
        return data.generate_synthetic(cfg)

    def test_pipeline_counts_and_normalization(self):
        trials, report = data.prepare_trials(self.corpus(), master_seed=3)
        assert report.usable == 8
        assert len(trials) == 5
        pt = trials[0]
        stacked = np.concatenate(
            [g.features for s in pt.sequences.values() for g in s.graphs]
        )
        np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-9)
        pooled = np.concatenate(
            [
                s.adjacency.weights[~np.eye(s.n_nodes, dtype=bool)]
                for s in pt.sequences.values()
            ]
        )
        assert pooled.min() == 0.0 and pooled.max() == 1.0

    def test_targets_stay_raw_pixels(self):
        records = self.corpus()
        tables = {r.id: data.extract_thicknesses(r) for r in records}
        trials, _ = data.prepare_trials(records, master_seed=3)
        for rid, seq in trials[0].sequences.items():
            raw = tables[rid].layers
            np.testing.assert_array_equal(seq.targets[:, 9], raw[0])

    def test_train_scope_stats_differ_per_trial(self):
        trials, _ = data.prepare_trials(
            self.corpus(n=10), master_seed=1, norm_scope="train"
        )
        means = {tuple(t.feature_stats.mean) for t in trials}
        assert len(means) > 1
        # normalization must still be applied to every sequence
        for t in trials:
            for s in t.sequences.values():
                assert s.adjacency.normalization == "minmax"

    def test_rejections_reported_not_fatal(self):
        records = self.corpus(n=7)
        bad_mask = records[0].mask.copy()
        bad_mask[:, 0] = 0
        bad_mask[5, 0] = 1  # single top in column 0
        records[0] = data.EchogramRecord(
            id=records[0].id, mask=bad_mask, geo=records[0].geo
        )
        trials, report = data.prepare_trials(records, master_seed=0)
        assert report.usable == 6
        assert records[0].id in report.rejected
        assert all(records[0].id not in t.sequences for t in trials)

    def test_save_load_round_trip(self, tmp_path):
        trials, _ = data.prepare_trials(self.corpus(), master_seed=3)
        for fmt, name in (("json", "t0.json"), ("flat", "t0.flat")):
            path = tmp_path / name
            data.save_prepared_trial(trials[0], path, fmt=fmt)
            back = data.load_prepared_trial(path)
            assert back.split == trials[0].split
            assert back.norm_scope == trials[0].norm_scope
            for rid, seq in trials[0].sequences.items():
                np.testing.assert_array_equal(back.sequences[rid].targets, seq.targets)
                np.testing.assert_array_equal(
                    back.sequences[rid].adjacency.weights, seq.adjacency.weights
                )
                for g0, g1 in zip(seq.graphs, back.sequences[rid].graphs):
                    np.testing.assert_array_equal(g0.features, g1.features)

    def test_prepared_file_bytes_deterministic(self, tmp_path):
        for sub in ("x", "y"):
            trials, _ = data.prepare_trials(self.corpus(), master_seed=3)
            data.save_prepared_trial(trials[1], tmp_path / f"{sub}.json")
            data.save_prepared_trial(trials[1], tmp_path / f"{sub}.flat", fmt="flat")
        assert (tmp_path / "x.json").read_bytes() == (tmp_path / "y.json").read_bytes()
        assert (tmp_path / "x.flat").read_bytes() == (tmp_path / "y.flat").read_bytes()
