import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shelfid.balancing import (
    DepthSweepError,
    Record,
    by_class,
    class_histogram,
    default_depth_grid,
    depth_sweep,
    make_validation_split,
    read_manifest,
    resample_to_depth,
    write_manifest,
    write_sweep_report,
)
from shelfid.errors import ConfigurationError, DataError


def manifest(sizes: dict[str, int]) -> list[Record]:
    return [Record(f"{c}/{i}.png", c) for c, n in sizes.items() for i in range(n)]


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        recs = [Record("/abs/a.png", "cola", "train", False), Record("/abs/b.png", "chips", "val", True)]
        path = tmp_path / "m.csv"
        write_manifest(recs, path)
        assert path.read_text().splitlines()[0] == "image_ref,class_label,split,augment"
        assert b"\r\n" not in path.read_bytes()
        assert read_manifest(path) == recs

    def test_relative_refs_resolved(self, tmp_path):
        (tmp_path / "m.csv").write_text("image_ref,class_label,split,augment\nimgs/a.png,x,train,0\n")
        assert read_manifest(tmp_path / "m.csv")[0].image_ref == str(tmp_path / "imgs/a.png")

    @pytest.mark.parametrize("body", [
        "image_ref,label,split,augment\n",
        "image_ref,class_label,split,augment\na.png,x,train,2\n",
        "image_ref,class_label,split,augment\na.png,,train,0\n",
        "image_ref,class_label,split,augment\na.png,x,holdout,0\n",
    ])
    def test_invalid(self, tmp_path, body):
        (tmp_path / "m.csv").write_text(body)
        with pytest.raises(DataError):
            read_manifest(tmp_path / "m.csv")

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            read_manifest(tmp_path / "absent.csv")


class TestValidationSplit:
    def test_counts(self):
        train, val, warnings = make_validation_split(manifest({"a": 20, "b": 2}), 3, seed=0)
        hist_t, hist_v = class_histogram(train), class_histogram(val)
        assert (hist_v["a"], hist_t["a"]) == (3, 17)
        assert (hist_v["b"], hist_t["b"]) == (0, 2)
        assert len(warnings) == 1 and "'b'" in warnings[0]
        assert all(r.split == "val" for r in val)

    def test_boundary_class_kept_in_train(self):
        _, val, warnings = make_validation_split(manifest({"a": 3}), 3, seed=0)
        assert not val and warnings

    def test_seeded(self):
        m = manifest({"a": 30, "b": 12, "c": 7})
        assert make_validation_split(m, 4, seed=11) == make_validation_split(m, 4, seed=11)
        assert make_validation_split(m, 4, seed=11) != make_validation_split(m, 4, seed=12)

    def test_disjoint(self):
        train, val, _ = make_validation_split(manifest({"a": 30, "b": 12}), 5, seed=1)
        assert not {r.image_ref for r in train} & {r.image_ref for r in val}

    @pytest.mark.parametrize("n", [0, -2])
    def test_bad_count(self, n):
        with pytest.raises(ConfigurationError):
            make_validation_split(manifest({"a": 5}), n)

    def test_rejects_non_train(self):
        with pytest.raises(DataError):
            make_validation_split([Record("x", "a", "val")], 1)


class TestResample:
    def test_cyclic_oversample(self):
        out = resample_to_depth(manifest({"k": 2}), 5, seed=0)
        assert [r.image_ref for r in out] == ["k/0.png", "k/1.png", "k/0.png", "k/1.png", "k/0.png"]
        assert [r.augment for r in out] == [False, False, True, True, True]

    def test_exact_depth_unchanged(self):
        m = manifest({"k": 5})
        assert resample_to_depth(m, 5, seed=0) == m

    def test_undersample_seed_7(self):
        out = resample_to_depth(manifest({"k": 10}), 5, seed=7)
        # frozen from a first run with seed 7
        assert [r.image_ref for r in out] == [f"k/{i}.png" for i in (0, 1, 3, 7, 8)]
        assert not any(r.augment for r in out)
        assert out == resample_to_depth(manifest({"k": 10}), 5, seed=7)

    def test_empty(self):
        with pytest.raises(DataError):
            resample_to_depth([], 4)

    @pytest.mark.parametrize("depth", [0, -1, 2.5])
    def test_bad_depth(self, depth):
        with pytest.raises(ConfigurationError):
            resample_to_depth(manifest({"k": 3}), depth)

    @given(st.dictionaries(st.text("abcdef", min_size=1, max_size=3), st.integers(1, 40), min_size=1, max_size=8),
           st.integers(1, 50), st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_properties(self, sizes, depth, seed):
        m = manifest(sizes)
        out = resample_to_depth(m, depth, seed)
        hist = class_histogram(out)
        assert set(hist) == set(sizes)
        assert set(hist.values()) == {depth}
        originals = set(m)
        for label, recs in by_class(out).items():
            refs = [r.image_ref for r in recs]
            if sizes[label] >= depth:
                assert len(set(refs)) == depth and not any(r.augment for r in recs)
            else:
                assert set(refs) == {r.image_ref for r in m if r.class_label == label}
                assert sum(r.augment for r in recs) == depth - sizes[label]
        assert all(r in originals or r.augment for r in out)
        assert out == resample_to_depth(m, depth, seed)


class TestDepthSweep:
    def test_tie_prefers_smaller(self):
        acc = {5: 0.7, 10: 0.9, 20: 0.9}
        best, table = depth_sweep([5, 10, 20], lambda d: d, lambda d: acc[d])
        assert best == 10 and table == [(5, 0.7), (10, 0.9), (20, 0.9)]

    def test_single(self):
        assert depth_sweep([7], lambda d: d, lambda d: 0.1)[0] == 7

    def test_two_rows(self):
        acc = {4: 0.5, 8: 0.8}
        best, table = depth_sweep([4, 8], lambda d: d, lambda d: acc[d])
        assert best == 8 and len(table) == 2

    def test_nan_never_wins(self):
        acc = {4: float("nan"), 8: 0.1}
        assert depth_sweep([4, 8], lambda d: d, lambda d: acc[d])[0] == 8

    def test_failure_carries_depth(self):
        def train(d):
            if d == 16:
                raise RuntimeError("boom")
            return d

        with pytest.raises(DepthSweepError) as info:
            depth_sweep([8, 16], train, lambda m: 0.5)
        assert info.value.depth == 16 and isinstance(info.value.__cause__, RuntimeError)

    @pytest.mark.parametrize("depths", [[], [4, 4]])
    def test_invalid(self, depths):
        with pytest.raises(ConfigurationError):
            depth_sweep(depths, lambda d: d, lambda d: 0.0)

    def test_report(self):
        buf = io.StringIO()
        write_sweep_report([(4, 0.5), (8, 0.75)], buf)
        assert buf.getvalue() == "depth,macro_accuracy\n4,0.5\n8,0.75\n"


def test_default_grid():
    assert default_depth_grid(manifest({"a": 100, "b": 3})) == [4, 8, 16, 32, 64]
    assert default_depth_grid(manifest({"a": 5000})) == [4, 8, 16, 32, 64, 128, 256, 512]
