import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gbmseg import dataset
from gbmseg.dataset import (DatasetManifest, SampleEntry, load_sample, scan_dataset, split_counts,
                            split_manifest)
from gbmseg.errors import ConfigurationError, ValidationError

from conftest import write_png


@pytest.fixture(scope="module")
def full_size_tree(tmp_path_factory):
    # 158 tumorous + 98 normal images, the per-folder counts quoted for the source dataset
    root = tmp_path_factory.mktemp("full") / "data"
    px = np.zeros((4, 4), np.uint8)
    for i in range(158):
        write_png(root / "yes" / f"y{i:03d}.png", px)
    for i in range(98):
        write_png(root / "no" / f"n{i:03d}.png", px)
    return root


def test_scan_labels_follow_folders(three_file_tree):
    m = scan_dataset(three_file_tree)
    assert len(m) == 3
    assert {e.id: e.label for e in m.entries} == {"yes/a.png": 1, "yes/b.png": 1, "no/c.png": 0}
    assert [e.id for e in m.entries] == sorted(e.id for e in m.entries)
    assert all(e.split == "unassigned" for e in m.entries)


def test_scan_empty_folders(tmp_path):
    (tmp_path / "yes").mkdir()
    (tmp_path / "no").mkdir()
    assert len(scan_dataset(tmp_path)) == 0


def test_scan_missing_folder_names_it(tmp_path):
    (tmp_path / "yes").mkdir()
    with pytest.raises(ConfigurationError, match="'no'"):
        scan_dataset(tmp_path)


def test_scan_skips_corrupt_files(three_file_tree, caplog):
    (three_file_tree / "yes" / "broken.png").write_bytes(b"not a png at all")
    m = scan_dataset(three_file_tree)
    assert len(m) == 3
    assert m.skipped == 1
    assert "broken.png" in caplog.text


def test_scan_full_size_fixture(full_size_tree):
    m = scan_dataset(full_size_tree)
    assert len(m) == 256
    assert sum(e.label for e in m.entries) == 158


def test_scan_is_idempotent(full_size_tree, tmp_path):
    a = scan_dataset(full_size_tree)
    b = scan_dataset(full_size_tree)
    assert a.dumps() == b.dumps()


def test_scan_picks_up_masks(tmp_path):
    write_png(tmp_path / "yes" / "a.png", np.zeros((4, 4)))
    write_png(tmp_path / "no" / "b.png", np.zeros((4, 4)))
    write_png(tmp_path / "masks" / "yes" / "a.png", np.zeros((4, 4)))
    m = scan_dataset(tmp_path)
    by_id = {e.id: e for e in m.entries}
    assert by_id["yes/a.png"].mask_path == tmp_path / "masks" / "yes" / "a.png"
    assert by_id["no/b.png"].mask_path is None


def _manifest(n, n_pos=None):
    n_pos = n // 2 if n_pos is None else n_pos
    entries = tuple(SampleEntry(id=f"e{i:04d}", path=f"/x/e{i}.png", label=int(i < n_pos)) for i in range(n))
    return DatasetManifest(root="/x", entries=entries)


def test_split_ten_entries_sizes_and_determinism():
    m = _manifest(10)
    a = split_manifest(m, (0.7, 0.15, 0.15), seed=1)
    sizes = tuple(a.split_sizes().values())
    assert sizes in {(7, 1, 2), (7, 2, 1)}
    b = split_manifest(m, (0.7, 0.15, 0.15), seed=1)
    assert a == b


def test_split_all_train():
    a = split_manifest(_manifest(10), (1.0, 0.0, 0.0), seed=3)
    assert a.split_sizes() == {"train": 10, "validation": 0, "test": 0}


def test_split_is_stratified_on_full_size_fixture(full_size_tree):
    m = split_manifest(scan_dataset(full_size_tree), (0.7, 0.15, 0.15), seed=42)
    overall = 158 / 256
    for name in ("train", "validation", "test"):
        entries = m.split(name)
        frac = sum(e.label for e in entries) / len(entries)
        assert abs(frac - overall) <= 0.10, (name, frac)


def test_split_rejects_bad_ratios():
    with pytest.raises(ConfigurationError):
        split_manifest(_manifest(10), (0.5, 0.2, 0.2))
    with pytest.raises(ConfigurationError):
        split_manifest(_manifest(0), (0.7, 0.15, 0.15))


def test_split_rejects_starved_split():
    with pytest.raises(ConfigurationError, match="validation"):
        split_manifest(_manifest(10), (0.95, 0.04, 0.01))


@given(n=st.integers(1, 400),
       raw=st.tuples(st.integers(0, 100), st.integers(0, 100), st.integers(0, 100)).filter(lambda t: sum(t) > 0))
def test_split_counts_within_one_of_exact(n, raw):
    ratios = [r / sum(raw) for r in raw]
    counts = split_counts(n, ratios)
    assert sum(counts) == n
    assert all(abs(c - r * n) <= 1 for c, r in zip(counts, ratios))


@given(n=st.integers(10, 120), n_pos=st.integers(0, 120), seed=st.integers(0, 2**32 - 1))
def test_split_partitions_entries(n, n_pos, seed):
    m = _manifest(n, min(n_pos, n))
    s = split_manifest(m, (0.6, 0.2, 0.2), seed)
    sizes = s.split_sizes()
    assert sum(sizes.values()) == n
    assert all(e.split in ("train", "validation", "test") for e in s.entries)
    assert [e.id for e in s.entries] == [e.id for e in m.entries]
    assert s == split_manifest(m, (0.6, 0.2, 0.2), seed)


def test_manifest_json_layout_and_round_trip(three_file_tree, tmp_path):
    m = split_manifest(scan_dataset(three_file_tree), (1.0, 0.0, 0.0), seed=5)
    path = tmp_path / "out" / "m.json"
    m.save(path)
    data = json.loads(path.read_text())
    assert list(data) == ["root", "seed", "split_ratios", "entries"]
    assert list(data["entries"][0]) == ["id", "path", "label", "split"]
    assert data["root"] == "../data"
    back = DatasetManifest.load(path)
    assert back == m


def test_sample_entry_rejects_bad_label():
    with pytest.raises(ValidationError):
        SampleEntry(id="a", path="a.png", label=2)


def test_duplicate_ids_rejected():
    e = SampleEntry(id="a", path="a.png", label=1)
    with pytest.raises(ValidationError):
        DatasetManifest(root=".", entries=(e, e))


def test_load_sample_lossless(tmp_path):
    path = write_png(tmp_path / "yes" / "p.png", np.array([[0, 85], [170, 255]]))
    s = load_sample(SampleEntry(id="yes/p.png", path=path, label=1))
    assert s.pixels.tolist() == [[0, 85], [170, 255]]
    assert (s.height, s.width) == (2, 2)
    assert not s.needs_grayscale


def test_load_sample_missing_file(three_file_tree):
    m = scan_dataset(three_file_tree)
    m.entries[0].path.unlink()
    with pytest.raises(OSError):
        load_sample(m.entries[0])


def test_load_sample_keeps_rgb(tmp_path):
    rgb = np.zeros((3, 5, 3), np.uint8)
    rgb[..., 0] = 200
    path = write_png(tmp_path / "rgb.png", rgb, mode="RGB")
    s = load_sample(SampleEntry(id="rgb.png", path=path, label=0))
    assert s.pixels.shape == (3, 5, 3)
    assert s.needs_grayscale


def test_load_sample_zero_area(monkeypatch, tmp_path):
    monkeypatch.setattr(dataset, "_read_pixels", lambda p: np.zeros((0, 4), np.uint8))
    with pytest.raises(ValidationError, match="zero-area"):
        load_sample(SampleEntry(id="z.png", path=tmp_path / "z.png", label=0))
