import pytest
import torch

from bannoise.data import (
    RECORD_HEADER, dataset_from_path_or_synthetic, export_directory, load_directory_dataset,
    make_synthetic_dataset, read_record_file, write_record_file,
)
from bannoise.errors import IngestionError, InputError


def test_synthetic_is_balanced_and_disjoint():
    d = make_synthetic_dataset(classes=5, per_class=50, image_size=8, seed=1)
    assert d.image_shape == (3, 8, 8)
    for split, per in (("train", 50), ("val", 12), ("test", 12)):
        counts = torch.bincount(d.splits[split].labels, minlength=5)
        assert (counts == per).all()
    ids = torch.cat(list(d.ids.values()))
    assert len(ids.unique()) == len(ids)


def test_synthetic_is_reproducible_and_quantised():
    a = make_synthetic_dataset(classes=3, per_class=50, image_size=8, seed=4)
    b = make_synthetic_dataset(classes=3, per_class=50, image_size=8, seed=4)
    assert torch.equal(a.train.inputs, b.train.inputs)
    x = a.train.inputs
    assert torch.equal(torch.round(x * 255) / 255, x)
    assert x.min() >= 0 and x.max() <= 1


def test_synthetic_rejects_tiny_requests():
    with pytest.raises(InputError):
        make_synthetic_dataset(per_class=10)
    with pytest.raises(InputError):
        make_synthetic_dataset(classes=1)


def test_defender_subset_draws_from_held_out_pool(small_data):
    sub, ids = small_data.defender_subset(10, seed=0)
    assert len(sub) == 10
    assert set(ids.tolist()) <= set(small_data.ids["val"].tolist())
    again, ids2 = small_data.defender_subset(10, seed=0)
    assert torch.equal(ids, ids2)
    with pytest.raises(InputError):
        small_data.defender_subset(10_000, seed=0)


def test_fraction_count_is_capped(small_data):
    assert small_data.fraction_count(0.05) == round(0.05 * len(small_data.train))
    assert small_data.fraction_count(1.0) == len(small_data.val)


@pytest.mark.parametrize("layout", ["folders", "records"])
def test_export_and_reload_is_exact(tmp_path, layout):
    d = make_synthetic_dataset(classes=3, per_class=50, image_size=8, seed=2)
    export_directory(d, tmp_path, layout)
    back = load_directory_dataset(tmp_path, layout)
    assert back.num_classes == 3
    for s in ("train", "val", "test"):
        if layout == "records":
            assert torch.equal(back.splits[s].inputs, d.splits[s].inputs)
            assert torch.equal(back.splits[s].labels, d.splits[s].labels)
        else:
            # folders are read class by class, so compare as multisets per class
            for c in range(3):
                got = back.splits[s].inputs[back.splits[s].labels == c]
                want = d.splits[s].inputs[d.splits[s].labels == c]
                assert torch.equal(got, want)


def test_flat_folder_is_split_by_fraction(tmp_path):
    d = make_synthetic_dataset(classes=2, per_class=50, image_size=8, seed=2)
    export_directory(d, tmp_path, "folders")
    back = load_directory_dataset(tmp_path / "train", "folders", seed=1)
    assert len(back.train) + len(back.val) + len(back.test) == 100
    assert len(back.val) == 10


def test_record_errors(tmp_path):
    bad = tmp_path / "x.bin"
    bad.write_bytes(b"abc")
    with pytest.raises(IngestionError):
        read_record_file(bad)
    bad.write_bytes(RECORD_HEADER.pack(b"WRONGMAG", 0, 1, 1, 1, 2))
    with pytest.raises(IngestionError):
        read_record_file(bad)
    bad.write_bytes(RECORD_HEADER.pack(b"BANDS001", 2, 1, 1, 1, 2) + b"\x00\x00")
    with pytest.raises(IngestionError, match="expected"):
        read_record_file(bad)
    bad.write_bytes(RECORD_HEADER.pack(b"BANDS001", 1, 1, 1, 1, 2) + b"\x05\x00")
    with pytest.raises(IngestionError, match="outside"):
        read_record_file(bad)


def test_record_label_width(tmp_path, small_data):
    with pytest.raises(InputError):
        write_record_file(tmp_path / "big.bin", small_data.val, 300)


def test_missing_and_corrupt_directories(tmp_path):
    with pytest.raises(IngestionError):
        load_directory_dataset(tmp_path / "nope")
    (tmp_path / "cat").mkdir()
    (tmp_path / "cat" / "a.png").write_bytes(b"not a png")
    with pytest.raises(IngestionError) as info:
        load_directory_dataset(tmp_path)
    assert info.value.path.name == "a.png"
    with pytest.raises(InputError):
        load_directory_dataset(tmp_path, layout="tfrecord")


def test_spec_string_dispatch(tmp_path):
    d = dataset_from_path_or_synthetic("synthetic:5", classes=2, per_class=50, image_size=8)
    assert d.source == "synthetic" and d.seed == 5
    export_directory(d, tmp_path, "records")
    assert dataset_from_path_or_synthetic(tmp_path).source == "directory"
