import pytest
import torch

from vemkd.datagen import (
    DatasetSpec,
    edge_map,
    generate_shapes_dataset,
    load_batches,
    load_manifest,
    load_split,
)
from vemkd.errors import ConfigError, DataIntegrityError


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dg") / "shapes"
    spec = DatasetSpec(num_train=24, num_val=8, seed=7)
    generate_shapes_dataset(spec, root)
    return root, spec


class TestGeneration:
    def test_same_seed_byte_identical(self, tmp_path, dataset):
        root, spec = dataset
        again = tmp_path / "again"
        generate_shapes_dataset(spec, again)
        for name in ("train_x.f32", "train_y.f32", "val_x.f32", "val_y.f32", "manifest.json"):
            assert (root / name).read_bytes() == (again / name).read_bytes(), name

    def test_file_size_arithmetic(self, dataset):
        root, spec = dataset
        n = spec.num_train
        total = (root / "train_x.f32").stat().st_size + (root / "train_y.f32").stat().st_size
        assert total == n * 2 * 3 * 32 * 32 * 4

    def test_value_range(self, dataset):
        root, _ = dataset
        manifest = load_manifest(root)
        for split in ("train", "val"):
            x, y = load_split(manifest, split)
            assert x.min() >= -1.0 and x.max() <= 1.0
            assert y.min() >= -1.0 and y.max() <= 1.0
            assert torch.isfinite(x).all() and torch.isfinite(y).all()

    def test_edge_consistency(self, dataset):
        root, _ = dataset
        manifest = load_manifest(root)
        x, y = load_split(manifest, "train")
        hits = 0
        for i in range(x.shape[0]):
            rederived = torch.from_numpy(edge_map(y[i].numpy()))
            if (rederived - x[i]).abs().mean() < 0.1:
                hits += 1
        assert hits / x.shape[0] >= 0.95

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            DatasetSpec(image_size=48).validate()


class TestLoading:
    def test_checksum_mismatch_detected(self, tmp_path, dataset):
        root, spec = dataset
        corrupt = tmp_path / "corrupt"
        generate_shapes_dataset(spec, corrupt)
        path = corrupt / "train_x.f32"
        raw = bytearray(path.read_bytes())
        raw[100] ^= 0xFF
        path.write_bytes(bytes(raw))
        manifest = load_manifest(corrupt)
        with pytest.raises(DataIntegrityError, match="checksum"):
            load_split(manifest, "train")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataIntegrityError):
            load_manifest(tmp_path / "nowhere")

    def test_batch_count(self, dataset):
        root, spec = dataset
        manifest = load_manifest(root)
        batches = list(load_batches(manifest, "train", batch_size=5, seed=0, epochs=1))
        assert len(batches) == spec.num_train // 5
        assert batches[0][0].shape == (5, 3, 32, 32)

    def test_same_seed_same_sequence(self, dataset):
        root, _ = dataset
        manifest = load_manifest(root)
        a = list(load_batches(manifest, "train", 4, seed=3, epochs=2))
        b = list(load_batches(manifest, "train", 4, seed=3, epochs=2))
        for (xa, ya), (xb, yb) in zip(a, b):
            assert torch.equal(xa, xb) and torch.equal(ya, yb)

    def test_epochs_reshuffle(self, dataset):
        root, _ = dataset
        manifest = load_manifest(root)
        batches = list(load_batches(manifest, "train", 8, seed=3, epochs=2))
        first_epoch = torch.cat([b[0] for b in batches[:3]])
        second_epoch = torch.cat([b[0] for b in batches[3:]])
        assert not torch.equal(first_epoch, second_epoch)

    def test_val_never_shuffled(self, dataset):
        root, _ = dataset
        manifest = load_manifest(root)
        x, y = load_split(manifest, "val")
        batches = list(load_batches(manifest, "val", 4, seed=99, epochs=1))
        assert torch.equal(torch.cat([b[0] for b in batches]), x)

    def test_unknown_split(self, dataset):
        root, _ = dataset
        manifest = load_manifest(root)
        with pytest.raises(ConfigError):
            load_split(manifest, "test")
