import numpy as np
import pytest

from divkd import data
from divkd.tensor import Tensor


def _fake_cifar_dir(tmp_path, variant, n_train=4, n_test=3):
    rng = np.random.default_rng(0)
    classes = 10 if variant == "cifar10" else 100
    files = data.CIFAR10_TRAIN if variant == "cifar10" else data.CIFAR100_TRAIN
    test_files = data.CIFAR10_TEST if variant == "cifar10" else data.CIFAR100_TEST
    written = {}
    for name in files + test_files:
        n = n_test if name in test_files else n_train
        px = rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8)
        lb = rng.integers(0, classes, n)
        data.write_cifar_records(tmp_path / name, px, lb, variant, coarse=rng.integers(0, 20, n))
        written[name] = (px, lb)
    return written


def test_two_hand_built_records(tmp_path):
    rec = bytearray()
    px = np.arange(2 * 3072, dtype=np.int64).reshape(2, 3072) % 256
    for label, row in zip((7, 2), px):
        rec.append(label)
        rec.extend(bytes(row.astype(np.uint8)))
    path = tmp_path / "b.bin"
    path.write_bytes(bytes(rec))
    pixels, labels = data.read_cifar_records(path, "cifar10")
    assert labels.tolist() == [7, 2]
    assert pixels.reshape(2, -1).tolist() == px.tolist()
    # channel-major layout: first 1024 bytes are red
    assert pixels[0, 1, 0, 0] == 1024 % 256


def test_cifar100_uses_fine_label(tmp_path):
    rec = bytes([5, 42]) + bytes(3072)
    (tmp_path / "x.bin").write_bytes(rec)
    _, labels = data.read_cifar_records(tmp_path / "x.bin", "cifar100")
    assert labels.tolist() == [42]


def test_bad_record_size(tmp_path):
    (tmp_path / "x.bin").write_bytes(bytes(3073 + 5))
    with pytest.raises(ValueError, match="multiple"):
        data.read_cifar_records(tmp_path / "x.bin", "cifar10")


@pytest.mark.parametrize("variant", ["cifar10", "cifar100"])
def test_load_cifar_round_trip(tmp_path, variant):
    written = _fake_cifar_dir(tmp_path, variant)
    before = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    train, test = data.load_cifar(tmp_path, variant)
    assert train.num_classes == (10 if variant == "cifar10" else 100)
    names = data.CIFAR10_TRAIN if variant == "cifar10" else data.CIFAR100_TRAIN
    px = np.concatenate([written[n][0] for n in names])
    assert train.labels.tolist() == np.concatenate([written[n][1] for n in names]).tolist()
    restored = np.rint(train.denormalize() * 255).astype(np.uint8)
    assert np.array_equal(restored, px)
    assert len(test) == 3
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == before


def test_missing_files_listed(tmp_path):
    with pytest.raises(FileNotFoundError, match="data_batch_1.bin"):
        data.load_cifar(tmp_path, "cifar10")


def test_flip_twice_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 3, 8, 8))
    once = data.crop_flip(x, np.full((3, 2), 4), np.ones(3, bool), pad=4)
    twice = data.crop_flip(once, np.full((3, 2), 4), np.ones(3, bool), pad=4)
    assert np.array_equal(twice, x)
    assert np.array_equal(once, x[:, :, :, ::-1])


def test_centered_crop_is_identity():
    x = np.random.default_rng(1).standard_normal((2, 3, 32, 32))
    assert np.array_equal(data.crop_flip(x, np.full((2, 2), 4), np.zeros(2, bool), pad=4), x)


def test_crop_shifts_and_zero_pads():
    x = np.ones((1, 1, 4, 4))
    out = data.crop_flip(x, np.array([[0, 0]]), np.zeros(1, bool), pad=1)
    assert out[0, 0, 0].tolist() == [0, 0, 0, 0] and out[0, 0, 1].tolist() == [0, 1, 1, 1]


def test_augment_deterministic_and_shape_preserving():
    x = np.random.default_rng(2).standard_normal((5, 3, 32, 32))
    a = data.augment(x, np.random.default_rng(9))
    b = data.augment(x, np.random.default_rng(9))
    assert np.array_equal(a, b) and a.shape == x.shape


def test_batch_indices_cover_every_sample_once():
    rng = np.random.default_rng(3)
    for n, bs in ((10, 3), (129, 128), (256, 128), (5, 8)):
        batches = data.batch_indices(n, bs, rng)
        assert sorted(np.concatenate(batches).tolist()) == list(range(n))
        assert all(len(b) >= 2 for b in batches)


def test_synthetic_determinism_and_balance():
    a, _ = data.synthetic_dataset(2, 10, seed=4)
    b, _ = data.synthetic_dataset(2, 10, seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert len(a) == 20 and np.bincount(a.labels).tolist() == [10, 10]


def test_synthetic_groups_make_siblings_closer():
    train, _ = data.synthetic_dataset(6, 40, image_size=8, margin=3.0, noise=0.1, jitter=0, groups=2,
                                      group_share=0.8, seed=8)
    means = np.stack([train.images[train.labels == c].mean(0).ravel() for c in range(6)])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    same = [d[i, j] for i in range(6) for j in range(i + 1, 6) if i % 2 == j % 2]
    diff = [d[i, j] for i in range(6) for j in range(i + 1, 6) if i % 2 != j % 2]
    assert max(same) < min(diff)


def test_synthetic_groups_default_off_is_unchanged():
    a, _ = data.synthetic_dataset(3, 5, image_size=8, seed=1)
    b, _ = data.synthetic_dataset(3, 5, image_size=8, seed=1, groups=0, group_share=0.9)
    assert np.array_equal(a.images, b.images)


def test_synthetic_rejects_bad_spec():
    with pytest.raises(ValueError):
        data.synthetic_dataset(1, 10)


def test_synthetic_large_margin_linearly_separable():
    train, _ = data.synthetic_dataset(4, 25, image_size=8, margin=5.0, jitter=0, seed=5)
    x = train.images.reshape(len(train), -1)
    y = train.labels
    # one-layer softmax regression trained by plain gradient descent
    w = np.zeros((x.shape[1], 4))
    onehot = np.eye(4)[y]
    for _ in range(300):
        z = x @ w
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= 0.01 * x.T @ (p - onehot) / len(y)
    assert np.mean(np.argmax(x @ w, 1) != y) == 0.0


def test_dataset_container_round_trip(tmp_path):
    train, _ = data.synthetic_dataset(3, 4, image_size=8, seed=6)
    data.save_dataset(tmp_path / "d.bin", train)
    back = data.load_dataset(tmp_path / "d.bin")
    assert np.array_equal(back.images, train.images) and np.array_equal(back.labels, train.labels)
    assert back.num_classes == 3 and back.split == "train"


def test_data_root_env_fallback(monkeypatch, tmp_path):
    monkeypatch.setenv("DIVKD_DATA_ROOT", str(tmp_path))
    assert data.data_root(None) == tmp_path
    assert data.data_root("/x") == type(tmp_path)("/x")


def test_images_feed_tensors():
    train, _ = data.synthetic_dataset(2, 3, image_size=8, seed=7)
    assert Tensor(train.images[:2]).shape == (2, 3, 8, 8)
