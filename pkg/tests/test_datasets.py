import numpy as np
import pytest

from xpose.datasets import SHAPES, load_cifar10_bin, make_synthetic_shapes, save_cifar10_bin
from xpose.exceptions import DatasetFormatError


def record(label, r, g, b):
    planes = [np.full(1024, v, np.uint8) for v in (r, g, b)]
    return bytes([label]) + b"".join(p.tobytes() for p in planes)


def test_two_hand_built_records(tmp_path):
    path = tmp_path / "batch.bin"
    second = bytearray(record(7, 0, 0, 0))
    second[1 + 1024 + 32 * 2 + 5] = 255  # green plane, row 2, col 5
    path.write_bytes(record(3, 255, 0, 51) + bytes(second))
    X, y = load_cifar10_bin(path)
    assert X.shape == (2, 32, 32, 3) and X.dtype == np.float32
    assert y.tolist() == [3, 7]
    np.testing.assert_allclose(X[0, 10, 10], [1.0, 0.0, 0.2], rtol=1e-6)
    assert X[1, 2, 5].tolist() == [0.0, 1.0, 0.0]
    assert np.count_nonzero(X[1]) == 1


def test_all_zero_record(tmp_path):
    path = tmp_path / "zero.bin"
    path.write_bytes(bytes(3073))
    X, y = load_cifar10_bin(path)
    assert y.tolist() == [0] and not X.any()


def test_truncated_file_reports_record_size(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(bytes(3073 + 100))
    with pytest.raises(DatasetFormatError, match="3073"):
        load_cifar10_bin(path)


def test_label_out_of_range(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(record(0, 1, 1, 1) + record(12, 1, 1, 1))
    with pytest.raises(DatasetFormatError, match="record 1"):
        load_cifar10_bin(path)


def test_save_rejects_wrong_geometry(tmp_path):
    with pytest.raises(DatasetFormatError):
        save_cifar10_bin(tmp_path / "x.bin", np.zeros((1, 16, 16, 3)), [0])
    with pytest.raises(DatasetFormatError):
        save_cifar10_bin(tmp_path / "x.bin", np.zeros((1, 32, 32, 3)), [10])


def test_synthetic_set_is_balanced_and_deterministic():
    a = make_synthetic_shapes(100, 40, seed=5)
    b = make_synthetic_shapes(100, 40, seed=5)
    assert a.X_train.tobytes() == b.X_train.tobytes() and a.y_test.tolist() == b.y_test.tolist()
    assert np.bincount(a.y_train).tolist() == [10] * 10
    assert np.bincount(a.y_test).tolist() == [4] * 10
    assert a.num_classes == 10
    assert a.X_train.min() >= 0 and a.X_train.max() <= 1
    c = make_synthetic_shapes(100, 40, seed=6)
    assert c.X_train.tobytes() != a.X_train.tobytes()


def test_synthetic_set_survives_binary_round_trip(tmp_path):
    data = make_synthetic_shapes(20, 0, seed=1)
    path = tmp_path / "s.bin"
    save_cifar10_bin(path, data.X_train, data.y_train)
    assert path.stat().st_size == 20 * 3073
    X, y = load_cifar10_bin(path)
    assert X.tobytes() == data.X_train.tobytes() and y.tolist() == data.y_train.tolist()


def test_synthetic_classes_are_visually_distinct():
    data = make_synthetic_shapes(200, 0, seed=2, classes=len(SHAPES))
    means = np.stack([data.X_train[data.y_train == k].mean(axis=0) for k in range(len(SHAPES))])
    for i in range(len(SHAPES)):
        for j in range(i + 1, len(SHAPES)):
            assert np.abs(means[i] - means[j]).max() > 0.05


def test_synthetic_argument_checks():
    with pytest.raises(ValueError):
        make_synthetic_shapes(10, 10, classes=11)
    with pytest.raises(ValueError):
        make_synthetic_shapes(10, 10, size=8)
