import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neuronsim.errors import ContractViolation, FormatError
from neuronsim.idx import (
    MnistDataset,
    denormalize,
    describe,
    parse_idx_images,
    parse_idx_labels,
    serialize_idx_images,
    serialize_idx_labels,
)


def image_blob(n, rows, cols, pixels):
    return struct.pack(">4I", 0x803, n, rows, cols) + bytes(pixels)


def test_hand_built_image():
    images = parse_idx_images(image_blob(1, 2, 2, [0, 255, 128, 64]))
    assert images.shape == (1, 4)
    assert images[0].tolist() == [0.0, 1.0, 128 / 255, 64 / 255]


def test_labels():
    data = struct.pack(">2I", 0x801, 2) + bytes([3, 7])
    assert parse_idx_labels(data).tolist() == [3, 7]


def test_label_out_of_range():
    data = struct.pack(">2I", 0x801, 3) + bytes([1, 10, 2])
    with pytest.raises(FormatError) as err:
        parse_idx_labels(data)
    assert err.value.offset == 9


def test_wrong_magic():
    with pytest.raises(FormatError):
        parse_idx_images(struct.pack(">2I", 0x801, 1) + b"\x00")
    with pytest.raises(FormatError):
        parse_idx_images(b"\x12\x34\x08\x03" + bytes(12))


def test_truncated_payload_reports_offset():
    blob = image_blob(2, 2, 2, [1, 2, 3, 4, 5])
    with pytest.raises(FormatError) as err:
        parse_idx_images(blob)
    assert err.value.offset == len(blob)
    assert "byte offset" in str(err.value)


def test_truncated_header():
    with pytest.raises(FormatError):
        parse_idx_images(struct.pack(">2I", 0x803, 5))


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(0, 6), st.just(12))))
def test_image_round_trip(pixels):
    blob = serialize_idx_images(pixels / 255.0, rows=3, cols=4)
    images = parse_idx_images(blob)
    assert serialize_idx_images(images, rows=3, cols=4) == blob
    assert np.array_equal(denormalize(images), pixels)


def test_label_round_trip():
    labels = np.array([0, 9, 4, 4, 1])
    assert np.array_equal(parse_idx_labels(serialize_idx_labels(labels)), labels)
    with pytest.raises(ContractViolation):
        serialize_idx_labels([10])


def test_serialize_rejects_wrong_width():
    with pytest.raises(ContractViolation):
        serialize_idx_images(np.zeros((2, 10)))


def test_dataset_length_mismatch():
    with pytest.raises(ContractViolation):
        MnistDataset(np.zeros((3, 4)), np.zeros(2, int))


def test_describe():
    info = describe(image_blob(1, 2, 2, [0, 1, 2, 3]))
    assert info == {"magic": "0x00000803", "kind": "images", "type_code": "0x08",
                    "dims": [1, 2, 2], "payload_bytes": 4}


def test_official_headers(mnist_dir):
    images = (mnist_dir / "train-images-idx3-ubyte").read_bytes()
    labels = (mnist_dir / "train-labels-idx1-ubyte").read_bytes()
    assert describe(images)["dims"] == [60000, 28, 28]
    assert describe(labels)["dims"] == [60000]


def test_official_files_parse(mnist):
    train, test = mnist
    assert train.images.shape == (60000, 784) and len(test) == 10000
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0
    assert np.bincount(test.labels).tolist()[0] == 980
