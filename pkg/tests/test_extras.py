import cv2
import numpy as np
import pytest

from classsr.exceptions import FileTypeError
from classsr.extras import read_image, write_image


@pytest.fixture
def make_path(tmp_path):
    """Make temporary PNG path."""

    def _make_path(name, width=10, height=10, channel=3, dtype=np.uint8):
        path = tmp_path / name
        image = np.zeros((height, width, channel), dtype=dtype)
        image[..., 0] = np.iinfo(dtype).max

        if path.suffix == ".png":
            cv2.imwrite(str(path), image if channel > 1 else image[..., 0])
        else:
            raise Exception("No implementation.")

        return path

    return _make_path


def test_read_image(make_path):
    width, height = 20, 10
    path = make_path("image.png", width=width, height=height)
    image = read_image(path)

    assert type(image) == np.ndarray
    assert image.dtype == np.float32
    assert image.shape == (height, width, 3)
    # the first stored channel is blue
    np.testing.assert_array_equal(image[0, 0], [0.0, 0.0, 1.0])


def test_read_grayscale(make_path):
    image = read_image(make_path("gray.png", channel=1))

    assert image.shape == (10, 10, 1)
    assert image.max() == 1.0


def test_read_16bit(make_path):
    image = read_image(make_path("deep.png", dtype=np.uint16))

    assert image.max() == 1.0


def test_read_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "none.png")


def test_read_wrong_type(tmp_path):
    with pytest.raises(FileTypeError):
        read_image(tmp_path / "image.jpg")


def test_write_image(tmp_path):
    image = np.zeros((4, 6, 3), dtype=np.float32)
    image[..., 0] = 1.0
    image[0, 0] = [0.5, 0.5, 0.5]
    path = write_image(tmp_path / "out" / "image.png", image)
    stored = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)

    assert stored.shape == (4, 6, 3)
    assert stored[1, 1].tolist() == [0, 0, 255]
    assert stored[0, 0].tolist() == [128, 128, 128]


def test_write_grayscale(tmp_path):
    path = write_image(tmp_path / "gray.png", np.full((4, 4, 1), 0.2))
    stored = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)

    assert stored.shape == (4, 4)
    assert stored[0, 0] == 51
