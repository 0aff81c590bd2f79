import struct

import numpy as np
import pytest

from airpca.dataset import DataMatrix


def write_idx3(path, images, magic=0x00000803):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    path.write_bytes(struct.pack(">IIII", magic, n, rows, cols) + images.tobytes())
    return path


@pytest.fixture
def small_data():
    rng = np.random.default_rng(123)
    return DataMatrix(rng.standard_normal((6, 40)))
