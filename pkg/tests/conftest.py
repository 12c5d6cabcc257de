import numpy as np
import pytest

from robustlab import nn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=3, pooling="maxpool", size=8, dtype=np.float64):
    """Two-conv model on size x size inputs, small enough for FD sweeps."""
    pool = nn.dropmax(2, 2) if pooling == "dropmax" else nn.maxpool(2, 2)
    spec = [nn.conv(3, kernel=3, padding=1), nn.relu_layer(), pool,
            nn.globalavgpool(), nn.dense(2)]
    return nn.build_model(spec, seed=seed, input_shape=(1, size, size), dtype=dtype)


def desk_model(seed=0, pooling="maxpool", size=32, dtype=np.float32):
    return nn.build_model(nn.default_classifier_spec(pooling), seed=seed,
                          input_shape=(1, size, size), dtype=dtype)


def dropmax_reference(window):
    """Brute-force oracle: sort by (value desc, position asc), take rank 2."""
    flat = np.asarray(window, dtype=np.float64).reshape(-1)
    order = sorted(range(flat.size), key=lambda i: (-flat[i], i))
    pick = order[1]
    return float(flat[pick]), int(pick)
