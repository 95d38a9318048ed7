import math
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xbarnet.dataio import (AUGMENT_PRESETS, AugmentConfig, augment, image_rng,
                            load_idx, load_mnist, rate_encode, rate_encode_batch)
from xbarnet.errors import (ConfigError, CountMismatchError, DimensionMismatchError,
                            ShortReadError, WrongMagicError)

from conftest import needs_mnist


def idx_images(n, rows=28, cols=28, magic=0x803, pixels=None):
    if pixels is None:
        pixels = (np.arange(n * rows * cols) % 256).astype(np.uint8)
    return struct.pack(">IIII", magic, n, rows, cols) + bytes(pixels)


def idx_labels(n, magic=0x801):
    return struct.pack(">II", magic, n) + bytes(np.arange(n, dtype=np.uint8) % 10)


@pytest.fixture
def idx_pair(tmp_path):
    def make(img_bytes, lab_bytes):
        ip, lp = tmp_path / "img", tmp_path / "lab"
        ip.write_bytes(img_bytes)
        lp.write_bytes(lab_bytes)
        return ip, lp
    return make


def test_load_idx_normalizes(idx_pair):
    pix = np.zeros(3 * 784, dtype=np.uint8)
    pix[0], pix[1] = 255, 0
    batch = load_idx(*idx_pair(idx_images(3, pixels=pix), idx_labels(3)))
    assert batch.images.shape == (3, 28, 28, 1)
    assert batch.images[0, 0, 0, 0] == 1.0 and batch.images[0, 0, 1, 0] == 0.0
    assert batch.labels.tolist() == [0, 1, 2]


def test_load_idx_errors(idx_pair):
    with pytest.raises(WrongMagicError):
        load_idx(*idx_pair(idx_images(2, magic=0x801), idx_labels(2)))
    with pytest.raises(WrongMagicError):
        load_idx(*idx_pair(idx_images(2), idx_labels(2, magic=0x803)))
    with pytest.raises(DimensionMismatchError):
        load_idx(*idx_pair(idx_images(2, rows=27), idx_labels(2)))
    with pytest.raises(CountMismatchError):
        load_idx(*idx_pair(idx_images(2), idx_labels(3)))
    with pytest.raises(ShortReadError):
        load_idx(*idx_pair(idx_images(2)[:-5], idx_labels(2)))
    with pytest.raises(ShortReadError):
        load_idx(*idx_pair(idx_images(2)[:10], idx_labels(2)))


def test_gzip_hint(idx_pair):
    with pytest.raises(WrongMagicError, match="gzip"):
        load_idx(*idx_pair(b"\x1f\x8b\x08\x00rest", idx_labels(1)))


@needs_mnist
def test_mnist_counts(mnist_dir):
    train = load_mnist(mnist_dir, "train")
    test = load_mnist(mnist_dir, "test")
    assert len(train) == 60000 and len(test) == 10000
    assert train.images.shape[1:] == (28, 28, 1)
    assert set(np.unique(train.labels)) == set(range(10))
    assert train.images.min() == 0.0 and train.images.max() == 1.0


# ---------------------------------------------------------------------------
# rate code

def spike_count_oracle(thousandths: int, ticks: int) -> int:
    """round(p*T) for p = thousandths/1000 with exact halves rounded down."""
    x = Fraction(thousandths * ticks, 1000)
    return math.ceil(x - Fraction(1, 2))


@pytest.mark.parametrize("p,ticks,frames", [(1.0, 4, [1, 1, 1, 1]),
                                            (0.5, 4, [0, 1, 0, 1]),
                                            (0.0, 8, [0] * 8)])
def test_rate_encode_examples(p, ticks, frames):
    assert rate_encode(np.array([p]), ticks)[:, 0].tolist() == frames


def test_rate_encode_rejects_zero_ticks():
    with pytest.raises(ValueError):
        rate_encode(np.array([0.3]), 0)


def test_rate_counts_match_rounding_on_grid():
    grid = np.arange(1001)
    p = grid / 1000.0
    for ticks in (1, 2, 4, 8, 16, 32, 64):
        counts = rate_encode(p, ticks).sum(axis=0)
        expected = [spike_count_oracle(int(n), ticks) for n in grid]
        assert counts.tolist() == expected, ticks


@given(st.floats(0.0, 1.0), st.integers(1, 64))
def test_rate_count_close_to_p_times_t(p, ticks):
    count = int(rate_encode(np.array([p]), ticks).sum())
    assert abs(count - p * ticks) <= 0.5 + 1e-9


def test_rate_encode_deterministic_and_batched(rng):
    imgs = rng.random((5, 784))
    a = rate_encode_batch(imgs, 16)
    assert np.array_equal(a, rate_encode_batch(imgs, 16))
    for i in range(5):
        assert np.array_equal(a[:, i], rate_encode(imgs[i], 16))


# ---------------------------------------------------------------------------
# augmentation

def test_augment_identity(rng):
    img = rng.random((28, 28, 1)).astype(np.float32)
    out = augment(img, AugmentConfig(), image_rng(1, 2, 3))
    assert np.array_equal(out, img)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_aug2_shape_and_range(seed):
    img = np.random.default_rng(seed).random((28, 28, 1)).astype(np.float32)
    out = augment(img, AUGMENT_PRESETS["aug2"], image_rng(seed, 0))
    assert out.shape == (28, 28, 1)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_deterministic(rng):
    img = rng.random((28, 28, 1)).astype(np.float32)
    a = augment(img, AUGMENT_PRESETS["aug1"], image_rng(5, 1, 9))
    b = augment(img, AUGMENT_PRESETS["aug1"], image_rng(5, 1, 9))
    c = augment(img, AUGMENT_PRESETS["aug1"], image_rng(5, 1, 10))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_augment_pure_shift_moves_content():
    img = np.zeros((28, 28))
    img[10, 10] = 1.0

    class Fixed:
        def __init__(self, values):
            self.values = iter(values)

        def uniform(self, lo, hi):
            return next(self.values)

    # rotation 0, dx = +2 (columns), dy = -1 (rows), scale 1
    out = augment(img, AugmentConfig(1.0, 3.0, 0.1), Fixed([0.0, 2.0, -1.0, 1.0]))
    assert out[9, 12] == pytest.approx(1.0)
    assert out.sum() == pytest.approx(1.0)


def test_augment_presets():
    assert AUGMENT_PRESETS["aug1"] == AugmentConfig(7.5, 2.5, 0.075)
    assert AUGMENT_PRESETS["aug2"] == AugmentConfig(15.0, 5.0, 0.15)
    with pytest.raises(ConfigError):
        AugmentConfig(-1.0, 0, 0)
