import numpy as np
import pytest

from evnoise import pgm
from evnoise.events import GRAY_LEVEL, PHOTON_COUNT, CountImage, IntensityImage


def test_8bit_round_trip():
    img = IntensityImage(np.array([[0, 255], [128, 64]]), GRAY_LEVEL, 255)
    data = pgm.write_image(img)
    assert data.startswith(b"P5\n2 2\n255\n")
    assert data[-4:] == bytes([0, 255, 128, 64])
    back = pgm.read_image(data)
    assert np.array_equal(back.values, img.values) and back.maxval == 255


def test_16bit_boundary_round_trip():
    img = IntensityImage(np.array([[65535, 0, 256]]), GRAY_LEVEL, 65535)
    data = pgm.write_image(img)
    # big-endian samples
    assert data.endswith(b"\xff\xff\x00\x00\x01\x00")
    back = pgm.read_image(data)
    assert np.array_equal(back.values, img.values) and back.maxval == 65535


def test_count_channel_round_trip():
    rng = np.random.default_rng(1)
    pos = rng.integers(0, 3000, (5, 7))
    neg = rng.integers(0, 70000, (5, 7)) % 65536
    c = CountImage(pos, neg, 0.5)
    for ch, ref in (("pos", pos), ("neg", neg)):
        a, maxval = pgm.decode_pgm(pgm.write_count_channel(c, ch))
        assert maxval == 65535
        assert np.array_equal(a, ref)


def test_photon_count_needs_mapping():
    with pytest.raises(pgm.GraymapError):
        pgm.write_image(IntensityImage(np.ones((2, 2)), PHOTON_COUNT))


def test_header_comments():
    data = b"P5\n# a comment\n3 1\n# another\n255\n" + bytes([1, 2, 3])
    a, m = pgm.decode_pgm(data)
    assert a.tolist() == [[1, 2, 3]] and m == 255


def test_rejects_bad_files():
    with pytest.raises(pgm.GraymapError):
        pgm.decode_pgm(b"P2\n1 1\n255\n0")
    with pytest.raises(pgm.GraymapError):
        pgm.decode_pgm(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(pgm.GraymapError):
        pgm.encode_pgm(np.array([[300]]), 255)
    with pytest.raises(pgm.GraymapError):
        pgm.encode_pgm(np.array([[0.5]]))
