"""PGM parsing and formatting."""

import numpy as np
import pytest

from fhesift.errors import PgmError
from fhesift.pgm import format_pgm, parse_pgm, read_pgm, write_pgm


def test_ascii_round_trip():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (5, 7))
    out = parse_pgm(format_pgm(img, maxval=255, ascii_=True))
    assert out.shape == (5, 7)
    assert np.max(np.abs(out - img)) <= 0.5 / 255 + 1e-12


def test_binary_round_trip_8bit():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (4, 6))
    out = parse_pgm(format_pgm(img, maxval=255))
    assert np.max(np.abs(out - img)) <= 0.5 / 255 + 1e-12


def test_binary_round_trip_16bit_is_big_endian():
    img = np.array([[0.0, 1.0], [0.5, 0.25]])
    blob = format_pgm(img, maxval=65535)
    assert blob.startswith(b"P5\n2 2\n65535\n")
    raster = blob[len(b"P5\n2 2\n65535\n"):]
    assert raster[:2] == b"\x00\x00"
    assert raster[2:4] == b"\xff\xff"
    out = parse_pgm(blob)
    assert np.max(np.abs(out - img)) <= 0.5 / 65535 + 1e-12


def test_quantization_is_stable_on_requantize():
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (8, 8))
    once = parse_pgm(format_pgm(img, maxval=65535))
    twice = parse_pgm(format_pgm(once, maxval=65535))
    assert np.array_equal(once, twice)


def test_comments_and_odd_whitespace():
    data = b"P2 # magic\n# a comment line\n 3\t2 #dims\n255\n0 1 2\n3 4 5\n"
    img = parse_pgm(data)
    assert img.shape == (2, 3)
    assert img[1, 2] == pytest.approx(5 / 255)


def test_p5_single_separator_byte():
    # the byte right after maxval is the one separator; raster may hold
    # values that look like whitespace
    img = parse_pgm(b"P5\n2 1\n255\n\x0a\x20")
    assert img[0, 0] == pytest.approx(0x0A / 255)
    assert img[0, 1] == pytest.approx(0x20 / 255)


def test_errors_carry_byte_offsets():
    with pytest.raises(PgmError) as ei:
        parse_pgm(b"P6\n1 1\n255\n\x00")
    assert ei.value.offset == 0

    with pytest.raises(PgmError) as ei:
        parse_pgm(b"P2\nx 1\n255\n0")
    assert ei.value.offset == 3
    assert "width" in str(ei.value)

    data = b"P5\n4 4\n255\n" + b"\x00" * 5
    with pytest.raises(PgmError) as ei:
        parse_pgm(data)
    assert "truncated" in str(ei.value)
    assert ei.value.offset == len(data)

    with pytest.raises(PgmError):
        parse_pgm(b"P2\n0 1\n255\n")
    with pytest.raises(PgmError):
        parse_pgm(b"P2\n1 1\n0\n0")
    with pytest.raises(PgmError):
        parse_pgm(b"P2\n1 1\n70000\n0")
    with pytest.raises(PgmError) as ei:
        parse_pgm(b"P2\n2 1\n10\n3 11\n")
    assert "exceeds maxval" in str(ei.value)
    with pytest.raises(PgmError):
        parse_pgm(b"P2\n2 2\n255\n0 1 2")  # not enough pixels


def test_format_rejects_bad_input():
    with pytest.raises(ValueError):
        format_pgm(np.zeros(4))
    with pytest.raises(ValueError):
        format_pgm(np.zeros((2, 2)), maxval=0)


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (3, 3))
    p = tmp_path / "img.pgm"
    write_pgm(p, img, maxval=255, ascii_=True)
    out = read_pgm(p)
    assert np.max(np.abs(out - img)) <= 0.5 / 255 + 1e-12
