import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from multiref.rasters import CodecError, Latent, RasterImage, decode, encode, read_png, resize, write_png


def random_image(rng, h, w):
    return RasterImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


def test_constant_white_encodes_to_ones():
    z = encode(RasterImage.filled(2, 2, (255, 255, 255)), 1)
    assert z.values.shape == (2, 2, 3)
    assert np.all(z.values == 1.0)


def test_space_to_depth_index_oracle():
    rng = np.random.default_rng(3)
    img = random_image(rng, 4, 4)
    z = encode(img, 2)
    assert z.values.shape == (2, 2, 12)
    # enumerate all 48 values: channel index = (dy * p + dx) * 3 + c
    for r in range(2):
        for col in range(2):
            for dy in range(2):
                for dx in range(2):
                    for c in range(3):
                        expected = img.pixels[2 * r + dy, 2 * col + dx, c] / 127.5 - 1.0
                        assert z.values[r, col, (dy * 2 + dx) * 3 + c] == expected


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([1, 2, 4]), st.integers(0, 2 ** 32 - 1))
def test_round_trip_exact(rows, cols, p, seed):
    img = random_image(np.random.default_rng(seed), rows * p, cols * p)
    z = encode(img, p)
    assert z.rows * z.cols * z.channels == img.height * img.width * 3
    assert decode(z, p) == img
    assert encode(decode(z, p), p) == z


def test_zero_latent_is_gray_128():
    img = decode(Latent(np.zeros((1, 1, 3))), 1)
    assert np.all(img.pixels == 128)


def test_decode_endpoints_and_clamp():
    assert np.all(decode(Latent(np.ones((1, 1, 3))), 1).pixels == 255)
    assert np.all(decode(Latent(np.full((1, 1, 3), 7.0)), 1).pixels == 255)
    assert np.all(decode(Latent(np.full((1, 1, 3), -3.0)), 1).pixels == 0)


def test_decode_rounds_half_up():
    # value v maps to (v + 1) * 127.5; pick v so the pre-round value is exactly 10.5
    v = 10.5 / 127.5 - 1.0
    assert decode(Latent(np.full((1, 1, 3), v)), 1).pixels[0, 0, 0] == 11


def test_linearity_on_integer_blends():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 128, size=(4, 4, 3)) * 2
    b = rng.integers(0, 128, size=(4, 4, 3)) * 2
    blend = RasterImage(((a + b) // 2).astype(np.uint8))
    lhs = encode(blend, 2).values
    rhs = 0.5 * encode(RasterImage(a.astype(np.uint8)), 2).values + 0.5 * encode(RasterImage(b.astype(np.uint8)), 2).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@pytest.mark.parametrize("shape,axis", [((6, 8, 3), "height"), ((8, 6, 3), "width")])
def test_encode_rejects_unaligned_axis(shape, axis):
    with pytest.raises(CodecError, match=axis):
        encode(RasterImage(np.zeros(shape, np.uint8)), 4)


def test_decode_channel_mismatch():
    with pytest.raises(CodecError, match="channels"):
        decode(Latent(np.zeros((1, 1, 12))), 4)


def test_invalid_pixels_rejected():
    with pytest.raises(CodecError):
        RasterImage(np.full((2, 2, 3), 300))
    with pytest.raises(CodecError):
        RasterImage(np.zeros((2, 2)))
    with pytest.raises(CodecError):
        Latent(np.full((1, 1, 3), np.nan))


def test_png_round_trip_and_rgba_rejected(tmp_path):
    img = random_image(np.random.default_rng(1), 8, 12)
    write_png(img, tmp_path / "a.png")
    assert read_png(tmp_path / "a.png") == img
    Image.new("RGBA", (4, 4)).save(tmp_path / "b.png")
    with pytest.raises(CodecError, match="RGBA"):
        read_png(tmp_path / "b.png")


def test_resize_identity_and_shape():
    img = random_image(np.random.default_rng(2), 8, 8)
    assert resize(img, 8, 8) is img
    assert resize(img, 4, 12).size == (4, 12)
