"""Resize, Laplacian, CLAHE, MPN, pipelines and the image file formats."""

import struct

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from leafgrad.imageio import (ImageF, ImageFormatError, ImageU8, decode_lgf1, decode_pnm, encode_lgf1, encode_pnm,
                              read_image, read_lgf1, write_image, write_lgf1)
from leafgrad.preprocess import (Clahe, Edge, Mpn, PipelineConfig, PipelineError, Resize, clahe, clahe_gray,
                                 clip_histogram, laplacian_edge, mpn, parse_pipeline, resize_bilinear, run_pipeline)

TANH1 = float(mpmath.tanh(1))


def u8(a):
    a = np.asarray(a, dtype=np.uint8)
    return ImageU8(a if a.ndim == 3 else a[:, :, None])


def random_image(seed, h=17, w=23, c=3):
    return ImageU8(np.random.default_rng(seed).integers(0, 256, (h, w, c), dtype=np.uint8))


def global_he_oracle(gray):
    """Scalar loop global histogram equalisation."""
    flat = [int(v) for v in gray.ravel()]
    n = len(flat)
    cdf_min = flat.count(min(flat))
    lut = {}
    for v in set(flat):
        below = sum(1 for p in flat if p <= v)
        lut[v] = int(np.floor(255 * (below - cdf_min) / (n - cdf_min) + 0.5))
    return np.array([lut[p] for p in flat]).reshape(gray.shape)


def laplacian_oracle(pixels, kernel):
    h, w, c = pixels.shape
    out = np.zeros_like(pixels)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0
                for u in range(3):
                    for v in range(3):
                        y = min(max(i + u - 1, 0), h - 1)
                        x = min(max(j + v - 1, 0), w - 1)
                        acc += kernel[u][v] * int(pixels[y, x, ch])
                out[i, j, ch] = min(abs(acc), 255)
    return out


class TestResize:
    def test_same_size_is_copy(self):
        img = random_image(0)
        out = resize_bilinear(img, img.height, img.width)
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_constant_stays_constant(self):
        out = resize_bilinear(u8(np.full((2, 2), 77)), 4, 4)
        np.testing.assert_array_equal(out.pixels, 77)

    def test_hand_bilinear_oracle(self):
        # source x for output column j: (j + 0.5) / 2 - 0.5 -> -0.25, 0.25, 0.75, 1.25,
        # clamped to [0, 1]: 0, 0.25, 0.75, 1 -> 0, 63.75, 191.25, 255 -> rounded
        out = resize_bilinear(u8([[0, 255], [0, 255]]), 4, 4).pixels[:, :, 0]
        np.testing.assert_array_equal(out, np.tile([0, 64, 191, 255], (4, 1)))

    def test_downsample_by_two_averages_pairs(self):
        a = np.random.default_rng(3).integers(0, 256, (8, 8)).astype(np.uint8)
        out = resize_bilinear(u8(a), 4, 4).pixels[:, :, 0]
        blocks = a.reshape(4, 2, 4, 2).astype(float).mean(axis=(1, 3))
        np.testing.assert_array_equal(out, np.floor(blocks + 0.5))

    def test_stretch_non_square(self):
        assert resize_bilinear(random_image(1, 10, 30), 224, 224).pixels.shape == (224, 224, 3)

    def test_rejects_zero_target(self):
        with pytest.raises(ValueError):
            resize_bilinear(random_image(0), 0, 5)


class TestLaplacian:
    def test_constant_gives_zero(self):
        np.testing.assert_array_equal(laplacian_edge(u8(np.full((6, 7, 3), 200))).pixels, 0)

    def test_single_bright_pixel(self):
        a = np.zeros((5, 5), dtype=np.uint8)
        a[2, 2] = 255
        out = laplacian_edge(u8(a)).pixels[:, :, 0]
        expect = np.zeros((5, 5))
        expect[2, 2] = 255  # |-4 * 255| clamped
        expect[1, 2] = expect[3, 2] = expect[2, 1] = expect[2, 3] = 255
        np.testing.assert_array_equal(out, expect)

    @pytest.mark.parametrize("neighbors", [4, 8])
    def test_loop_oracle(self, neighbors):
        kernel = [[0, 1, 0], [1, -4, 1], [0, 1, 0]] if neighbors == 4 else [[1, 1, 1], [1, -8, 1], [1, 1, 1]]
        img = random_image(neighbors, 9, 11)
        np.testing.assert_array_equal(laplacian_edge(img, neighbors).pixels, laplacian_oracle(img.pixels, kernel))

    def test_bad_variant(self):
        with pytest.raises(ValueError):
            laplacian_edge(random_image(0), 6)


class TestClahe:
    @pytest.mark.parametrize("value", [0, 1, 127, 254, 255])
    @pytest.mark.parametrize("grid", [(1, 1), (2, 3), (8, 8)])
    @pytest.mark.parametrize("clip", [0.01, 2.0, 40.0])
    def test_constant_preserved(self, value, grid, clip):
        img = u8(np.full((32, 40, 3), value))
        np.testing.assert_array_equal(clahe(img, clip, grid).pixels, img.pixels)

    def test_constant_gray(self):
        img = u8(np.full((16, 16), 90))
        np.testing.assert_array_equal(clahe(img).pixels, 90)

    @pytest.mark.parametrize("seed", range(5))
    def test_one_tile_high_clip_is_global_he(self, seed):
        gray = np.random.default_rng(seed).integers(30, 200, (12, 15)).astype(np.uint8)
        np.testing.assert_array_equal(clahe_gray(gray, 1000.0, (1, 1)), global_he_oracle(gray))

    @given(arrays(np.int64, 256, elements=st.integers(0, 500)), st.floats(0.01, 10.0))
    @settings(max_examples=200, deadline=None)
    def test_clip_conserves_mass(self, hist, clip):
        out = clip_histogram(hist, clip)
        assert out.sum() == hist.sum()
        assert np.all(out >= 0)

    def test_clip_ceiling(self):
        hist = np.zeros(256, dtype=np.int64)
        hist[10] = 1024  # total 1024, clip 2 -> ceiling 8, excess 1016
        out = clip_histogram(hist, 2.0)
        assert out.sum() == 1024
        assert out.max() - out.min() <= 9

    def test_output_shape_and_range(self):
        img = random_image(4, 30, 26)
        out = clahe(img, 2.0, (4, 4))
        assert out.pixels.shape == img.pixels.shape and out.pixels.dtype == np.uint8

    def test_increases_contrast_of_flat_ramp(self):
        ramp = np.tile(np.arange(100, 132, dtype=np.uint8), (32, 1))
        out = clahe_gray(ramp, 4.0, (2, 2))
        assert np.ptp(out) > np.ptp(ramp)

    def test_tiles_too_fine(self):
        with pytest.raises(ValueError, match="tile"):
            clahe(random_image(0, 4, 4), 2.0, (8, 8))

    def test_bad_clip(self):
        with pytest.raises(ValueError):
            clahe(random_image(0), 0.0)

    def test_colour_keeps_channel_order(self):
        # a pure-red gradient must stay red after luma-based equalisation
        a = np.zeros((16, 16, 3), dtype=np.uint8)
        a[:, :, 0] = np.tile(np.linspace(60, 200, 16).astype(np.uint8), (16, 1))
        out = clahe(ImageU8(a), 2.0, (2, 2)).pixels
        assert np.all(out[:, :, 1] == 0) and np.all(out[:, :, 2] == 0)


class TestMpn:
    @pytest.mark.parametrize("p", [0, 127, 128, 255])
    def test_high_precision_oracle(self, p):
        want = float(mpmath.tanh(mpmath.mpf(p) / mpmath.mpf("127.5") - 1))
        assert abs(mpn(u8([[p]])).values.item() - want) < 1e-15

    def test_documented_values(self):
        assert mpn(u8([[127]])).values.item() == pytest.approx(-0.0039215, abs=1e-7)
        assert mpn(u8([[0]])).values.item() == pytest.approx(-0.7615942, abs=1e-7)
        assert mpn(u8([[255]])).values.item() == pytest.approx(0.7615942, abs=1e-7)

    def test_codomain_monotone_antisymmetric(self):
        v = mpn(u8(np.arange(256).reshape(16, 16))).values.ravel()
        assert np.all(np.abs(v) <= TANH1)
        assert np.all(np.diff(v) > 0)
        np.testing.assert_allclose(v, -v[::-1], atol=1e-9)


class TestPipeline:
    def test_resize_only_scales(self):
        img = random_image(2, 224, 224)
        out = run_pipeline(img, PipelineConfig([Resize()]))
        np.testing.assert_array_equal(out.values, img.pixels / 255.0)

    def test_composition(self):
        img = random_image(3, 40, 50)
        out = run_pipeline(img, PipelineConfig([Resize(32, 32), Mpn()]))
        np.testing.assert_array_equal(out.values, mpn(resize_bilinear(img, 32, 32)).values)

    @pytest.mark.parametrize("v", [0, 90, 200])
    def test_constant_through_clahe(self, v):
        out = run_pipeline(u8(np.full((40, 40, 3), v)), PipelineConfig([Resize(32, 32), Clahe(), Mpn()]))
        np.testing.assert_array_equal(out.values, np.tanh(v / 127.5 - 1.0))

    def test_purity(self):
        img = random_image(5, 30, 30)
        cfg = parse_pipeline("resize,edge,clahe,mpn", 16, tile_grid=(2, 2))
        a, b = run_pipeline(img, cfg), run_pipeline(img, cfg)
        assert a.values.tobytes() == b.values.tobytes()

    def test_validation(self):
        with pytest.raises(PipelineError):
            PipelineConfig([Resize(), Resize()]).validate()
        with pytest.raises(PipelineError):
            PipelineConfig([Mpn(), Edge()]).validate()
        with pytest.raises(PipelineError):
            parse_pipeline("resize,blur")

    def test_parse_and_name(self):
        cfg = parse_pipeline("mpn", 224, ensure_resize=True)
        assert cfg.name == "resize,mpn"
        assert cfg.stages[0] == Resize(224, 224)
        assert parse_pipeline("resize", 225).stages[0] == Resize(225, 225)

    def test_mpn_output_bounds(self):
        out = run_pipeline(random_image(6), parse_pipeline("resize,clahe,mpn", 16, tile_grid=(2, 2)))
        assert np.all(np.abs(out.values) <= TANH1) and np.all(np.isfinite(out.values))


class TestImageIO:
    def test_pnm_roundtrip_bit_exact(self, tmp_path):
        for c in (1, 3):
            img = random_image(c, 7, 9, c)
            path = tmp_path / f"a{c}.pnm"
            write_image(path, img)
            assert path.read_bytes()[:2] == (b"P6" if c == 3 else b"P5")
            np.testing.assert_array_equal(read_image(path).pixels, img.pixels)
            assert encode_pnm(read_image(path)) == path.read_bytes()

    def test_pnm_comments_and_errors(self):
        img = decode_pnm(b"P5\n# note\n2 1\n# more\n255\n\x01\x02")
        np.testing.assert_array_equal(img.pixels[:, :, 0], [[1, 2]])
        with pytest.raises(ImageFormatError):
            decode_pnm(b"P5\n2 2\n255\n\x00")
        with pytest.raises(ImageFormatError):
            decode_pnm(b"P5\n2 1\n65535\n\x00\x00\x00\x00")

    def test_lgf1_layout(self):
        img = ImageF(np.arange(6, dtype=np.float64).reshape(1, 2, 3) / 4)
        buf = encode_lgf1(img)
        assert buf[:4] == b"LGF1"
        assert struct.unpack("<3Q", buf[4:28]) == (1, 2, 3)
        np.testing.assert_array_equal(np.frombuffer(buf[28:], "<f4"), np.arange(6) / 4)
        np.testing.assert_array_equal(decode_lgf1(buf).values, img.values)

    def test_lgf1_file_and_errors(self, tmp_path):
        img = ImageF(np.random.default_rng(0).normal(size=(3, 4, 1)))
        write_lgf1(tmp_path / "x.lgf", img)
        np.testing.assert_allclose(read_lgf1(tmp_path / "x.lgf").values, img.values.astype(np.float32))
        with pytest.raises(ImageFormatError):
            decode_lgf1(b"LGF2" + bytes(24))
        with pytest.raises(ImageFormatError):
            decode_lgf1(encode_lgf1(img)[:-1])

    def test_png_ingest(self, tmp_path):
        Image = pytest.importorskip("PIL.Image")
        a = np.random.default_rng(1).integers(0, 256, (5, 6, 3), dtype=np.uint8)
        Image.fromarray(a).save(tmp_path / "x.png")
        np.testing.assert_array_equal(read_image(tmp_path / "x.png").pixels, a)

    def test_image_invariants(self):
        with pytest.raises((ValueError, TypeError)):
            ImageU8(np.zeros((2, 2, 2), dtype=np.uint8))
        with pytest.raises(ValueError):
            ImageF(np.array([[[np.nan]]]))
