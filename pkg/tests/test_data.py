import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from usmim.data import (AugmentConfig, ImageRecord, Lesion, PGMError, SpecklePhantomSpec, ViewConfig, augment,
                        decode_pgm, encode_pgm, epoch_views, exposure, gaussian_blur, hflip, image_rng, jitter,
                        load_corpus, make_views, manifest_line, parse_manifest, random_resized_box, resize_bilinear,
                        synth_speckle, write_pgm)


class TestPGM:
    def test_header_example(self):
        img = decode_pgm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        np.testing.assert_allclose(img / 255.0, [[0, 1], [0.50196, 0.25098]], atol=1e-5)

    def test_comment_in_header(self):
        img = decode_pgm(b"P5\n# made by hand\n3 1\n255\n" + bytes([1, 2, 3]))
        assert img.tolist() == [[1, 2, 3]]

    @pytest.mark.parametrize("buf", [b"P2\n1 1\n255\n\x00", b"P5\n2 2\n255\n\x00\x01", b"P5\n1 1\n65535\n\x00\x00",
                                     b"P5\n2"])
    def test_rejects(self, buf):
        with pytest.raises(PGMError):
            decode_pgm(buf)

    def test_roundtrip_bytes(self, rng):
        u8 = rng.integers(0, 256, size=(5, 7), dtype=np.uint8)
        buf = encode_pgm(u8)
        assert encode_pgm(decode_pgm(buf)) == buf

    def test_empty_dir(self, tmp_path):
        assert list(load_corpus(tmp_path)) == []

    def test_skips_bad_files(self, tmp_path, rng, caplog):
        write_pgm(tmp_path / "b.pgm", rng.integers(0, 256, size=(4, 4), dtype=np.uint8))
        write_pgm(tmp_path / "a.pgm", rng.integers(0, 256, size=(4, 4), dtype=np.uint8))
        (tmp_path / "c.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
        with caplog.at_level(logging.ERROR):
            recs = list(load_corpus(tmp_path))
        assert [r.id for r in recs] == ["a", "b"]
        assert "c.pgm" in caplog.text
        assert all(r.pixels.min() >= 0 and r.pixels.max() <= 1 for r in recs)

    def test_record_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageRecord("x", np.full((2, 2), 1.5))


class TestPhantom:
    def test_deterministic(self):
        spec = SpecklePhantomSpec(image_size=48, seed=11)
        a, b = synth_speckle(spec), synth_speckle(spec)
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert a.meta == b.meta

    def test_seeds_differ(self):
        a = synth_speckle(SpecklePhantomSpec(image_size=32, seed=1))
        b = synth_speckle(SpecklePhantomSpec(image_size=32, seed=2))
        assert not np.array_equal(a.pixels, b.pixels)

    def test_zero_contrast_is_background_times_speckle(self):
        spec = SpecklePhantomSpec(image_size=48, lesion_count=(2, 2), contrast=(0.0, 0.0), seed=5)
        lesioned = synth_speckle(spec)
        plain = synth_speckle(SpecklePhantomSpec(image_size=48, lesion_count=(0, 0), contrast=(0.0, 0.0), seed=5))
        np.testing.assert_array_equal(lesioned.pixels, plain.pixels)

    def test_range_and_count(self):
        for s in range(20):
            rec = synth_speckle(SpecklePhantomSpec(image_size=32, seed=s))
            assert rec.pixels.min() >= 0 and rec.pixels.max() <= 1
            assert 0 <= len(rec.meta["lesions"]) <= 3
            assert rec.source == "synthetic"

    @pytest.mark.parametrize("c", [-0.2, 0.15])
    def test_lesion_contrast_oracle(self, c):
        diffs = []
        for s in range(100):
            spec = SpecklePhantomSpec(image_size=64, lesion_count=(1, 1), contrast=(c, c), attenuation=0.0, seed=s)
            rec = synth_speckle(spec)
            inside = Lesion(**rec.meta["lesions"][0]).inside(64)
            diffs.append(rec.pixels[inside].mean() - rec.pixels[~inside].mean())
        assert abs(np.mean(diffs) - c) <= 0.1 * abs(c)

    def test_attenuation_darkens_with_depth(self):
        rows = np.zeros(64)
        for s in range(20):
            rec = synth_speckle(SpecklePhantomSpec(image_size=64, lesion_count=(0, 0), attenuation=1.0, seed=s))
            rows += rec.pixels.mean(axis=1)
        assert rows[:16].mean() > rows[-16:].mean()

    def test_manifest_roundtrip(self, tmp_path):
        recs = [synth_speckle(SpecklePhantomSpec(image_size=32, seed=s)) for s in range(5)]
        (tmp_path / "manifest.txt").write_text("\n".join(manifest_line(r) for r in recs) + "\n")
        parsed = parse_manifest(tmp_path / "manifest.txt")
        for r in recs:
            assert parsed[r.id]["lesion_count"] == len(r.meta["bboxes"])
            assert parsed[r.id]["bboxes"] == [tuple(b) for b in r.meta["bboxes"]]


class TestAugment:
    def test_all_off_identity(self, rng):
        img = rng.uniform(size=(16, 16))
        out, rec = augment(img, AugmentConfig.off(), rng)
        np.testing.assert_array_equal(out, img)
        assert rec == {}

    def test_flip_involution(self, rng):
        img = rng.uniform(size=(8, 12))
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_neutral_parameters(self, rng):
        img = rng.uniform(size=(16, 16))
        np.testing.assert_array_equal(jitter(img, 1.0, 0.0), img)
        np.testing.assert_array_equal(exposure(img, 1.0), img)

    def test_blur_preserves_constant(self):
        np.testing.assert_allclose(gaussian_blur(np.full((9, 9), 0.4), 0.8), 0.4, atol=1e-15)

    def test_forced_everything_records(self, rng):
        cfg = AugmentConfig(1.0, 1.0, 1.0, 1.0)
        out, rec = augment(rng.uniform(size=(16, 16)), cfg, rng)
        assert set(rec) == {"flip", "jitter", "blur", "gamma"}
        a, b = rec["jitter"]
        assert 0.7 <= a <= 1.3 and -0.2 <= b <= 0.2
        assert 0.1 <= rec["blur"] <= 1.0 and 0.7 <= rec["gamma"] <= 1.4

    @given(st.integers(0, 2**31))
    def test_clamped(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(size=(12, 12))
        out, _ = augment(img, AugmentConfig(1.0, 1.0, 1.0, 1.0, offset=(0.2, 0.2), gain=(1.3, 1.3)), rng)
        assert out.min() >= 0 and out.max() <= 1


class TestViews:
    def test_default_view_counts(self, rng):
        vb = make_views(rng.uniform(size=(96, 96)), ViewConfig(), rng)
        assert vb.global_views.shape == (2, 64, 64)
        assert vb.local_views.shape == (8, 32, 32)
        assert len(vb.records) == 10

    def test_same_seed_same_batch(self):
        img = synth_speckle(SpecklePhantomSpec(image_size=96, seed=3))
        a = make_views(img, ViewConfig(), np.random.default_rng(9))
        b = make_views(img, ViewConfig(), np.random.default_rng(9))
        np.testing.assert_array_equal(a.global_views, b.global_views)
        np.testing.assert_array_equal(a.local_views, b.local_views)
        assert a.records == b.records and a.source_id == img.id

    def test_pixels_in_range(self, rng):
        vb = make_views(rng.uniform(size=(80, 80)), ViewConfig(), rng)
        for v in (vb.global_views, vb.local_views):
            assert v.min() >= 0 and v.max() <= 1

    def test_resize_identity(self, rng):
        img = rng.uniform(size=(10, 14))
        np.testing.assert_allclose(resize_bilinear(img, 10, 14), img, atol=1e-15)

    def test_resize_constant(self):
        np.testing.assert_allclose(resize_bilinear(np.full((7, 9), 0.3), 20, 5), 0.3, atol=1e-15)

    def test_box_fallback_is_center(self):
        rng = np.random.default_rng(0)
        # unattainable scale forces the centre-crop fallback
        assert random_resized_box(10, 20, (5.0, 6.0), rng) == (0, 5, 10, 10)

    def test_box_within_image(self, rng):
        for _ in range(200):
            top, left, h, w = random_resized_box(50, 40, (0.05, 1.0), rng)
            assert 0 <= top and top + h <= 50 and 0 <= left and left + w <= 40 and h > 0 and w > 0

    def test_worker_invariance(self):
        recs = [synth_speckle(SpecklePhantomSpec(image_size=64, seed=s)) for s in range(6)]
        cfg = ViewConfig(n_local=2)
        idx = [4, 0, 5, 2]
        one = epoch_views(recs, idx, cfg, seed=1, epoch=3, workers=1)
        four = epoch_views(recs, idx, cfg, seed=1, epoch=3, workers=4)
        for a, b in zip(one, four):
            assert a.source_id == b.source_id
            np.testing.assert_array_equal(a.global_views, b.global_views)
            np.testing.assert_array_equal(a.local_views, b.local_views)

    def test_streams_depend_on_epoch(self):
        assert image_rng(0, 1, 2).random() != image_rng(0, 2, 2).random()
        assert image_rng(0, 1, 2).random() == image_rng(0, 1, 2).random()
