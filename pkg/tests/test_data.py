import binascii
import struct
from pathlib import Path

import numpy as np
import pytest

from ukan_ep.data import (
    AugmentConfig,
    NiftiError,
    augment,
    generate_phantom,
    load_manifest_cases,
    read_nifti,
    write_nifti,
    write_phantom_dataset,
)
from ukan_ep.data.augment import adjust_contrast, add_noise, crop_bounds, draw_augmentation, flip, rotate
from ukan_ep.data.nifti import encode_nifti
from ukan_ep.data.phantom import brain_mask, sample_seed

GOLDEN = Path(__file__).parent / "data" / "golden_2x2x2_float32.hex"
DRAWS = 10_000


class TestPhantom:
    def test_deterministic(self):
        a, b = generate_phantom(3), generate_phantom(3)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.image, generate_phantom(4).image)

    def test_every_class_present(self):
        for seed in range(10):
            counts = np.bincount(generate_phantom(seed).labels.ravel(), minlength=5)
            assert np.all(counts > 0), (seed, counts)

    def test_t1gd_brighter_on_et_than_netc(self):
        for seed in range(10):
            s = generate_phantom(seed)
            t1gd = s.image[1]
            assert t1gd[s.labels == 3].mean() > t1gd[s.labels == 1].mean()

    def test_modality_roles(self):
        s = generate_phantom(0)
        brain = brain_mask(s.image)
        tissue = brain & (s.labels == 0)
        flair, t2 = s.image[3], s.image[2]
        assert flair[s.labels == 2].mean() > flair[tissue].mean()
        assert t2[s.labels == 2].mean() > t2[tissue].mean()

    def test_outside_brain_is_zero(self):
        s = generate_phantom(1)
        brain = brain_mask(s.image)
        assert np.all(s.labels[~brain] == 0) and np.all(s.image[:, ~brain] == 0)
        assert s.image.dtype == np.float32 and s.image.shape == (4, 32, 32, 32)

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_phantom(0, (8, 32, 32))

    def test_sample_seed_is_stable(self):
        assert sample_seed(0, "a", 1) == sample_seed(0, "a", 1) != sample_seed(0, "a", 2)


def identity_config(**kw):
    return AugmentConfig(flip_prob=0.0, noise_sigma=0.0, max_rotation_deg=0.0, contrast_range=(1.0, 1.0), **kw)


class TestAugment:
    def test_identity_config(self):
        s = generate_phantom(0)
        out = augment(s, identity_config(), draw_seed=5)
        assert np.array_equal(out.image, s.image) and np.array_equal(out.labels, s.labels)

    def test_identity_apart_from_crop(self):
        s = generate_phantom(2)
        out = augment(s, identity_config(crop=(24, 28, 30), jitter=False), draw_seed=0)
        start = crop_bounds(brain_mask(s.image), (24, 28, 30), jitter=False)
        win = tuple(slice(a, a + c) for a, c in zip(start, (24, 28, 30)))
        assert np.array_equal(out.labels, s.labels[win])
        assert np.array_equal(out.image, s.image[(slice(None),) + win])

    def test_crop_keeps_the_brain_when_it_fits(self):
        s = generate_phantom(4)
        brain = brain_mask(s.image)
        idx = np.argwhere(brain)
        extent = idx.max(0) - idx.min(0) + 1
        crop = tuple(int(e) for e in extent)
        rng = np.random.default_rng(0)
        for _ in range(20):
            start = crop_bounds(brain, crop, rng)
            win = tuple(slice(a, a + c) for a, c in zip(start, crop))
            assert brain[win].sum() == brain.sum()

    def test_crop_too_large(self):
        with pytest.raises(ValueError):
            augment(generate_phantom(0), AugmentConfig(crop=(40, 32, 32)), 0)

    def test_flip_is_an_involution(self):
        s = generate_phantom(5)
        for axis in range(3):
            twice = flip(flip(s, axis), axis)
            assert np.array_equal(twice.image, s.image) and np.array_equal(twice.labels, s.labels)

    def test_label_alphabet_survives(self):
        s = generate_phantom(6)
        for d in range(20):
            out = augment(s, AugmentConfig(crop=(28, 28, 28), seed=1), d)
            assert set(np.unique(out.labels)) <= {0, 1, 2, 3, 4}
            assert out.labels.dtype == s.labels.dtype

    def test_rotation_round_trip(self):
        for seed, (angle, axes) in enumerate([(10.0, (0, 1)), (-7.5, (1, 2)), (4.0, (0, 2))]):
            s = generate_phantom(seed)
            back = rotate(rotate(s, angle, axes), -angle, axes)
            assert (back.labels == s.labels).mean() >= 0.98

    def test_contrast_preserves_brain_mean(self):
        rng = np.random.default_rng(7)
        for seed in range(5):
            img = generate_phantom(seed).image
            f = rng.uniform(0.8, 1.2, 4)
            out = adjust_contrast(img, f)
            brain = brain_mask(img)
            for c in range(4):
                before = img[c][brain].astype(np.float64).mean()
                after = out[c][brain].astype(np.float64).mean()
                assert abs(after - before) <= 1e-5 * abs(before)
            assert np.all(out[:, ~brain] == 0)

    def test_noise_only_inside_the_brain(self):
        img = generate_phantom(8).image
        out = add_noise(img, 0.01, np.random.default_rng(0))
        brain = brain_mask(img)
        assert np.array_equal(out[:, ~brain], img[:, ~brain])
        assert np.all(out[:, brain] != img[:, brain])


def test_augmentation_statistics_over_10k_draws():
    # draws replay the same generator sequence augment() consumes for each draw_seed
    s = generate_phantom(0, (16, 16, 16))
    cfg = AugmentConfig(seed=11)
    small = np.ones((4, 2, 2, 2), np.float32)
    flips, factors, angles, noise = [], [], [], []
    for d in range(DRAWS):
        rng = np.random.default_rng([cfg.seed, d])
        draw = draw_augmentation(s, cfg, rng)
        flips.append(draw.flips)
        factors.append(draw.contrast)
        angles.append(draw.angle_deg)
        noise.append((add_noise(small, cfg.noise_sigma, rng) - small).ravel())
    rate = np.mean(flips, axis=0)
    assert np.all(np.abs(rate - 0.5) <= 0.02), rate
    sd = np.concatenate(noise).astype(np.float64).std()
    assert abs(sd - 0.01) <= 0.0005, sd
    f = np.concatenate(factors)
    assert f.min() >= 0.8 and f.max() <= 1.2
    assert np.max(np.abs(angles)) <= 10.0


def random_volume(dtype, seed=0, shape=(5, 4, 3)):
    rng = np.random.default_rng(seed)
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        return rng.integers(info.min, info.max, size=shape, endpoint=True).astype(dtype)
    return rng.normal(size=shape).astype(dtype)


class TestNifti:
    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32, np.float64])
    def test_round_trip(self, tmp_path, dtype):
        vol = random_volume(dtype)
        path = tmp_path / "v.nii"
        write_nifti(vol, path, pixdim=(1.0, 0.9, 1.1, 2.5, 0, 0, 0, 0))
        back, hdr = read_nifti(path)
        assert back.dtype == vol.dtype and np.array_equal(back, vol)
        assert hdr.shape == vol.shape and hdr.spacing == pytest.approx((0.9, 1.1, 2.5), rel=1e-7)
        assert hdr.vox_offset == 352 and hdr.magic == b"n+1\x00"

    def test_header_constant(self, tmp_path):
        path = tmp_path / "v.nii"
        write_nifti(np.zeros((2, 2, 2), np.float32), path)
        raw = path.read_bytes()
        assert struct.unpack("<i", raw[:4])[0] == 348 and raw[344:348] == b"n+1\x00"

    @pytest.mark.parametrize("dtype", [np.int16, np.float32, np.float64])
    def test_big_endian_twin(self, tmp_path, dtype):
        vol = random_volume(dtype, seed=1)
        (tmp_path / "le.nii").write_bytes(encode_nifti(vol, endian="<"))
        (tmp_path / "be.nii").write_bytes(encode_nifti(vol, endian=">"))
        le, hle = read_nifti(tmp_path / "le.nii")
        be, hbe = read_nifti(tmp_path / "be.nii")
        assert hbe.endian == ">" and hle.endian == "<"
        assert np.array_equal(le, be) and hle == hbe

    def test_golden_bytes(self):
        vol = np.arange(8, dtype=np.float32).reshape(2, 2, 2) * 0.5 - 1
        got = encode_nifti(vol, pixdim=(1.0, 1.0, 1.5, 2.0, 0, 0, 0, 0))
        lines = [binascii.hexlify(got[i : i + 16], " ").decode() for i in range(0, len(got), 16)]
        assert "\n".join(lines) + "\n" == GOLDEN.read_text()

    def test_scaling(self, tmp_path):
        path = tmp_path / "s.nii"
        write_nifti(np.array([[[1, 2]]], np.int16), path, scl_slope=0.5, scl_inter=3.0)
        back, _ = read_nifti(path)
        assert back.dtype == np.float64 and np.array_equal(back, [[[3.5, 4.0]]])

    def test_detached_header_rejected(self, tmp_path):
        raw = bytearray(encode_nifti(np.zeros((2, 2, 2), np.float32)))
        raw[344:348] = b"ni1\x00"
        (tmp_path / "d.nii").write_bytes(raw)
        with pytest.raises(NiftiError, match="ni1"):
            read_nifti(tmp_path / "d.nii")

    def test_bad_magic(self, tmp_path):
        raw = bytearray(encode_nifti(np.zeros((2, 2, 2), np.float32)))
        raw[344:348] = b"abcd"
        (tmp_path / "m.nii").write_bytes(raw)
        with pytest.raises(NiftiError, match="magic"):
            read_nifti(tmp_path / "m.nii")

    def test_truncated(self, tmp_path):
        raw = encode_nifti(np.zeros((4, 4, 4), np.float32))
        (tmp_path / "t.nii").write_bytes(raw[:-10])
        (tmp_path / "h.nii").write_bytes(raw[:200])
        for name in ("t.nii", "h.nii"):
            with pytest.raises(NiftiError, match="truncated"):
                read_nifti(tmp_path / name)

    def test_small_vox_offset(self, tmp_path):
        raw = bytearray(encode_nifti(np.zeros((2, 2, 2), np.float32)))
        raw[108:112] = struct.pack("<f", 348.0)
        (tmp_path / "o.nii").write_bytes(raw)
        with pytest.raises(NiftiError, match="vox_offset"):
            read_nifti(tmp_path / "o.nii")

    def test_unsupported_datatype(self, tmp_path):
        raw = bytearray(encode_nifti(np.zeros((2, 2, 2), np.float32)))
        raw[70:72] = struct.pack("<h", 512)
        (tmp_path / "u.nii").write_bytes(raw)
        with pytest.raises(NiftiError, match="datatype"):
            read_nifti(tmp_path / "u.nii")
        with pytest.raises(NiftiError):
            encode_nifti(np.zeros((2, 2, 2), np.int64))

    def test_gzip_rejected(self, tmp_path):
        (tmp_path / "g.nii").write_bytes(b"\x1f\x8b" + b"\x00" * 400)
        with pytest.raises(NiftiError, match="gzip"):
            read_nifti(tmp_path / "g.nii")


def test_phantom_dataset_round_trip(tmp_path):
    manifest = write_phantom_dataset(tmp_path, 2, (16, 16, 16), seed=3)
    cases = load_manifest_cases(manifest)
    for i, case in enumerate(cases):
        ref = generate_phantom(3 + i, (16, 16, 16))
        assert case.case_id == ref.case_id
        assert np.array_equal(case.image, ref.image) and np.array_equal(case.labels, ref.labels)


def test_manifest_errors_name_the_case(tmp_path):
    manifest = write_phantom_dataset(tmp_path, 1, (16, 16, 16))
    (tmp_path / "phantom_0000_seg.nii").unlink()
    with pytest.raises(ValueError, match="phantom_0000"):
        load_manifest_cases(manifest)
