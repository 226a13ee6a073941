import io

import numpy as np
import pytest
from PIL import Image

from he2ihc.data import (
    BicubicResolver,
    DatasetManifest,
    MagnificationBranch,
    MagnificationPolicy,
    ManifestEntry,
    SuperResolver,
    downsample_macro,
    load_pairs,
    paired_crop_zoom,
    register_resolver,
    sample_at,
    sample_batch,
    size_normalize,
)
from he2ihc.errors import DataError
from he2ihc.images import ImageTile, StainDomain, load_tile, save_tile
from he2ihc.losses import gaussian_kernel

from conftest import random_tile
from oracles import ref_bicubic, ref_blur_downsample


def _png_bytes(size=8, value=128):
    arr = np.full((size, size, 3), value, dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def make_pair_dirs(root, names, split="train", size=8):
    payload = _png_bytes(size)
    for sub in (f"{split}A", f"{split}B"):
        d = root / sub
        d.mkdir(parents=True, exist_ok=True)
        for name in names:
            (d / name).write_bytes(payload)


# ---------------------------------------------------------------------------
# ImageTile contract.


class TestImageTile:
    def test_valid_roundtrip(self, rng, tmp_path):
        tile = random_tile(rng, 16)
        save_tile(tile, tmp_path / "t.png")
        back = load_tile(tmp_path / "t.png", StainDomain.HE)
        assert back.size == (16, 16)
        assert np.abs(back.pixels - tile.pixels).max() <= 1.0 / 255.0

    def test_rejects_bad_range(self, rng):
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            ImageTile(rng.random((16, 16, 3)) + 1.0, StainDomain.HE)

    def test_rejects_non_finite(self, rng):
        bad = rng.random((16, 16, 3))
        bad[0, 0, 0] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            ImageTile(bad, StainDomain.HE)

    def test_rejects_bad_geometry(self, rng):
        with pytest.raises(DataError, match="divisible"):
            ImageTile(rng.random((10, 10, 3)), StainDomain.HE)
        with pytest.raises(DataError, match="divisible"):
            ImageTile(rng.random((4, 4, 3)), StainDomain.HE)
        with pytest.raises(DataError):
            ImageTile(rng.random((16, 16, 4)), StainDomain.HE)


# ---------------------------------------------------------------------------
# load_pairs.


class TestLoadPairs:
    def test_pairs_by_name_sorted(self, tmp_path):
        make_pair_dirs(tmp_path, ["b.png", "a.png"])
        manifest = load_pairs(tmp_path, "train")
        assert len(manifest) == 2
        assert [e.id for e in manifest.entries] == ["a", "b"]
        assert manifest.entries[0].he.endswith("trainA/a.png")
        assert manifest.entries[0].ihc.endswith("trainB/a.png")

    def test_orphan_named(self, tmp_path):
        (tmp_path / "trainA").mkdir()
        (tmp_path / "trainB").mkdir()
        (tmp_path / "trainA" / "a.png").write_bytes(_png_bytes())
        (tmp_path / "trainB" / "b.png").write_bytes(_png_bytes())
        with pytest.raises(DataError, match="unpaired tile a.png"):
            load_pairs(tmp_path, "train")

    def test_unreadable_image_named(self, tmp_path):
        make_pair_dirs(tmp_path, ["a.png"])
        (tmp_path / "trainA" / "a.png").write_bytes(b"not a png at all")
        with pytest.raises(DataError, match="unreadable image"):
            load_pairs(tmp_path, "train")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match="missing dataset directory"):
            load_pairs(tmp_path, "train")

    def test_bad_split(self, tmp_path):
        with pytest.raises(DataError, match="split"):
            load_pairs(tmp_path, "validation")

    def test_full_scale_corpus_counts(self, tmp_path):
        # same layout and cardinality as the public benchmark corpus
        train_names = [f"{i:05d}.png" for i in range(4642)]
        test_names = [f"{i:05d}.png" for i in range(1000)]
        make_pair_dirs(tmp_path, train_names, "train")
        make_pair_dirs(tmp_path, test_names, "test")
        assert len(load_pairs(tmp_path, "train")) == 4642
        assert len(load_pairs(tmp_path, "test")) == 1000

    def test_manifest_jsonl_roundtrip(self, tmp_path):
        make_pair_dirs(tmp_path, ["a.png", "b.png"])
        manifest = load_pairs(tmp_path, "train")
        out = tmp_path / "manifest.jsonl"
        manifest.to_jsonl(out)
        again = DatasetManifest.from_jsonl(out, "train")
        assert again == manifest
        first = out.read_bytes()
        manifest.to_jsonl(out)
        assert out.read_bytes() == first  # byte-identical re-emission

    def test_duplicate_ids_rejected(self):
        entries = (ManifestEntry("x/a.png", "y/a.png", "a"), ManifestEntry("x/b.png", "y/b.png", "a"))
        with pytest.raises(DataError, match="duplicate"):
            DatasetManifest(entries, "train")


# ---------------------------------------------------------------------------
# downsample_macro.


class TestDownsampleMacro:
    def test_size_arithmetic(self, rng):
        tile = random_tile(rng, 64)
        assert downsample_macro(tile, 2).size == (32, 32)
        assert downsample_macro(tile, 4).size == (16, 16)

    def test_constant_stays_constant(self):
        tile = ImageTile(np.full((32, 32, 3), 0.25), StainDomain.HE)
        out = downsample_macro(tile, 2)
        assert np.allclose(out.pixels, 0.25, atol=1e-12)

    def test_checkerboard_matches_bruteforce_oracle(self):
        base = np.indices((16, 16)).sum(axis=0) % 2
        img = np.repeat(base[..., None], 3, axis=2).astype(np.float64)
        tile = ImageTile(img, StainDomain.HE)
        got = downsample_macro(tile, 2).pixels
        want = ref_blur_downsample(img, gaussian_kernel(5, 1.0), 2)
        assert np.abs(got - want).max() < 1e-9

    def test_random_matches_oracle_factor4(self, rng):
        img = rng.random((32, 32, 3))
        got = downsample_macro(ImageTile(img, StainDomain.HE), 4).pixels
        want = ref_blur_downsample(img, gaussian_kernel(5, 1.0), 4)
        assert np.abs(got - want).max() < 1e-9

    def test_bad_factor(self, rng):
        with pytest.raises(DataError, match="factor"):
            downsample_macro(random_tile(rng, 16), 3)

    def test_output_too_small_rejected(self, rng):
        with pytest.raises(DataError):
            downsample_macro(random_tile(rng, 8), 2)  # would yield a 4px tile


# ---------------------------------------------------------------------------
# size_normalize.


class FailingResolver(SuperResolver):
    name = "failing"

    def upscale(self, pixels, target):
        raise RuntimeError("backend exploded")


class SpyResolver(SuperResolver):
    """Records what it is asked to upscale; used to observe pre-enlargement crops."""

    name = "spy"

    def __init__(self):
        self.inputs = []
        self._inner = BicubicResolver()

    def upscale(self, pixels, target):
        self.inputs.append(np.array(pixels))
        return self._inner.upscale(pixels, target)


class TestSizeNormalize:
    def test_identity_when_already_target(self, rng):
        tile = random_tile(rng, 32)
        assert size_normalize(tile, 32) is tile

    def test_constant_upscale(self):
        tile = ImageTile(np.full((16, 16, 3), 0.6), StainDomain.HE)
        out = size_normalize(tile, 64)
        assert out.size == (64, 64)
        assert np.allclose(out.pixels, 0.6, atol=1e-9)

    def test_gradient_ramp_matches_direct_bicubic_formula(self):
        ramp = np.linspace(0.0, 1.0, 16)[None, :, None] * np.ones((16, 1, 3))
        diag = ramp + np.linspace(0.0, 0.5, 16)[:, None, None]
        img = np.clip(diag / diag.max(), 0, 1)
        tile = ImageTile(img, StainDomain.HE)
        got = size_normalize(tile, 64).pixels
        want = np.clip(ref_bicubic(img, 64), 0.0, 1.0)
        assert np.abs(got - want).max() < 1e-6

    def test_resolver_failure_carries_name(self, rng):
        with pytest.raises(DataError, match="failing"):
            size_normalize(random_tile(rng, 16), 32, FailingResolver())

    def test_output_clamped(self, rng):
        # bicubic overshoots near sharp edges; output must stay in [0, 1]
        img = np.zeros((16, 16, 3))
        img[8:] = 1.0
        out = size_normalize(ImageTile(img, StainDomain.HE), 64)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_bad_target(self, rng):
        with pytest.raises(DataError, match="target"):
            size_normalize(random_tile(rng, 16), 30)

    def test_registry(self):
        assert isinstance(register_resolver(SpyResolver), type)
        from he2ihc.data import get_resolver

        assert get_resolver("spy").name == "spy"
        with pytest.raises(DataError, match="no super-resolver"):
            get_resolver("bsrgan")


# ---------------------------------------------------------------------------
# paired_crop_zoom.


class TestPairedCropZoom:
    def test_published_geometry_1024_to_512(self, rng):
        he = random_tile(rng, 1024, StainDomain.HE)
        ihc = random_tile(rng, 1024, StainDomain.IHC)
        sample = paired_crop_zoom(he, ihc, zoom=4, rng_seed=3, unified_size=512)
        assert sample.he.size == (512, 512)
        assert sample.ihc.size == (512, 512)
        assert sample.branch is MagnificationBranch.ZOOM_4X
        r, c = sample.crop_origin
        assert 0 <= r <= 1024 - 128 and 0 <= c <= 1024 - 128

    def test_deterministic_origin(self, rng):
        he = random_tile(rng, 64, StainDomain.HE)
        ihc = random_tile(rng, 64, StainDomain.IHC)
        s1 = paired_crop_zoom(he, ihc, 2, rng_seed=42, unified_size=32)
        s2 = paired_crop_zoom(he, ihc, 2, rng_seed=42, unified_size=32)
        assert s1.crop_origin == s2.crop_origin
        assert np.array_equal(s1.he.pixels, s2.he.pixels)

    def test_crop_content_matches_source_subwindow(self, rng):
        he = random_tile(rng, 64, StainDomain.HE)
        ihc = random_tile(rng, 64, StainDomain.IHC)
        spy = SpyResolver()
        sample = paired_crop_zoom(he, ihc, 4, rng_seed=9, unified_size=32, sr=spy)
        r, c = sample.crop_origin
        assert len(spy.inputs) == 2  # one upscale per domain
        assert np.array_equal(spy.inputs[0], he.pixels[r : r + 8, c : c + 8])
        assert np.array_equal(spy.inputs[1], ihc.pixels[r : r + 8, c : c + 8])

    def test_same_window_both_domains(self, rng):
        # identical content in both tiles must yield identical crops
        pixels = rng.random((64, 64, 3))
        he = ImageTile(pixels, StainDomain.HE)
        ihc = ImageTile(pixels.copy(), StainDomain.IHC)
        sample = paired_crop_zoom(he, ihc, 2, rng_seed=5, unified_size=32)
        assert np.array_equal(sample.he.pixels, sample.ihc.pixels)

    def test_oversize_crop_rejected(self, rng):
        he = random_tile(rng, 16, StainDomain.HE)
        ihc = random_tile(rng, 16, StainDomain.IHC)
        with pytest.raises(DataError, match="exceeds"):
            paired_crop_zoom(he, ihc, 2, 0, unified_size=64)

    def test_size_mismatch_rejected(self, rng):
        with pytest.raises(DataError, match="differ"):
            paired_crop_zoom(
                random_tile(rng, 32, StainDomain.HE), random_tile(rng, 64, StainDomain.IHC), 2, 0, 32
            )

    def test_bad_zoom(self, rng):
        he = random_tile(rng, 64, StainDomain.HE)
        ihc = random_tile(rng, 64, StainDomain.IHC)
        with pytest.raises(DataError, match="zoom"):
            paired_crop_zoom(he, ihc, 3, 0, 32)


# ---------------------------------------------------------------------------
# sample stream.


class TestSampleStream:
    def test_degenerate_policy_all_macro(self, tiny_dataset):
        manifest = load_pairs(tiny_dataset, "train")
        policy = MagnificationPolicy(1.0, 0.0, 0.0, 0.0)
        stream = sample_batch(manifest, policy, rng_seed=1, unified_size=32)
        for _ in range(20):
            assert next(stream).branch is MagnificationBranch.MACRO_DOWNSAMPLE

    def test_native_only_policy(self, tiny_dataset):
        manifest = load_pairs(tiny_dataset, "train")
        stream = sample_batch(manifest, MagnificationPolicy.native_only(), 1, unified_size=32)
        for _ in range(10):
            assert next(stream).branch is MagnificationBranch.NATIVE_CROP

    def test_stream_determinism_first_100(self, tiny_dataset):
        manifest = load_pairs(tiny_dataset, "train")
        policy = MagnificationPolicy()
        s1 = sample_batch(manifest, policy, rng_seed=77, unified_size=32)
        s2 = sample_batch(manifest, policy, rng_seed=77, unified_size=32)
        for _ in range(100):
            a, b = next(s1), next(s2)
            assert a.branch is b.branch
            assert a.crop_origin == b.crop_origin
            assert a.he.pixels.tobytes() == b.he.pixels.tobytes()
            assert a.ihc.pixels.tobytes() == b.ihc.pixels.tobytes()

    def test_random_access_equals_stream(self, tiny_dataset):
        manifest = load_pairs(tiny_dataset, "train")
        policy = MagnificationPolicy()
        stream = sample_batch(manifest, policy, rng_seed=5, unified_size=32)
        streamed = [next(stream) for _ in range(10)]
        for i, s in enumerate(streamed):
            direct = sample_at(manifest, policy, 5, i, 32)
            assert direct.branch is s.branch
            assert direct.he.pixels.tobytes() == s.he.pixels.tobytes()

    def test_all_branches_reachable(self, tiny_dataset):
        manifest = load_pairs(tiny_dataset, "train")
        stream = sample_batch(manifest, MagnificationPolicy(), 3, unified_size=32)
        seen = {next(stream).branch for _ in range(200)}
        assert seen == set(MagnificationBranch)

    def test_unified_geometry_invariant(self, tiny_dataset):
        manifest = load_pairs(tiny_dataset, "train")
        stream = sample_batch(manifest, MagnificationPolicy(), 11, unified_size=32)
        for _ in range(40):
            s = next(stream)
            assert s.he.size == s.ihc.size == (32, 32)
            assert s.he.domain is StainDomain.HE and s.ihc.domain is StainDomain.IHC

    def test_empty_manifest_rejected(self):
        empty = DatasetManifest((), "train")
        with pytest.raises(DataError, match="empty"):
            sample_batch(empty, MagnificationPolicy(), 0)
        with pytest.raises(DataError, match="empty"):
            sample_at(empty, MagnificationPolicy(), 0, 0)

    def test_policy_validation(self):
        with pytest.raises(DataError, match="sum to 1"):
            MagnificationPolicy(0.5, 0.5, 0.5, 0.5)
        with pytest.raises(DataError, match="nonnegative"):
            MagnificationPolicy(-0.5, 0.5, 0.5, 0.5)
