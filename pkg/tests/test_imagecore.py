import numpy as np
import pytest

from silicon import imagecore as ic


@pytest.fixture
def m():
    return ic.StainMatrix.default()


def random_image(rng, h=16, w=16):
    return rng.uniform(0.05, 1.0, size=(h, w, 3))


class TestStainMatrix:
    def test_rows_unit_norm(self, m):
        assert np.allclose(np.linalg.norm(m.rows, axis=1), 1.0, atol=1e-9)

    def test_inverse_identity(self, m):
        assert np.max(np.abs(m.rows @ m.inverse - np.eye(3))) < 1e-9

    def test_singular_rejected(self):
        row = np.array([1.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            ic.StainMatrix(np.stack([row, row, np.array([0.0, 1.0, 0.0])]))

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError):
            ic.StainMatrix(np.eye(3) * 2.0)


class TestRgbToHed:
    def test_white_is_zero_od(self, m):
        img = np.ones((4, 4, 3))
        assert np.allclose(ic.rgb_to_hed(img, m), 0.0, atol=1e-6)

    def test_pure_h_pixel(self, m):
        # Beer-Lambert forward render of 0.5 OD of pure Hematoxylin.
        img = np.power(10.0, -0.5 * m.rows[0])[None, None, :] * np.ones((2, 2, 3))
        hed = ic.rgb_to_hed(img, m)
        assert np.allclose(hed[:, :, 0], 0.5, atol=1e-6)
        assert np.allclose(hed[:, :, 1:], 0.0, atol=1e-6)

    def test_round_trip_from_rgb(self, m):
        # Images rendered from the stain model deconvolve without clamping,
        # which is the regime where the round trip must be the identity.
        rng = np.random.default_rng(0)
        img = ic.hed_to_rgb(rng.uniform(0.0, 1.5, size=(16, 16, 3)), m)
        back = ic.hed_to_rgb(ic.rgb_to_hed(img, m), m)
        assert np.max(np.abs(back - img)) < 1e-4

    def test_output_nonnegative(self, m):
        rng = np.random.default_rng(1)
        assert np.min(ic.rgb_to_hed(random_image(rng), m)) >= 0.0


class TestHedToRgb:
    def test_zero_od_is_white(self, m):
        assert np.allclose(ic.hed_to_rgb(np.zeros((3, 3, 3)), m), 1.0)

    def test_round_trip_od_fields(self, m):
        rng = np.random.default_rng(2)
        errs = []
        for _ in range(100):
            od = rng.uniform(0.0, 2.0, size=(8, 8, 3))
            rec = ic.rgb_to_hed(ic.hed_to_rgb(od, m), m)
            errs.append(np.max(np.abs(rec - od)))
        assert max(errs) <= 1e-4

    def test_huge_od_saturates(self, m):
        od = np.zeros((2, 2, 3))
        od[:, :, 0] = 10.0
        rgb = ic.hed_to_rgb(od, m)
        assert np.all(np.isfinite(rgb))
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0
        assert np.max(rgb[:, :, :2]) < 1e-2  # H stain absorbs R and G heavily


class TestExtractHChannel:
    def test_white_image(self, m):
        assert np.allclose(ic.extract_h_channel(np.ones((4, 4, 3)), m), 0.0)

    def test_eosin_only_image(self, m):
        od = np.zeros((4, 4, 3))
        od[:, :, 1] = 0.8  # Eosin only
        img = ic.hed_to_rgb(od, m)
        assert np.max(ic.extract_h_channel(img, m)) <= 0.02

    def test_uniform_h(self, m):
        od = np.zeros((4, 4, 3))
        od[:, :, 0] = 0.75
        img = ic.hed_to_rgb(od, m)
        assert np.allclose(ic.extract_h_channel(img, m), 0.5, atol=1e-3)

    def test_range(self, m):
        rng = np.random.default_rng(3)
        for _ in range(10):
            h = ic.extract_h_channel(rng.uniform(0, 1, size=(6, 6, 3)), m)
            assert h.min() >= 0.0 and h.max() <= 1.0


def enumerate_starts(dim, patch, stride):
    """Brute-force oracle: all lattice starts plus the flush one, deduped."""
    starts = sorted({min(s, dim - patch) for s in range(0, dim, stride) if s <= dim - patch} | {dim - patch})
    return starts


class TestPatchGrid:
    def test_single_patch(self):
        grid = ic.make_patch_grid(256, 256, 256, 64)
        assert grid.origins == ((0, 0),)

    def test_counting_formula_1000(self):
        grid = ic.make_patch_grid(1000, 1000, 256, 93)
        assert len(grid) == 81
        starts = enumerate_starts(1000, 256, 93)
        assert len(starts) == 9

    def test_flush_origin_300(self):
        grid = ic.make_patch_grid(300, 300, 256, 200)
        assert len(grid) == 4
        assert max(r for r, _ in grid.origins) == 44

    def test_matches_enumeration(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            dim_h = int(rng.integers(16, 200))
            dim_w = int(rng.integers(16, 200))
            patch = int(rng.integers(4, min(dim_h, dim_w) + 1))
            stride = int(rng.integers(1, patch + 4))
            grid = ic.make_patch_grid(dim_h, dim_w, patch, stride)
            rows = enumerate_starts(dim_h, patch, stride)
            cols = enumerate_starts(dim_w, patch, stride)
            assert sorted(grid.origins) == [(r, c) for r in rows for c in cols]
            expect_r = int(np.ceil((dim_h - patch) / stride)) + 1 if dim_h > patch else 1
            assert len(rows) == expect_r

    def test_full_coverage(self):
        grid = ic.make_patch_grid(37, 53, 8, 5)
        covered = np.zeros((37, 53), dtype=bool)
        for r, c in grid.origins:
            covered[r:r + 8, c:c + 8] = True
        assert covered.all()

    def test_patch_too_large(self):
        with pytest.raises(ValueError, match="resize"):
            ic.make_patch_grid(100, 100, 128, 32)

    def test_csv_round_trip(self):
        grid = ic.make_patch_grid(70, 90, 32, 20)
        back = ic.PatchGrid.from_csv(grid.to_csv(), 32, 20)
        assert back.origins == grid.origins


class TestImageIO:
    def test_save_load_identity(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, size=(9, 11, 3)).astype(np.float64) / 255.0
        path = tmp_path / "img.png"
        ic.save_image(img, path)
        assert np.array_equal(ic.load_image(path), img)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ic.load_image(tmp_path / "nope.png")

    def test_non_rgb_payload(self, tmp_path):
        from PIL import Image

        path = tmp_path / "gray.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(path)
        with pytest.raises(ic.NotRgbError):
            ic.load_image(path)

    def test_corrupt_stream(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"\x89PNG\r\n\x1a\nthis is not a png")
        with pytest.raises(ic.CorruptImageError):
            ic.load_image(path)

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        mask = rng.uniform(size=(7, 8)) > 0.5
        path = tmp_path / "m.png"
        ic.save_mask(mask, path)
        assert np.array_equal(ic.load_mask(path), mask)
