import math

import numpy as np
import pytest
from scipy import ndimage

from nfa_inspect.features import (
    FeatureStack,
    FilterBank,
    GaborBankConfig,
    PatchPcaConfig,
    apply_bank,
    build_gabor_bank,
    decorrelate_channels,
    fit_patch_pca,
    gabor_kernel,
    ingest_external_features,
    patch_pca_features,
)
from nfa_inspect.imagio import FormatError, write_nfat
from nfa_inspect.statcore import fit_normality, mahalanobis_map


def explicit_patches(plane, s, border="reflect"):
    """Patch matrix by plain Python loops (one row per patch, raster order)."""
    r = s // 2
    if border == "reflect":
        src = np.pad(plane, r, mode="reflect")
        rows, cols = plane.shape
    else:
        src = plane
        rows, cols = plane.shape[0] - s + 1, plane.shape[1] - s + 1
    out = []
    for y in range(rows):
        for x in range(cols):
            out.append(src[y:y + s, x:x + s].ravel())
    return np.array(out)


class TestPatchPcaFit:
    def test_brute_force_covariance(self):
        plane = np.random.default_rng(0).uniform(size=(16, 16))
        bank = fit_patch_pca(plane, PatchPcaConfig(3, 9))
        patches = explicit_patches(plane, 3)
        cov = np.cov(patches, rowvar=False, bias=True)
        ref = np.sort(np.linalg.eigvalsh(cov))[::-1]
        np.testing.assert_allclose(bank.eigenvalues, ref, rtol=0, atol=1e-9)
        np.testing.assert_allclose(bank.mean, patches.mean(axis=0), atol=1e-12)

    def test_brute_force_clamp(self):
        plane = np.random.default_rng(1).uniform(size=(14, 19))
        bank = fit_patch_pca(plane, PatchPcaConfig(5, 7), border="clamp")
        patches = explicit_patches(plane, 5, "clamp")
        ref = np.sort(np.linalg.eigvalsh(np.cov(patches, rowvar=False, bias=True)))[::-1]
        np.testing.assert_allclose(bank.eigenvalues, ref[:7], rtol=0, atol=1e-9)

    def test_orthonormal_kernels(self):
        plane = np.random.default_rng(2).normal(size=(40, 40))
        bank = fit_patch_pca(plane, PatchPcaConfig(7, 20))
        k = np.stack([kk.ravel() for kk in bank.kernels])
        np.testing.assert_allclose(k @ k.T, np.eye(20), atol=1e-9)
        assert np.all(np.diff(bank.eigenvalues) <= 0)

    def test_sign_convention(self):
        plane = np.random.default_rng(3).normal(size=(30, 30))
        for kern in fit_patch_pca(plane, PatchPcaConfig(5, 10)).kernels:
            flat = kern.ravel()
            assert flat[np.argmax(np.abs(flat))] > 0

    def test_constant_plane_degenerate(self):
        bank = fit_patch_pca(np.full((20, 20), 0.4), PatchPcaConfig(5, 6))
        assert bank.degenerate
        assert np.all(bank.eigenvalues > 0)
        assert np.all(np.isfinite(np.stack(bank.kernels)))

    def test_config_validation(self):
        for s, m in [(4, 3), (1, 1), (3, 10), (5, 0)]:
            with pytest.raises(ValueError):
                PatchPcaConfig(s, m)
        with pytest.raises(ValueError):
            fit_patch_pca(np.zeros((4, 4)), PatchPcaConfig(5, 3))

    def test_deterministic(self):
        plane = np.random.default_rng(4).normal(size=(33, 27))
        a = fit_patch_pca(plane, PatchPcaConfig(5, 8))
        b = fit_patch_pca(plane.copy(), PatchPcaConfig(5, 8))
        np.testing.assert_array_equal(np.stack(a.kernels), np.stack(b.kernels))


class TestApplyBank:
    @pytest.mark.parametrize("border", ["reflect", "clamp"])
    def test_projection_equals_patch_inner_products(self, border):
        plane = np.random.default_rng(5).random((8, 8))
        bank = fit_patch_pca(plane, PatchPcaConfig(3, 9), border=border)
        out = apply_bank(plane, bank, border=border).planes
        for y in range(1, 7):
            for x in range(1, 7):
                patch = plane[y - 1:y + 2, x - 1:x + 2].ravel() - bank.mean
                ref = [patch @ k.ravel() for k in bank.kernels]
                np.testing.assert_allclose(out[:, y, x], ref, atol=1e-6)

    def test_reflect_matches_scipy_correlate(self):
        plane = np.random.default_rng(6).random((21, 26))
        bank = build_gabor_bank(GaborBankConfig(kernel_sizes=(7, 11)))
        out = apply_bank(plane, bank).planes
        for i, kern in enumerate(bank.kernels):
            # numpy "reflect" (edge not repeated) is scipy's "mirror"
            ref = ndimage.correlate(plane, kern, mode="mirror")
            np.testing.assert_allclose(out[i], ref, atol=1e-12)

    def test_clamp_edges_copy_nearest_window(self):
        plane = np.random.default_rng(7).random((15, 15))
        bank = fit_patch_pca(plane, PatchPcaConfig(5, 4), border="clamp")
        out = apply_bank(plane, bank, border="clamp").planes
        np.testing.assert_array_equal(out[:, 0, 0], out[:, 2, 2])
        np.testing.assert_array_equal(out[:, 14, 7], out[:, 12, 7])
        assert apply_bank(plane, bank, border="clamp").margin == 2
        assert apply_bank(plane, bank).margin == 0
        assert patch_pca_features(plane, PatchPcaConfig(5, 4), "clamp")[1].margin == 2

    def test_delta_kernel_identity(self):
        plane = np.random.default_rng(8).random((9, 9))
        delta = np.zeros((3, 3))
        delta[1, 1] = 1.0
        out = apply_bank(plane, FilterBank([delta])).planes[0]
        np.testing.assert_array_equal(out, plane)
        pca_like = FilterBank([delta], kind="pca", mean=np.full(9, 0.25))
        np.testing.assert_allclose(apply_bank(plane, pca_like).planes[0], plane - 0.25)

    def test_zero_plane(self):
        out = apply_bank(np.zeros((31, 31)), build_gabor_bank()).planes
        assert out.shape == (72, 31, 31)
        assert np.all(out == 0.0)

    def test_linearity(self):
        rng = np.random.default_rng(9)
        x, y = rng.random((2, 20, 20))
        bank = build_gabor_bank(GaborBankConfig(kernel_sizes=(7, 9)))
        fa = apply_bank(2.0 * x - 0.5 * y, bank).planes
        fb = 2.0 * apply_bank(x, bank).planes - 0.5 * apply_bank(y, bank).planes
        np.testing.assert_allclose(fa, fb, atol=1e-9)

    def test_plane_too_small(self):
        with pytest.raises(ValueError):
            apply_bank(np.zeros((20, 20)), build_gabor_bank())

    def test_variance_matches_eigenvalues(self):
        plane = np.random.default_rng(10).normal(size=(512, 512))
        bank, stack = patch_pca_features(plane, PatchPcaConfig(5, 10), border="reflect")
        # exact over all pixels, since the fit used one patch per pixel
        np.testing.assert_allclose(stack.planes.var(axis=(1, 2)), bank.eigenvalues, rtol=1e-9)
        interior = stack.planes[:, 2:-2, 2:-2]
        np.testing.assert_allclose(interior.var(axis=(1, 2)), bank.eigenvalues, rtol=0.02)

    @pytest.mark.parametrize("border", ["reflect", "clamp"])
    def test_shared_pass_matches_two_step(self, border):
        plane = np.random.default_rng(11).random((40, 37))
        cfg = PatchPcaConfig(7, 12)
        bank, stack = patch_pca_features(plane, cfg, border)
        ref = apply_bank(plane, fit_patch_pca(plane, cfg, border), border=border).planes
        np.testing.assert_allclose(stack.planes, ref, atol=1e-10)
        assert stack.independence_length == 7

    def test_sign_flip_leaves_d2_unchanged(self):
        plane = np.random.default_rng(12).random((40, 40))
        bank = fit_patch_pca(plane, PatchPcaConfig(5, 8))
        flipped = FilterBank([-k if i % 3 == 0 else k for i, k in enumerate(bank.kernels)],
                             kind="pca", eigenvalues=bank.eigenvalues, mean=bank.mean)
        maps = []
        for b in (bank, flipped):
            stack = apply_bank(plane, b)
            maps.append(mahalanobis_map(stack, fit_normality(stack)).d2)
        np.testing.assert_allclose(maps[0], maps[1], rtol=0, atol=1e-9)


class TestGabor:
    def test_default_bank(self):
        bank = build_gabor_bank()
        assert len(bank) == 72 == GaborBankConfig().num_filters
        assert min(bank.kernel_sizes) == 7 and max(bank.kernel_sizes) == 31
        assert bank.independence_length == 31
        for k in bank.kernels:
            assert abs(k.sum()) < 1e-9
            assert np.linalg.norm(k) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("size", [7, 15, 31])
    @pytest.mark.parametrize("theta", [0.0, math.pi / 4, 1.1])
    def test_half_turn_symmetry(self, size, theta):
        lam, sigma = 0.5 * size, 0.4 * size
        for phase in (0.0, math.pi / 2, 0.7):
            a = gabor_kernel(size, theta, phase, lam, sigma)
            b = gabor_kernel(size, theta + math.pi, phase, lam, sigma)
            # a half turn mirrors the carrier, which is the same as negating the phase
            c = gabor_kernel(size, theta, -phase, lam, sigma)
            np.testing.assert_allclose(b, c, atol=1e-12)
        np.testing.assert_allclose(gabor_kernel(size, theta + math.pi, 0.0, lam, sigma),
                                   gabor_kernel(size, theta, 0.0, lam, sigma), atol=1e-12)
        np.testing.assert_allclose(
            gabor_kernel(size, theta + math.pi, math.pi / 2, lam, sigma),
            -gabor_kernel(size, theta, math.pi / 2, lam, sigma), atol=1e-12)

    def test_empty_lists(self):
        with pytest.raises(ValueError):
            build_gabor_bank(GaborBankConfig(orientations=()))
        with pytest.raises(ValueError):
            build_gabor_bank(GaborBankConfig(kernel_sizes=(8,)))


class TestExternal:
    def test_white_channels(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(4, 400))
        x -= x.mean(axis=1, keepdims=True)
        # rows of vt are orthonormal and orthogonal to the constant vector
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        x = vt * math.sqrt(400)
        comps, evals = decorrelate_channels(x.reshape(4, 20, 20), 4)
        np.testing.assert_allclose(comps.reshape(4, -1).var(axis=1), 1.0, atol=1e-6)

    def test_resnet_like_grid(self, tmp_path):
        tensor = np.random.default_rng(14).normal(size=(64, 56, 56)).astype(np.float32)
        write_nfat(tmp_path / "f.nfat", tensor)
        stack = ingest_external_features(tmp_path / "f.nfat", (224, 224))
        assert stack.planes.shape == (5, 224, 224)
        assert stack.independence_length == 4
        assert stack.meta["stride"] == 4
        override = ingest_external_features(tmp_path / "f.nfat", (224, 224), stilde=9)
        assert override.independence_length == 9

    def test_errors(self, tmp_path):
        write_nfat(tmp_path / "f.nfat", np.zeros((3, 8, 8)))
        with pytest.raises(ValueError):
            ingest_external_features(tmp_path / "f.nfat", (32, 32), num_components=4)
        with pytest.raises(ValueError):
            ingest_external_features(tmp_path / "f.nfat", (50, 32), num_components=2)
        raw = bytearray((tmp_path / "f.nfat").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "g.nfat").write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            ingest_external_features(tmp_path / "g.nfat", (32, 32), num_components=2)


class TestFeatureStack:
    def test_validation(self):
        with pytest.raises(ValueError):
            FeatureStack(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            FeatureStack(np.zeros((1, 4, 4)), independence_length=0.5)
