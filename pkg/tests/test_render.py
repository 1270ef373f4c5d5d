import numpy as np
import pytest
import torch

from avatarnerf import parts
from avatarnerf.config import SamplerConfig
from avatarnerf.fields import RoutedSamples
from avatarnerf.render import (
    Camera,
    PixelRender,
    composite_hand_background,
    generate_rays,
    integrate,
    midpoint_depths,
    patch_pixels,
    ray_bounds_from_points,
    sample_patches,
    select_pixels,
    stratified_depths,
    subject_bbox,
)

torch.set_default_dtype(torch.float64)


def simple_camera(width=64, height=48, focal=60.0):
    # principal point on a pixel center so the optical-axis ray is exact
    k = np.array([[focal, 0, width / 2 + 0.5], [0, focal, height / 2 + 0.5], [0, 0, 1.0]])
    return Camera(intrinsics=k, extrinsics=np.eye(4), width=width, height=height)


def routed_from_arrays(color, sigma, seg=None, route=None, body_color=None, body_sigma=None):
    n = sigma.reshape(-1).shape[0]
    color = color.reshape(n, 3)
    sigma = sigma.reshape(n)
    return RoutedSamples(
        color=color,
        sigma=sigma,
        seg_logits=seg.reshape(n, 5) if seg is not None else torch.zeros(n, 5, dtype=color.dtype),
        route=route.reshape(n) if route is not None else torch.full((n,), parts.BODY, dtype=torch.long),
        body_color=body_color.reshape(n, 3) if body_color is not None else color.clone(),
        body_sigma=body_sigma.reshape(n) if body_sigma is not None else sigma.clone(),
        canonical=torch.zeros(n, 3, dtype=color.dtype),
        fg=torch.ones(n, dtype=color.dtype),
    )


class TestGenerateRays:
    def test_principal_point_is_optical_axis(self):
        cam = simple_camera()
        batch = generate_rays(cam, [[32, 24]])
        assert torch.allclose(batch.dirs[0], torch.tensor([0.0, 0.0, 1.0]), atol=1e-9)
        assert torch.allclose(batch.origins[0], torch.zeros(3), atol=0.0)

    def test_translated_extrinsics_shift_origins(self):
        cam = simple_camera()
        delta = np.array([0.3, -0.2, 0.5])
        ext = np.eye(4)
        ext[:3, 3] = delta
        moved = Camera(intrinsics=cam.intrinsics, extrinsics=ext, width=cam.width, height=cam.height)
        px = [[5, 7], [40, 30]]
        base = generate_rays(cam, px)
        shifted = generate_rays(moved, px)
        # oracle: world-to-camera [R|t] has center -R^T t; R = I here
        rot = ext[:3, :3]
        expected_center = -rot.T @ delta
        assert np.abs(shifted.origins[0].numpy() - expected_center).max() < 1e-12
        assert torch.allclose(base.dirs, shifted.dirs, atol=1e-12)

    def test_directions_unit_norm(self):
        cam = simple_camera()
        rng = np.random.default_rng(0)
        px = np.stack([rng.integers(0, cam.width, 100), rng.integers(0, cam.height, 100)], axis=-1)
        batch = generate_rays(cam, px)
        assert (batch.dirs.norm(dim=-1) - 1.0).abs().max() < 1e-9

    def test_out_of_bounds_pixel_rejected(self):
        cam = simple_camera()
        with pytest.raises(ValueError):
            generate_rays(cam, [[cam.width, 0]])

    def test_camera_validation(self):
        cam = simple_camera()
        cam.validate()
        bad = Camera(intrinsics=np.array([[60, 0, 32], [1.0, 60, 24], [0, 0, 1]]), extrinsics=np.eye(4), width=64, height=48)
        with pytest.raises(ValueError):
            bad.validate()


class TestStratified:
    def test_bin_membership(self):
        depths = stratified_depths(500, 128, 0.0, 1.0, generator=torch.Generator().manual_seed(0))
        edges = torch.linspace(0, 1, 129)
        assert (depths >= edges[:-1][None]).all()
        assert (depths < edges[1:][None] + 1e-12).all()
        assert (depths[:, 1:] > depths[:, :-1]).all()

    def test_deterministic_under_seed(self):
        a = stratified_depths(10, 16, 0.5, 2.0, generator=torch.Generator().manual_seed(7))
        b = stratified_depths(10, 16, 0.5, 2.0, generator=torch.Generator().manual_seed(7))
        assert torch.equal(a, b)

    def test_empirical_mean_matches_bin_centers(self):
        # Monte Carlo oracle: mean of sample k over many draws -> (k + 0.5) / n
        n = 128
        draws = stratified_depths(10_000, n, 0.0, 1.0, generator=torch.Generator().manual_seed(1))
        means = draws.mean(dim=0)
        centers = (torch.arange(n, dtype=torch.float64) + 0.5) / n
        sigma = (1.0 / n) / np.sqrt(12.0) / np.sqrt(10_000)
        assert (means - centers).abs().max() < 3 * sigma * 1.5  # 3-sigma with slack for the max over bins

    def test_midpoints(self):
        d = midpoint_depths(3, 4, 0.0, 1.0)
        assert torch.allclose(d[0], torch.tensor([0.125, 0.375, 0.625, 0.875]), atol=1e-12)


def make_label_map(h=96, w=96):
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[10:80, 20:76] = parts.BODY
    mask[20:34, 24:40] = parts.ARMS
    mask[40:52, 24:36] = parts.HANDS
    mask[12:24, 50:70] = parts.HEAD
    return mask


class TestSelectPixels:
    def test_phase_quota_fractions(self):
        mask = make_label_map()
        schedule = SamplerConfig(bbox_fraction=0.8)
        for iteration, hand_pct, arm_pct in [(10_000, 20, 0), (30_000, 20, 60), (50_000, 40, 40), (70_000, 80, 20), (100_000, 20, 0)]:
            gen = torch.Generator().manual_seed(iteration)
            n = 2000
            px = select_pixels(mask, schedule, iteration, n, gen)
            n_in = int(round(0.8 * n))
            labels = mask[px[:n_in, 1], px[:n_in, 0]]
            hand_frac = (labels == parts.HANDS).mean() * 100
            arm_frac = (labels == parts.ARMS).mean() * 100
            assert abs(hand_frac - hand_pct) <= 2.0, (iteration, hand_frac)
            assert abs(arm_frac - arm_pct) <= 2.0, (iteration, arm_frac)

    def test_batch_size_conserved_without_hands(self):
        mask = make_label_map()
        mask[mask == parts.HANDS] = parts.BODY
        schedule = SamplerConfig()
        px = select_pixels(mask, schedule, 10_000, 999, torch.Generator().manual_seed(0))
        assert px.shape == (999, 2)

    def test_pixels_inside_image(self):
        mask = make_label_map()
        px = select_pixels(mask, SamplerConfig(), 0, 4096, torch.Generator().manual_seed(3))
        assert px[:, 0].min() >= 0 and px[:, 0].max() < mask.shape[1]
        assert px[:, 1].min() >= 0 and px[:, 1].max() < mask.shape[0]

    def test_arm_class_ablation_clears_arm_quota(self):
        mask = make_label_map()
        px = select_pixels(mask, SamplerConfig(), 30_000, 2000, torch.Generator().manual_seed(1), arm_class=False)
        n_in = int(round(0.8 * 2000))
        labels = mask[px[:n_in, 1], px[:n_in, 0]]
        assert (labels == parts.ARMS).mean() * 100 <= 2.0


class TestIntegrate:
    def test_empty_space(self):
        depths = midpoint_depths(2, 8, 0.0, 1.0)
        samples = routed_from_arrays(torch.rand(2, 8, 3, generator=torch.Generator().manual_seed(0)), torch.zeros(2, 8))
        pr = integrate(samples, depths, 1.0)
        assert pr.color.abs().max() == 0.0
        assert pr.alpha.abs().max() == 0.0
        assert (pr.t_end - 1.0).abs().max() == 0.0

    def test_opaque_sample(self):
        depths = torch.tensor([[0.5]])
        c = torch.tensor([[[0.2, 0.6, 0.9]]])
        samples = routed_from_arrays(c, torch.full((1, 1), 1e9))
        pr = integrate(samples, depths, 1.0)
        assert torch.allclose(pr.color[0], c[0, 0], atol=1e-9)
        assert abs(pr.alpha.item() - 1.0) < 1e-9

    def test_two_sample_closed_form(self):
        # sigma_k * delta_k = ln 2 for both samples -> C = 0.5 c1 + 0.25 c2, alpha = 0.75
        depths = torch.tensor([[0.0, 0.5]])
        sigma = torch.full((1, 2), np.log(2.0) / 0.5)
        c = torch.tensor([[[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]]])
        samples = routed_from_arrays(c, sigma)
        pr = integrate(samples, depths, 1.0)
        expected = 0.5 * c[0, 0] + 0.25 * c[0, 1]
        assert torch.allclose(pr.color[0], expected, atol=1e-12)
        assert abs(pr.alpha.item() - 0.75) < 1e-12

    def test_matches_continuous_piecewise_integral(self):
        # closed-form oracle on 1- and 2-segment media, boundaries on bin edges
        n = 4096
        t_n, t_f = 0.0, 1.0
        edges = torch.linspace(t_n, t_f, n + 1, dtype=torch.float64)[:-1]
        depths = edges[None]

        def run(sigma_fn, color_fn):
            sig = sigma_fn(edges)[None]
            col = color_fn(edges)[None, :, None].expand(1, n, 3)
            samples = routed_from_arrays(col.contiguous(), sig)
            return integrate(samples, depths, t_f)

        # one segment: sigma=2.0, c=0.7 over [0.25, 0.75]
        inside = lambda t: ((t >= 0.25) & (t < 0.75)).to(torch.float64)
        pr = run(lambda t: 2.0 * inside(t), lambda t: 0.7 * torch.ones_like(t))
        expected = 0.7 * (1.0 - np.exp(-2.0 * 0.5))
        assert abs(pr.color[0, 0].item() - expected) < 1e-5
        assert abs(pr.t_end.item() - np.exp(-1.0)) < 1e-5

        # two segments: (sigma, c) = (3, 0.9) on [0, 0.5), (1, 0.2) on [0.5, 1)
        def sigma2(t):
            return torch.where(t < 0.5, 3.0, 1.0).to(torch.float64)

        def color2(t):
            return torch.where(t < 0.5, 0.9, 0.2).to(torch.float64)

        pr = run(sigma2, color2)
        a1 = 1.0 - np.exp(-3.0 * 0.5)
        t1 = np.exp(-3.0 * 0.5)
        a2 = 1.0 - np.exp(-1.0 * 0.5)
        expected = 0.9 * a1 + 0.2 * t1 * a2
        assert abs(pr.color[0, 0].item() - expected) < 1e-5
        assert abs(pr.t_end.item() - t1 * np.exp(-0.5)) < 1e-5

    def test_conservation(self):
        rng = np.random.default_rng(5)
        n_rays, n_samples = 1000, 64
        depths, _ = torch.sort(torch.as_tensor(rng.uniform(0, 1, size=(n_rays, n_samples))), dim=-1)
        sigma = torch.as_tensor(rng.uniform(0, 30, size=(n_rays, n_samples)))
        color = torch.as_tensor(rng.uniform(size=(n_rays, n_samples, 3)))
        samples = routed_from_arrays(color, sigma)
        pr = integrate(samples, depths, 1.1)
        delta = torch.cat([depths[:, 1:] - depths[:, :-1], 1.1 - depths[:, -1:]], dim=-1)
        alpha = 1.0 - torch.exp(-sigma * delta)
        trans = torch.cumprod(1.0 - alpha, -1)
        t_prev = torch.cat([torch.ones(n_rays, 1, dtype=torch.float64), trans[:, :-1]], dim=-1)
        weight_sum = (t_prev * alpha).sum(-1)
        assert ((weight_sum + pr.t_end) - 1.0).abs().max() < 1e-6

    def test_constant_logits_scale_with_alpha(self):
        rng = np.random.default_rng(6)
        depths, _ = torch.sort(torch.as_tensor(rng.uniform(0, 1, size=(8, 32))), dim=-1)
        sigma = torch.as_tensor(rng.uniform(0, 5, size=(8, 32)))
        s0 = torch.as_tensor(rng.normal(size=5))
        seg = s0.expand(8, 32, 5)
        samples = routed_from_arrays(torch.zeros(8, 32, 3), sigma, seg=seg.contiguous())
        pr = integrate(samples, depths, 1.0)
        assert torch.allclose(pr.seg_logits, pr.alpha[:, None] * s0[None], atol=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        depths, _ = torch.sort(torch.as_tensor(rng.uniform(0, 1, size=(1, 16))), dim=-1)
        sigma = torch.as_tensor(rng.uniform(0.1, 5, size=(1, 16))).requires_grad_(True)
        color = torch.as_tensor(rng.uniform(size=(1, 16, 3))).requires_grad_(True)

        def scalar(sig, col):
            samples = routed_from_arrays(col, sig)
            pr = integrate(samples, depths, 1.0)
            return pr.color.sum()

        out = scalar(sigma, color)
        g_sigma, g_color = torch.autograd.grad(out, [sigma, color])
        h = 1e-5
        for k in range(16):
            sp = sigma.detach().clone(); sp[0, k] += h
            sm = sigma.detach().clone(); sm[0, k] -= h
            fd = (scalar(sp, color.detach()) - scalar(sm, color.detach())).item() / (2 * h)
            denom = max(abs(fd), abs(g_sigma[0, k].item()), 1e-6)
            assert abs(fd - g_sigma[0, k].item()) / denom < 1e-4
        for k in range(6):
            i, j = rng.integers(0, 16), rng.integers(0, 3)
            cp = color.detach().clone(); cp[0, i, j] += h
            cm = color.detach().clone(); cm[0, i, j] -= h
            fd = (scalar(sigma.detach(), cp) - scalar(sigma.detach(), cm)).item() / (2 * h)
            denom = max(abs(fd), abs(g_color[0, i, j].item()), 1e-6)
            assert abs(fd - g_color[0, i, j].item()) / denom < 1e-4

    def test_non_monotone_depths_rejected(self):
        depths = torch.tensor([[0.5, 0.4]])
        samples = routed_from_arrays(torch.zeros(1, 2, 3), torch.zeros(1, 2))
        with pytest.raises(ValueError):
            integrate(samples, depths, 1.0)


class TestHandBackground:
    def make_render(self, has_hands, t_end=0.4, body=(0.5, 0.5, 0.5), body_t_end=0.0):
        return PixelRender(
            color=torch.tensor([[0.2, 0.1, 0.0]]),
            seg_logits=torch.zeros(1, 5),
            alpha=torch.tensor([1.0 - t_end]),
            t_end=torch.tensor([t_end]),
            body_color=torch.tensor([list(body)]),
            body_t_end=torch.tensor([body_t_end]),
            has_hands=torch.tensor([has_hands]),
        )

    def test_disabled_rule_keeps_plain_color(self):
        pr = self.make_render(True, t_end=0.4)
        out = composite_hand_background(pr, (0, 0, 0), hand_background=False)
        assert torch.allclose(out[0], pr.color[0], atol=1e-12)

    def test_opaque_foreground_has_no_background_term(self):
        pr = self.make_render(True, t_end=0.0)
        out = composite_hand_background(pr, (0, 0, 0))
        assert torch.allclose(out[0], pr.color[0], atol=1e-12)

    def test_transparent_hand_passes_body_through(self):
        pr = self.make_render(True, t_end=1.0, body=(0.3, 0.6, 0.9))
        pr.color = torch.zeros(1, 3)
        out = composite_hand_background(pr, (0, 0, 0))
        assert torch.allclose(out[0], torch.tensor([0.3, 0.6, 0.9]), atol=1e-12)

    def test_non_hand_ray_composites_global_background(self):
        pr = self.make_render(False, t_end=0.5)
        out = composite_hand_background(pr, (1.0, 1.0, 1.0))
        assert torch.allclose(out[0], pr.color[0] + 0.5, atol=1e-12)


class TestPatches:
    def test_patch_pixel_count(self):
        corners = sample_patches(make_label_map(), 6, 32, torch.Generator().manual_seed(0))
        assert corners.shape == (6, 2)
        px = patch_pixels(corners[0], 32)
        assert px.shape == (1024, 2)

    def test_patches_inside_image(self):
        mask = make_label_map()
        for seed in range(5):
            corners = sample_patches(mask, 6, 32, torch.Generator().manual_seed(seed))
            assert corners.min() >= 0
            assert (corners[:, 0] + 32 <= mask.shape[1]).all()
            assert (corners[:, 1] + 32 <= mask.shape[0]).all()

    def test_half_intersect_bbox(self):
        mask = make_label_map()
        x0, y0, x1, y1 = subject_bbox(mask)
        corners = sample_patches(mask, 6, 16, torch.Generator().manual_seed(2))
        hits = 0
        for cx, cy in corners:
            if cx <= x1 and cx + 16 > x0 and cy <= y1 and cy + 16 > y0:
                hits += 1
        assert hits >= 3

    def test_seeded_determinism(self):
        mask = make_label_map()
        a = sample_patches(mask, 4, 8, torch.Generator().manual_seed(9))
        b = sample_patches(mask, 4, 8, torch.Generator().manual_seed(9))
        assert np.array_equal(a, b)

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError):
            sample_patches(np.zeros((16, 16), dtype=np.uint8), 1, 32, torch.Generator().manual_seed(0))


class TestRayBounds:
    def test_bounds_bracket_subject(self):
        cam = simple_camera()
        pts = np.array([[0.0, 0.0, 3.0], [0.2, 0.1, 4.0]])
        t_n, t_f = ray_bounds_from_points(cam, pts, dilate=0.2)
        assert t_n < 3.0 and t_f > 4.0
        assert t_n == pytest.approx(3.0 * 0.8)
