"""Ray generation, pixel/point sampling, and differentiable volume integration.

The integrator accumulates color and segmentation logits along rays
(alpha compositing of alpha_k = 1 - exp(-sigma_k * delta_k)), keeps a parallel
body-only accumulation in the same pass, and applies the hand-background rule:
rays that contain hand-routed samples composite the body-only pixel color as an
opaque terminal sample behind the residual transmittance.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import parts
from .config import SamplerConfig
from .fields import RoutedSamples

logger = logging.getLogger(__name__)


@dataclass
class Camera:
    intrinsics: np.ndarray  # [3, 3] upper-triangular, positive focal entries
    extrinsics: np.ndarray  # [4, 4] world-to-camera
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)

    def validate(self) -> None:
        k = self.intrinsics
        if k.shape != (3, 3) or self.extrinsics.shape != (4, 4):
            raise ValueError("camera matrices must be 3x3 intrinsics and 4x4 extrinsics")
        if np.abs(k[np.tril_indices(3, -1)]).max() > 1e-9:
            raise ValueError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal entries must be positive")
        rot = self.extrinsics[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise ValueError("extrinsic rotation must be orthonormal")

    @property
    def center(self) -> np.ndarray:
        rot = self.extrinsics[:3, :3]
        t = self.extrinsics[:3, 3]
        return -rot.T @ t

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.extrinsics.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Camera":
        return cls(
            intrinsics=np.array(doc["intrinsics"]),
            extrinsics=np.array(doc["extrinsics"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
        )


@dataclass
class RayBatch:
    origins: torch.Tensor  # [n, 3]
    dirs: torch.Tensor  # [n, 3] unit norm
    t_near: float
    t_far: float
    pixels: torch.Tensor  # [n, 2] (col, row)
    gt_color: torch.Tensor = None  # [n, 3]
    gt_label: torch.Tensor = None  # [n]


def generate_rays(camera: Camera, pixels, t_near: float = 0.0, t_far: float = 1.0, dtype=torch.float64) -> RayBatch:
    """Rays through pixel centers. pixels [n, 2] as (col, row)."""
    px = torch.as_tensor(np.asarray(pixels), dtype=torch.long)
    if px.numel() and (
        px.min() < 0 or px[:, 0].max() >= camera.width or px[:, 1].max() >= camera.height
    ):
        raise ValueError("pixel outside image bounds")
    k_inv = torch.as_tensor(np.linalg.inv(camera.intrinsics), dtype=dtype)
    rot = torch.as_tensor(camera.extrinsics[:3, :3], dtype=dtype)
    center = torch.as_tensor(camera.center, dtype=dtype)
    uv1 = torch.cat([px.to(dtype) + 0.5, torch.ones(px.shape[0], 1, dtype=dtype)], dim=-1)
    dirs_cam = uv1 @ k_inv.T
    dirs_world = dirs_cam @ rot  # == (rot^T @ d) per ray
    dirs_world = dirs_world / dirs_world.norm(dim=-1, keepdim=True)
    origins = center[None].expand_as(dirs_world).contiguous()
    return RayBatch(origins=origins, dirs=dirs_world, t_near=t_near, t_far=t_far, pixels=px)


def ray_bounds_from_points(camera: Camera, points, dilate: float = 0.2) -> tuple:
    """Per-frame scalar near/far from the posed joints, dilated by `dilate`."""
    pts = np.asarray(points, dtype=np.float64)
    dists = np.linalg.norm(pts - camera.center[None], axis=-1)
    t_near = max(1e-3, float(dists.min()) * (1.0 - dilate))
    t_far = float(dists.max()) * (1.0 + dilate)
    return t_near, t_far


def stratified_depths(n_rays: int, n_samples: int, t_near: float, t_far: float, generator=None, dtype=torch.float64):
    """One uniform draw per equal bin of [t_near, t_far); strictly increasing per ray."""
    if not t_near < t_far:
        raise ValueError("t_near must be < t_far")
    edges = torch.linspace(t_near, t_far, n_samples + 1, dtype=dtype)
    lo = edges[:-1]
    width = (t_far - t_near) / n_samples
    u = torch.rand(n_rays, n_samples, generator=generator, dtype=dtype)
    return lo[None] + u * width


def midpoint_depths(n_rays: int, n_samples: int, t_near: float, t_far: float, dtype=torch.float64):
    """Deterministic bin midpoints, used at inference."""
    if not t_near < t_far:
        raise ValueError("t_near must be < t_far")
    edges = torch.linspace(t_near, t_far, n_samples + 1, dtype=dtype)
    mids = (edges[:-1] + edges[1:]) / 2.0
    return mids[None].expand(n_rays, n_samples).contiguous()


def subject_bbox(mask: np.ndarray, margin: int = 2) -> tuple:
    """(col0, row0, col1, row1) inclusive bounds of the non-background labels."""
    rows, cols = np.nonzero(mask > 0)
    if len(rows) == 0:
        return 0, 0, mask.shape[1] - 1, mask.shape[0] - 1
    h, w = mask.shape
    return (
        max(int(cols.min()) - margin, 0),
        max(int(rows.min()) - margin, 0),
        min(int(cols.max()) + margin, w - 1),
        min(int(rows.max()) + margin, h - 1),
    )


def select_pixels(
    mask: np.ndarray,
    schedule: SamplerConfig,
    iteration: int,
    count: int,
    generator: torch.Generator,
    arm_class: bool = True,
) -> np.ndarray:
    """Part-prioritized pixel multiset [count, 2] as (col, row).

    round(bbox_fraction * count) pixels come from inside the subject bbox,
    split into the phase-table hand/arm quotas plus a remainder drawn from the
    bbox excluding hand/arm labels (so the quota percentages are exact); the
    rest of the batch is uniform over the image. An empty quota class folds
    into the remainder pool.
    """
    h, w = mask.shape
    hand_pct, arm_pct = schedule.phase_at(iteration)
    if not arm_class:
        arm_pct = 0
    n_in = int(round(schedule.bbox_fraction * count))
    n_out = count - n_in
    n_hand = int(round(hand_pct / 100.0 * n_in))
    n_arm = int(round(arm_pct / 100.0 * n_in))

    x0, y0, x1, y1 = subject_bbox(mask)
    box = mask[y0 : y1 + 1, x0 : x1 + 1]
    bw = box.shape[1]
    labels = box.reshape(-1)
    in_cols = np.arange(labels.size) % bw
    in_rows = np.arange(labels.size) // bw
    hand_idx = np.flatnonzero(labels == parts.HANDS)
    arm_idx = np.flatnonzero(labels == parts.ARMS)
    rest_idx = np.flatnonzero((labels != parts.HANDS) & (labels != parts.ARMS))
    if len(rest_idx) == 0:
        rest_idx = np.arange(len(labels))

    if len(hand_idx) == 0 and n_hand:
        logger.info("no hand-labeled pixels; folding hand quota into the uniform pool")
        n_hand = 0
    if len(arm_idx) == 0 and n_arm:
        logger.info("no arm-labeled pixels; folding arm quota into the uniform pool")
        n_arm = 0
    n_rest = n_in - n_hand - n_arm

    def draw(pool: np.ndarray, n: int) -> np.ndarray:
        if n == 0:
            return np.empty(0, dtype=np.int64)
        sel = torch.randint(0, len(pool), (n,), generator=generator).numpy()
        return pool[sel]

    chosen = np.concatenate([draw(hand_idx, n_hand), draw(arm_idx, n_arm), draw(rest_idx, n_rest)])
    in_pixels = np.stack([in_cols[chosen] + x0, in_rows[chosen] + y0], axis=-1)

    out_sel = torch.randint(0, h * w, (n_out,), generator=generator).numpy()
    out_pixels = np.stack([out_sel % w, out_sel // w], axis=-1)
    return np.concatenate([in_pixels, out_pixels], axis=0)


def sample_patches(
    mask: np.ndarray, count: int, size: int, generator: torch.Generator
) -> np.ndarray:
    """Top-left corners [count, 2] (col, row) of size x size patches inside the
    image; at least half of them intersect the subject bbox."""
    h, w = mask.shape
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} smaller than patch size {size}")
    x0, y0, x1, y1 = subject_bbox(mask)
    corners = []
    for i in range(count):
        if i < (count + 1) // 2:
            # constrain the corner so the patch overlaps the subject bbox
            cx_lo = max(0, x0 - size + 1)
            cx_hi = min(w - size, x1)
            cy_lo = max(0, y0 - size + 1)
            cy_hi = min(h - size, y1)
        else:
            cx_lo, cx_hi, cy_lo, cy_hi = 0, w - size, 0, h - size
        cx = int(torch.randint(cx_lo, cx_hi + 1, (1,), generator=generator))
        cy = int(torch.randint(cy_lo, cy_hi + 1, (1,), generator=generator))
        corners.append((cx, cy))
    return np.asarray(corners, dtype=np.int64)


def patch_pixels(corner, size: int) -> np.ndarray:
    """All pixels of one patch, row-major [size*size, 2] (col, row)."""
    cx, cy = int(corner[0]), int(corner[1])
    cols, rows = np.meshgrid(np.arange(cx, cx + size), np.arange(cy, cy + size), indexing="xy")
    return np.stack([cols.reshape(-1), rows.reshape(-1)], axis=-1)


@dataclass
class PixelRender:
    color: torch.Tensor  # [n, 3] accumulated, before background compositing
    seg_logits: torch.Tensor  # [n, 5]
    alpha: torch.Tensor  # [n] = 1 - residual transmittance
    t_end: torch.Tensor  # [n] residual transmittance of the routed chain
    body_color: torch.Tensor  # [n, 3] body-only accumulation
    body_t_end: torch.Tensor  # [n]
    has_hands: torch.Tensor  # [n] bool, ray contains hand-routed samples


def _accumulate(sigma: torch.Tensor, delta: torch.Tensor):
    alpha = 1.0 - torch.exp(-sigma * delta)
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    t_prev = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    weights = t_prev * alpha  # [n, s]
    return weights, trans[..., -1]


def integrate(samples: RoutedSamples, depths: torch.Tensor, t_far: float, zero_body_on_hand_rays: bool = False) -> PixelRender:
    """Quadrature over [n_rays, n_samples] fields.

    delta_k = depth spacing (the last sample owns the stretch to t_far);
    alpha_k = 1 - exp(-sigma_k delta_k); weights T_k alpha_k accumulate color
    and segmentation logits. The unrouted body outputs integrate in the same
    pass for the hand-background rule.
    """
    n_rays, n_samples = depths.shape
    diffs = depths[:, 1:] - depths[:, :-1]
    if (diffs <= 0).any():
        raise ValueError("depths must be strictly increasing along each ray")
    last = (t_far - depths[:, -1:]).clamp_min(0.0)
    delta = torch.cat([diffs, last], dim=-1)

    def view(t, ch=None):
        return t.reshape(n_rays, n_samples, ch) if ch else t.reshape(n_rays, n_samples)

    sigma = view(samples.sigma)
    color = view(samples.color, 3)
    seg = view(samples.seg_logits, parts.NUM_CLASSES)
    route = view(samples.route)
    has_hands = (route == parts.HANDS).any(dim=-1)

    if zero_body_on_hand_rays:
        suppress = has_hands[:, None] & (route != parts.HANDS)
        sigma = torch.where(suppress, torch.zeros_like(sigma), sigma)

    weights, t_end = _accumulate(sigma, delta)
    out_color = (weights[..., None] * color).sum(dim=1)
    out_seg = (weights[..., None] * seg).sum(dim=1)

    body_sigma = view(samples.body_sigma)
    body_color = view(samples.body_color, 3)
    body_weights, body_t_end = _accumulate(body_sigma, delta)
    out_body = (body_weights[..., None] * body_color).sum(dim=1)

    return PixelRender(
        color=out_color,
        seg_logits=out_seg,
        alpha=1.0 - t_end,
        t_end=t_end,
        body_color=out_body,
        body_t_end=body_t_end,
        has_hands=has_hands,
    )


def composite_hand_background(
    pr: PixelRender, background, hand_background: bool = True
) -> torch.Tensor:
    """Final pixel colors.

    Hand-containing rays place the body-only pixel color (itself composited
    over the dataset background) behind the residual transmittance — an opaque
    terminal sample. Other rays composite directly over the background. With
    the rule disabled every ray takes the plain background path.
    """
    bg = torch.as_tensor(np.asarray(background), dtype=pr.color.dtype)
    body_pixel = pr.body_color + pr.body_t_end[:, None] * bg[None]
    plain = pr.color + pr.t_end[:, None] * bg[None]
    if not hand_background:
        return plain
    with_hands = pr.color + pr.t_end[:, None] * body_pixel
    return torch.where(pr.has_hands[:, None], with_hands, plain)


def render_rays(
    model,
    code: torch.Tensor,
    cond,
    batch: RayBatch,
    n_samples: int,
    iteration: int = 0,
    window_alpha: float = None,
    background=(0.0, 0.0, 0.0),
    stratified_generator: torch.Generator = None,
    ablation=None,
    forced_labels: torch.Tensor = None,
) -> tuple:
    """Shade one ray batch end to end -> (final colors [n, 3], PixelRender)."""
    n = batch.origins.shape[0]
    if stratified_generator is not None:
        depths = stratified_depths(n, n_samples, batch.t_near, batch.t_far, generator=stratified_generator, dtype=batch.origins.dtype)
    else:
        depths = midpoint_depths(n, n_samples, batch.t_near, batch.t_far, dtype=batch.origins.dtype)
    points = batch.origins[:, None, :] + batch.dirs[:, None, :] * depths[..., None]
    flat_forced = None
    if forced_labels is not None:
        flat_forced = forced_labels[:, None].expand(n, n_samples).reshape(-1)
    samples = model.shade_points(
        points.reshape(-1, 3),
        cond,
        code,
        iteration=iteration,
        window_alpha=window_alpha,
        forced_labels=flat_forced,
    )
    zero_body = bool(ablation.zero_body_on_hand_rays) if ablation is not None else False
    hand_bg = bool(ablation.hand_background) if ablation is not None else True
    pr = integrate(samples, depths, batch.t_far, zero_body_on_hand_rays=zero_body)
    final = composite_hand_background(pr, background, hand_background=hand_bg)
    return final, pr


def render_frame(
    model,
    code: torch.Tensor,
    cond,
    camera: Camera,
    n_samples: int,
    iteration: int = 0,
    window_alpha: float = None,
    background=(0.0, 0.0, 0.0),
    ablation=None,
    chunk: int = 4096,
    dtype=torch.float32,
) -> dict:
    """Full-frame deterministic render -> {'rgb', 'alpha', 'seg'} numpy arrays.

    Uses bin midpoints (no jitter) so repeated renders are bit-identical.
    """
    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    pixels = np.stack([cols.reshape(-1), rows.reshape(-1)], axis=-1)
    t_near, t_far = ray_bounds_from_points(camera, cond.posed_joints.detach().cpu().numpy())
    rgb = np.zeros((h * w, 3), dtype=np.float32)
    alpha = np.zeros(h * w, dtype=np.float32)
    seg = np.zeros((h * w, parts.NUM_CLASSES), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(pixels), chunk):
            chunk_px = pixels[start : start + chunk]
            batch = generate_rays(camera, chunk_px, t_near, t_far, dtype=dtype)
            final, pr = render_rays(
                model,
                code,
                cond,
                batch,
                n_samples,
                iteration=iteration,
                window_alpha=window_alpha,
                background=background,
                ablation=ablation,
            )
            rgb[start : start + chunk] = final.clamp(0, 1).cpu().numpy()
            alpha[start : start + chunk] = pr.alpha.cpu().numpy()
            seg[start : start + chunk] = pr.seg_logits.cpu().numpy()
    labels = seg.argmax(axis=-1).astype(np.uint8)
    # rays that hit nothing have zero logits everywhere: call them background
    labels[alpha < 1e-4] = parts.BACKGROUND
    return {
        "rgb": rgb.reshape(h, w, 3),
        "alpha": alpha.reshape(h, w),
        "seg": labels.reshape(h, w),
    }
