"""The routed radiance sub-fields.

A body field predicts color, density and 5-class segmentation logits in
canonical space; per-point routing by the predicted class sends head points to
the expression-conditioned face field and hand points through the hand offset
into the hand field. Color replaces, density replaces; segmentation logits only
ever come from the body field.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import parts
from .conditioning import FrameConditioning, Skeleton
from .config import AblationFlags, NetworkConfig
from .deform import BlendWeightVolume, CanonicalPoint, Deformer, OffsetField, init_linear
from .encoding import PositionalEncoding, hann_window_weights  # noqa: F401  (re-export)


class FieldMLP(nn.Module):
    """Coordinate network: encoded point + condition -> (color, raw density[, seg logits]).

    ReLU trunk with the encoded input re-injected at `skip_at`; sigmoid color
    head, softplus density head, raw segmentation logits.
    """

    def __init__(
        self,
        cond_dim: int,
        depth: int = 8,
        width: int = 256,
        skip_at: int = 4,
        num_bands: int = 10,
        seg_classes: int = 0,
        generator: torch.Generator = None,
    ):
        super().__init__()
        self.encoding = PositionalEncoding(num_bands=num_bands)
        self.skip_at = skip_at
        in_dim = self.encoding.dim + cond_dim
        self.trunk = nn.ModuleList()
        for i in range(depth):
            a = in_dim if i == 0 else width
            if i == skip_at and 0 < skip_at < depth:
                a = width + in_dim
            self.trunk.append(nn.Linear(a, width))
        self.color_head = nn.Linear(width, 3)
        self.density_head = nn.Linear(width, 1)
        self.seg_head = nn.Linear(width, seg_classes) if seg_classes else None
        gen = generator or torch.Generator().manual_seed(0)
        for layer in self.trunk:
            init_linear(layer, gen)
        for head in (self.color_head, self.density_head, self.seg_head):
            if head is not None:
                init_linear(head, gen)

    def forward(self, x: torch.Tensor, cond: torch.Tensor):
        inp = torch.cat([self.encoding(x), cond], dim=-1)
        h = inp
        for i, layer in enumerate(self.trunk):
            if i == self.skip_at and 0 < self.skip_at < len(self.trunk):
                h = torch.cat([h, inp], dim=-1)
            h = torch.relu(layer(h))
        color = torch.sigmoid(self.color_head(h))
        sigma = F.softplus(self.density_head(h)).squeeze(-1)
        seg = self.seg_head(h) if self.seg_head is not None else None
        return color, sigma, seg


@dataclass
class RoutedSamples:
    """Per-point field outputs plus routing provenance (class label that routed it)."""

    color: torch.Tensor  # [n, 3]
    sigma: torch.Tensor  # [n]
    seg_logits: torch.Tensor  # [n, 5], always from the body field
    route: torch.Tensor  # [n] long, class ids from `parts`
    body_color: torch.Tensor  # [n, 3] unrouted body output (hand-background rule)
    body_sigma: torch.Tensor  # [n]
    canonical: torch.Tensor  # [n, 3]
    fg: torch.Tensor  # [n]

    @property
    def has_hands(self) -> bool:
        return bool((self.route == parts.HANDS).any())


def _expand_cond(vec: torch.Tensor, n: int) -> torch.Tensor:
    return vec[None].expand(n, -1) if vec.dim() == 1 else vec


class UnifiedField(nn.Module):
    """Deformation + the three sub-fields behind a single point-shading entry."""

    def __init__(
        self,
        skeleton: Skeleton,
        network: NetworkConfig = None,
        ablation: AblationFlags = None,
        seed: int = 0,
    ):
        super().__init__()
        net = network or NetworkConfig()
        self.ablation = ablation or AblationFlags()
        self.skeleton = skeleton
        self.code_dim = net.code_dim

        def gen(tag):
            from .utils import make_generator

            return make_generator(seed, "init", tag)

        volume = BlendWeightVolume.for_skeleton(
            skeleton,
            resolution=net.weight_grid,
            bg_bias=net.weight_bg_bias,
            bump_amplitude=net.weight_bump_amplitude,
        )
        nonrigid = OffsetField(
            cond_dim=skeleton.num_joints * 3,
            num_bands=net.deform_bands,
            depth=net.offset_depth,
            width=net.offset_width,
            max_offset=net.max_offset,
            generator=gen("nonrigid"),
        )
        self.deformer = Deformer(volume, nonrigid)
        hand_cond = 45 if self.ablation.separate_hands else 90
        self.hand_offset = OffsetField(
            cond_dim=hand_cond,
            num_bands=net.deform_bands,
            depth=net.offset_depth,
            width=net.offset_width,
            max_offset=net.max_offset,
            generator=gen("hand-offset"),
        )
        expr_dim = 13 if self.ablation.jaw_conditioning else 10
        self.f_body = FieldMLP(
            cond_dim=net.code_dim,
            depth=net.field_depth,
            width=net.field_width,
            skip_at=net.field_skip,
            num_bands=net.point_bands,
            seg_classes=parts.NUM_CLASSES,
            generator=gen("body"),
        )
        self.f_face = FieldMLP(
            cond_dim=expr_dim + net.code_dim,
            depth=net.field_depth,
            width=net.field_width,
            skip_at=net.field_skip,
            num_bands=net.point_bands,
            generator=gen("face"),
        )
        self.f_hands = FieldMLP(
            cond_dim=net.code_dim,
            depth=net.field_depth,
            width=net.field_width,
            skip_at=net.field_skip,
            num_bands=net.point_bands,
            generator=gen("hands"),
        )

    # --- individual sub-fields -------------------------------------------------

    def body_field(self, point: CanonicalPoint, code: torch.Tensor):
        """(color, fg-damped density, seg logits) of the body field."""
        cond = _expand_cond(code.to(point.x.dtype), point.x.shape[0])
        color, sigma, seg = self.f_body(point.x, cond)
        return color, sigma * point.fg, seg

    def face_field(self, point: CanonicalPoint, expression: torch.Tensor, code: torch.Tensor):
        e = expression[:10] if not self.ablation.jaw_conditioning else expression
        n = point.x.shape[0]
        cond = torch.cat([_expand_cond(e.to(point.x.dtype), n), _expand_cond(code.to(point.x.dtype), n)], dim=-1)
        color, sigma, _ = self.f_face(point.x, cond)
        return color, sigma * point.fg

    def hand_field(self, x_deformed: torch.Tensor, fg: torch.Tensor, code: torch.Tensor):
        cond = _expand_cond(code.to(x_deformed.dtype), x_deformed.shape[0])
        color, sigma, _ = self.f_hands(x_deformed, cond)
        return color, sigma * fg

    def hand_offset_for(self, x_c: torch.Tensor, hand_pose: torch.Tensor, alpha: float = None) -> torch.Tensor:
        """Hand deformation offset; zero when the ablation flag disables it.

        With separate_hands, each point is conditioned on the 45-d half of the
        pose belonging to its side of the canonical body (left = +x).
        """
        if not self.ablation.hand_deformation:
            return torch.zeros_like(x_c)
        if self.ablation.separate_hands:
            left = hand_pose[:45].to(x_c.dtype)
            right = hand_pose[45:].to(x_c.dtype)
            side = (x_c[:, 0] >= 0).to(x_c.dtype)[:, None]
            cond = side * left[None] + (1.0 - side) * right[None]
            return self.hand_offset(x_c, cond, alpha=alpha)
        return self.hand_offset(x_c, hand_pose.to(x_c.dtype), alpha=alpha)

    # --- routing ---------------------------------------------------------------

    def shade_points(
        self,
        x: torch.Tensor,
        cond: FrameConditioning,
        code: torch.Tensor,
        iteration: int = 0,
        window_alpha: float = None,
        forced_labels: torch.Tensor = None,
    ) -> RoutedSamples:
        """Map points to canonical space, evaluate the body field, then route:
        head -> face field replaces color/density; hands -> hand offset + hand
        field; everything else keeps the body output."""
        point = self.deformer.to_canonical(
            x, cond.body_pose, cond.pose_flat.to(x.dtype), iteration=iteration, alpha=window_alpha
        )
        body_color, body_sigma, seg = self.body_field(point, code)

        route = forced_labels if forced_labels is not None else seg.argmax(dim=-1)
        color = body_color
        sigma = body_sigma

        head_mask = route == parts.HEAD
        if head_mask.any():
            sub = CanonicalPoint(x=point.x[head_mask], fg=point.fg[head_mask])
            face_color, face_sigma = self.face_field(sub, cond.expression, code)
            color = color.clone()
            sigma = sigma.clone()
            color[head_mask] = face_color
            sigma[head_mask] = face_sigma

        hand_mask = route == parts.HANDS
        if hand_mask.any():
            x_h = point.x[hand_mask]
            x_h = x_h + self.hand_offset_for(x_h, cond.hand_pose, alpha=window_alpha)
            hand_color, hand_sigma = self.hand_field(x_h, point.fg[hand_mask], code)
            color = color.clone()
            sigma = sigma.clone()
            color[hand_mask] = hand_color
            sigma[hand_mask] = hand_sigma

        return RoutedSamples(
            color=color,
            sigma=sigma,
            seg_logits=seg,
            route=route,
            body_color=body_color,
            body_sigma=body_sigma,
            canonical=point.x,
            fg=point.fg,
        )
