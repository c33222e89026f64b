#!/usr/bin/env python3
"""Differentiable Gaussian-splat rasterizer for SoftSplat Sim

Brute-force per-pixel compositing in torch: every visible splat is evaluated against
every pixel inside its 3-sigma bounding box, front to back. Desk image sizes keep the
(splats x pixels) tensors small enough for CPU training.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from config import RenderConfig
from core.errors import ValidationError
from core.types import CameraModel, SplatSetState

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class RenderOutput:
    """Rendered image planes: ``rgb`` (H, W, 3), ``alpha`` (H, W), ``depth`` (H, W)."""

    rgb: torch.Tensor
    alpha: torch.Tensor
    depth: torch.Tensor

    def numpy(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.rgb.detach().cpu().numpy(), self.alpha.detach().cpu().numpy(),
                self.depth.detach().cpu().numpy())


def _camera_tensors(camera: CameraModel, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    """World-to-camera rotation and translation."""
    R_wc = torch.as_tensor(camera.rotation, dtype=dtype)
    c = torch.as_tensor(camera.center, dtype=dtype)
    W = R_wc.T
    return W, -W @ c


def project_splats(camera: CameraModel, positions: torch.Tensor, covariances: torch.Tensor,
                   near: float = 1e-3, dilation: float = 0.3
                   ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pinhole projection of splat means and first-order projection of covariances.

    Returns ``(mean2d (N, 2), cov2d (N, 2, 2), depth (N,), visible (N,) bool)``.
    Splats at or behind the near plane are flagged invisible; their entries are
    computed with a clamped depth and must be ignored by callers.
    """
    W, t = _camera_tensors(camera, positions.dtype)
    cam = positions @ W.T + t
    depth = cam[:, 2]
    visible = depth > near
    z = torch.where(visible, depth, torch.full_like(depth, near))
    x, y = cam[:, 0], cam[:, 1]
    fx, fy = camera.fx, camera.fy
    mean2d = torch.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], dim=1)

    zeros = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([fx / z, zeros, -fx * x / z ** 2], dim=1),
        torch.stack([zeros, fy / z, -fy * y / z ** 2], dim=1),
    ], dim=1)
    M = J @ W
    cov2d = M @ covariances @ M.transpose(1, 2)
    cov2d = 0.5 * (cov2d + cov2d.transpose(1, 2))
    cov2d = cov2d + dilation * torch.eye(2, dtype=positions.dtype)
    return mean2d, cov2d, depth, visible


def project_splat(camera: CameraModel, x: torch.Tensor, cov: torch.Tensor,
                  near: float = 1e-3, dilation: float = 0.3) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Single-splat projection; raises ValidationError when the splat is behind the near plane."""
    mean2d, cov2d, depth, visible = project_splats(camera, x.reshape(1, 3), cov.reshape(1, 3, 3), near, dilation)
    if not bool(visible[0]):
        raise ValidationError(f"splat at camera depth {float(depth[0]):.4f} is behind the near plane")
    return mean2d[0], cov2d[0], depth[0]


@lru_cache(maxsize=8)
def _pixel_grid(height: int, width: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(height, dtype=torch.float64),
                            torch.arange(width, dtype=torch.float64), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)


def rasterize(camera: CameraModel, positions: torch.Tensor, covariances: torch.Tensor,
              colors: torch.Tensor, opacities: torch.Tensor,
              cfg: Optional[RenderConfig] = None) -> RenderOutput:
    """Front-to-back alpha compositing of projected splats.

    Pixel (row i, column j) is sampled at image coordinates (j, i). Depth is the
    alpha-weighted expected camera depth where accumulated alpha >= 0.5, else 0.
    """
    cfg = cfg or RenderConfig()
    dtype = positions.dtype
    H, W = camera.height, camera.width

    mean2d, cov2d, depth, visible = project_splats(camera, positions, covariances, cfg.near, cfg.dilation)
    keep = visible & (opacities > 0)
    if int(visible.logical_not().sum()) > 0:
        logger.debug(f"camera {camera.name}: {int(visible.logical_not().sum())} splats behind the near plane")
    idx = torch.nonzero(keep).reshape(-1)
    if idx.numel() == 0:
        zeros = torch.zeros(H, W, dtype=dtype)
        return RenderOutput(torch.zeros(H, W, 3, dtype=dtype), zeros, zeros.clone())

    order = torch.sort(depth.detach()[idx], stable=True).indices
    idx = idx[order]
    mean2d, cov2d, depth = mean2d[idx], cov2d[idx], depth[idx]
    col, opa = colors[idx], opacities[idx]

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    inv_a, inv_b, inv_c = c / det, -b / det, a / det

    pix = _pixel_grid(H, W).to(dtype)
    dx = pix[None, :, 0] - mean2d[:, 0:1]
    dy = pix[None, :, 1] - mean2d[:, 1:2]
    power = -0.5 * (inv_a[:, None] * dx * dx + 2.0 * inv_b[:, None] * dx * dy + inv_c[:, None] * dy * dy)
    extent_x = cfg.sigma_extent * torch.sqrt(a).detach()
    extent_y = cfg.sigma_extent * torch.sqrt(c).detach()
    in_box = (dx.detach().abs() <= extent_x[:, None]) & (dy.detach().abs() <= extent_y[:, None])

    alpha = torch.clamp(opa[:, None] * torch.exp(power), 0.0, cfg.alpha_max)
    alpha = torch.where(in_box, alpha, torch.zeros_like(alpha))

    trans = torch.cumprod(1.0 - alpha, dim=0)
    trans = torch.cat([torch.ones_like(trans[:1]), trans[:-1]], dim=0)
    weights = alpha * trans

    rgb = weights.T @ col
    acc = weights.sum(dim=0)
    depth_sum = weights.T @ depth
    solid = acc >= 0.5
    expected = torch.where(solid, depth_sum / torch.where(solid, acc, torch.ones_like(acc)), torch.zeros_like(acc))
    return RenderOutput(rgb.reshape(H, W, 3), acc.reshape(H, W), expected.reshape(H, W))


def render_state(camera: CameraModel, state: SplatSetState, cfg: Optional[RenderConfig] = None) -> RenderOutput:
    return rasterize(camera, state.positions, state.covariances, state.colors, state.opacities, cfg)


@lru_cache(maxsize=4)
def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM (H, W) averaged over channels; images are (H, W, C) in [0, 1]."""
    if a.shape != b.shape:
        raise ValidationError(f"SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    channels = a.shape[2]
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA).to(a.dtype)
    window = window.expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()
    pad = SSIM_WINDOW // 2

    def filt(img):
        return F.conv2d(img, window, padding=pad, groups=channels)

    mu_x, mu_y = filt(x), filt(y)
    mu_x_sq, mu_y_sq, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_x_sq = filt(x * x) - mu_x_sq
    sigma_y_sq = filt(y * y) - mu_y_sq
    sigma_xy = filt(x * y) - mu_xy

    C1 = SSIM_K1 ** 2
    C2 = SSIM_K2 ** 2
    num = (2.0 * mu_xy + C1) * (2.0 * sigma_xy + C2)
    den = (mu_x_sq + mu_y_sq + C1) * (sigma_x_sq + sigma_y_sq + C2)
    return (num / den)[0].mean(dim=0)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ssim_map(a, b).mean()


def dssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Structural dissimilarity (1 - SSIM) / 2."""
    return (1.0 - ssim(a, b)) / 2.0


def masked_image_loss(rendered: RenderOutput, target: torch.Tensor, mask: torch.Tensor, lam: float = 0.8) -> torch.Tensor:
    """Blend of area-normalized masked L2 and D-SSIM on mask-zeroed images."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    pred = rendered.rgb
    if pred.shape != target.shape or mask.shape != pred.shape[:2]:
        raise ValidationError(
            f"loss shapes differ: render {tuple(pred.shape)}, target {tuple(target.shape)}, mask {tuple(mask.shape)}")
    m = mask.to(pred.dtype)[..., None]
    area = torch.clamp(m.sum(), min=1.0)
    l2 = ((m * (pred - target)) ** 2).sum() / area
    return lam * l2 + (1.0 - lam) * dssim(m * pred, m * target)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def dump_render(output: RenderOutput, path: Path) -> None:
    """Write the RGB plane of a render as an 8-bit PNG for inspection."""
    rgb, _, _ = output.numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), cv2.cvtColor(to_uint8(rgb), cv2.COLOR_RGB2BGR))
