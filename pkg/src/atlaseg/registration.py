"""Rigid then affine registration driven by a local normalized cross-correlation
metric over a 3-level multi-resolution pyramid.

The metric is the mean, over the fixed image's foreground, of the NCC
computed inside a cubic window around every voxel (truncated at borders).
Optimization is regular-step gradient ascent on analytically differentiated
local NCC: the parameter step follows the scaled gradient direction and is
halved whenever a trial step fails to improve the metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .transforms import (
    AffineTransform,
    RigidTransform,
    rotation_derivatives,
    rotation_from_euler,
)
from .volume import Volume3D, VolumeError, resample


class RegistrationError(RuntimeError):
    """Optimizer divergence or malformed registration inputs."""


@dataclass(frozen=True)
class RegistrationConfig:
    """Knobs for the two-stage registration.

    ``smoothing_sigmas`` are in voxels of the fixed image (converted to mm
    internally so fixed and moving are smoothed identically).
    """

    metric_window: int = 11
    levels: int = 3
    iterations: tuple[int, ...] = (40, 20, 10)
    smoothing_sigmas: tuple[float, ...] = (2.0, 1.0, 0.0)
    downsample_factors: tuple[int, ...] = (4, 2, 1)
    step_sizes: tuple[float, ...] = (1.0, 0.5, 0.25)
    tolerance: float = 1e-6
    min_step: float = 1e-6

    def __post_init__(self):
        if self.metric_window < 3 or self.metric_window % 2 == 0:
            raise ValueError("metric window must be odd and >= 3")
        for name in ("iterations", "smoothing_sigmas", "downsample_factors", "step_sizes"):
            if len(getattr(self, name)) != self.levels:
                raise ValueError(f"{name} must have one entry per level")
        if any(i <= 0 for i in self.iterations):
            raise ValueError("iterations must be positive")


# ---------------------------------------------------------------------------
# Local NCC metric


def _box_sum(arr: np.ndarray, window: int) -> np.ndarray:
    return ndimage.uniform_filter(arr, size=window, mode="constant", cval=0.0) * float(window**3)


def _window_stats(fixed: np.ndarray, moving: np.ndarray, window: int):
    count = _box_sum(np.ones_like(fixed), window)
    f_mean = _box_sum(fixed, window) / count
    m_mean = _box_sum(moving, window) / count
    cross = _box_sum(fixed * moving, window) - count * f_mean * m_mean
    f_var = _box_sum(fixed * fixed, window) - count * f_mean * f_mean
    m_var = _box_sum(moving * moving, window) - count * m_mean * m_mean
    return count, f_mean, m_mean, cross, f_var, m_var


_VAR_EPS = 1e-10


def local_ncc(fixed: Volume3D, moving: Volume3D, window: int = 11,
              mask: np.ndarray | None = None) -> float:
    """Mean windowed NCC between two volumes on the same grid, in [-1, 1].

    Windows are truncated at the volume border; windows where either input
    has zero variance contribute 0. The mean runs over ``mask`` (default:
    fixed != 0, or everything if the fixed image is identically zero).
    """
    f = np.asarray(fixed.data, dtype=float)
    m = np.asarray(moving.data, dtype=float)
    if f.shape != m.shape:
        raise VolumeError(f"shape mismatch: {f.shape} vs {m.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    if mask is None:
        mask = f != 0
        if not mask.any():
            mask = np.ones_like(f, dtype=bool)
    value, _ = _ncc_value_and_pointwise_grad(f, m, window, mask, need_grad=False)
    return float(value)


def _ncc_value_and_pointwise_grad(f, m, window, mask, need_grad=True):
    """Mean local NCC and (optionally) its gradient w.r.t. the moving values."""
    # Global affine normalization leaves per-window NCC unchanged but makes
    # the zero-variance threshold scale-free.
    f_sel = f[mask]
    f_scale = f_sel.std() or 1.0
    m_scale = m.std() or 1.0
    fn = (f - f_sel.mean()) / f_scale
    mn = (m - m.mean()) / m_scale

    _, f_mean, m_mean, cross, f_var, m_var = _window_stats(fn, mn, window)
    valid = (f_var > _VAR_EPS) & (m_var > _VAR_EPS)
    denom = np.sqrt(np.where(valid, f_var * m_var, 1.0))
    ncc = np.where(valid, cross / denom, 0.0)
    n_mask = int(np.count_nonzero(mask))
    value = float(ncc[mask].sum() / n_mask)
    if not need_grad:
        return value, None

    active = valid & mask
    c1 = np.where(active, 1.0 / denom, 0.0)
    c2 = np.where(active, ncc / np.where(m_var > _VAR_EPS, m_var, 1.0), 0.0)
    grad = (
        fn * _box_sum(c1, window) - _box_sum(c1 * f_mean, window)
        - mn * _box_sum(c2, window) + _box_sum(c2 * m_mean, window)
    )
    # d(mean NCC)/d(raw moving values); undo the global normalization scale
    grad /= n_mask * m_scale
    return value, grad


# ---------------------------------------------------------------------------
# Pyramid machinery


class _Level:
    """Fixed-grid quantities precomputed once per pyramid level."""

    def __init__(self, fixed: Volume3D, moving: Volume3D, factor: int, sigma_vox: float,
                 window: int):
        f_spacing = np.asarray(fixed.spacing)
        sigma_mm = sigma_vox * f_spacing
        f_data = np.asarray(fixed.data, dtype=float)
        m_data = np.asarray(moving.data, dtype=float)
        if sigma_vox > 0:
            f_data = ndimage.gaussian_filter(f_data, sigma=sigma_vox)
            m_sigma_vox = sigma_mm / np.asarray(moving.spacing)
            m_data = ndimage.gaussian_filter(m_data, sigma=m_sigma_vox)
        if factor > 1:
            shape = tuple(max(int(np.ceil(n / factor)), 8) for n in fixed.shape)
            spacing = tuple(s * n / sh for s, n, sh in zip(fixed.spacing, fixed.shape, shape))
            sub = Volume3D(f_data, fixed.spacing, fixed.origin, fixed.direction)
            sub = resample(sub, spacing, shape)
            f_data = np.asarray(sub.data)
            self.spacing = np.asarray(sub.spacing)
            self.origin = np.asarray(sub.origin)
        else:
            self.spacing = f_spacing.astype(float)
            self.origin = np.asarray(fixed.origin, dtype=float)

        self.fixed = f_data
        self.window = window
        self.mask = f_data != 0
        if not self.mask.any():
            self.mask = np.ones_like(f_data, dtype=bool)

        self.moving = m_data
        self.m_origin = np.asarray(moving.origin, dtype=float)
        self.m_spacing = np.asarray(moving.spacing, dtype=float)
        grad = np.gradient(m_data, *self.m_spacing)
        self.m_grad = [g for g in grad]

        idx = np.indices(f_data.shape, dtype=float).reshape(3, -1).T
        self.world = idx * self.spacing + self.origin  # (N, 3) fixed-grid points

    def warp_all(self, mat: np.ndarray, offset: np.ndarray, need_grad: bool):
        """Sample the moving image (and its gradient) at mat @ x + offset."""
        pts = self.world @ mat.T + offset
        m_idx = ((pts - self.m_origin) / self.m_spacing).T
        shape = self.fixed.shape
        warped = ndimage.map_coordinates(self.moving, m_idx, order=1, mode="constant",
                                         cval=0.0).reshape(shape)
        if not need_grad:
            return warped, None
        wgrad = np.stack([
            ndimage.map_coordinates(g, m_idx, order=1, mode="constant", cval=0.0).reshape(shape)
            for g in self.m_grad
        ])
        return warped, wgrad


def _metric_state(level: _Level, mat, offset, need_grad):
    warped, wgrad = level.warp_all(mat, offset, need_grad)
    value, g_vals = _ncc_value_and_pointwise_grad(level.fixed, warped, level.window,
                                                  level.mask, need_grad)
    if not np.isfinite(value):
        raise RegistrationError("non-finite metric value")
    return value, g_vals, wgrad


def _center_of_mass(volume: Volume3D) -> np.ndarray:
    w = np.abs(np.asarray(volume.data, dtype=float))
    total = w.sum()
    if total == 0:
        return volume.center_world()
    idx = np.array(ndimage.center_of_mass(w))
    return volume.index_to_world(idx)


def _scaled_ascent(params, grad, scales, step):
    g_scaled = grad * scales
    norm = np.linalg.norm(g_scaled)
    if norm == 0:
        return None
    return params + step * scales * g_scaled / norm


def _optimize(level_builder, x0, scales, param_map, cfg: RegistrationConfig):
    """Regular-step gradient ascent over the pyramid.

    Each iteration takes one accepted uphill step along the scaled gradient,
    halving the step length until the metric improves (and regrowing it
    mildly after successes). ``param_map(params)`` returns the sampler's
    (mat, offset, jac); jac turns pointwise metric gradients into parameter
    gradients.
    """
    params = np.asarray(x0, dtype=float)
    for lvl in range(cfg.levels):
        level = level_builder(lvl)
        step = cfg.step_sizes[lvl]
        mat, offset, jac = param_map(params)
        try:
            value, g_vals, wgrad = _metric_state(level, mat, offset, True)
        except RegistrationError as exc:
            raise RegistrationError(f"{exc} at level {lvl} iteration 0") from exc
        grad = jac(level, g_vals, wgrad, mat, offset)
        for it in range(cfg.iterations[lvl]):
            trial = None
            while step >= cfg.min_step:
                candidate = _scaled_ascent(params, grad, scales, step)
                if candidate is None:
                    break
                t_mat, t_offset, t_jac = param_map(candidate)
                try:
                    t_value, _, _ = _metric_state(level, t_mat, t_offset, False)
                except RegistrationError as exc:
                    raise RegistrationError(f"{exc} at level {lvl} iteration {it}") from exc
                if t_value > value:
                    trial = (candidate, t_value, t_mat, t_offset, t_jac)
                    break
                step *= 0.5
            if trial is None:
                break
            params, t_value, t_mat, t_offset, t_jac = trial
            rel_change = abs(t_value - value) / max(abs(value), 1e-12)
            value = t_value
            _, g_vals, wgrad = _metric_state(level, t_mat, t_offset, True)
            grad = t_jac(level, g_vals, wgrad, t_mat, t_offset)
            if rel_change < cfg.tolerance:
                break
            step = min(step * 1.5, cfg.step_sizes[lvl])
    return params


# ---------------------------------------------------------------------------
# Public registration entry points


def _require_same_direction(fixed, moving):
    if np.max(np.abs(np.asarray(fixed.direction) - np.eye(3))) > 1e-5 or \
       np.max(np.abs(np.asarray(moving.direction) - np.eye(3))) > 1e-5:
        raise VolumeError("registration requires RAS axis-aligned volumes")


def register_rigid(fixed: Volume3D, moving: Volume3D,
                   cfg: RegistrationConfig = RegistrationConfig()) -> RigidTransform:
    """Find the rigid sampler (fixed -> moving points) maximizing mean local NCC."""
    _require_same_direction(fixed, moving)
    center = _center_of_mass(fixed)
    t0 = _center_of_mass(moving) - center
    x0 = np.concatenate([np.zeros(3), t0])

    half_extent = float(np.max(np.asarray(fixed.spacing) * np.asarray(fixed.shape)) / 2.0)
    scales = np.array([1.0] * 3 + [half_extent] * 3)

    levels = {}

    def level_builder(lvl):
        if lvl not in levels:
            levels[lvl] = _Level(fixed, moving, cfg.downsample_factors[lvl],
                                 cfg.smoothing_sigmas[lvl], cfg.metric_window)
        return levels[lvl]

    def param_map(params):
        rot = rotation_from_euler(params[:3])
        c = center
        offset = c + params[3:6] - rot @ c

        def jac(level, g_vals, wgrad, mat, off):
            return _rigid_grad(level, g_vals, wgrad, params, center)

        return rot, offset, jac

    params = _optimize(level_builder, x0, scales, param_map, cfg)
    return RigidTransform.from_params(params, tuple(center))


def _rigid_grad(level: _Level, g_vals, wgrad, params, center):
    """Chain rule: metric gradient w.r.t. the 6 rigid parameters."""
    g = g_vals.ravel()
    wg = wgrad.reshape(3, -1)  # mm-gradient of warped moving at fixed voxels
    rel = level.world - center  # (N, 3)
    grad = np.empty(6)
    for k, dr in enumerate(rotation_derivatives(params[:3])):
        dpoint = rel @ dr.T  # (N, 3)
        grad[k] = float((g * np.einsum("kn,nk->n", wg, dpoint)).sum())
    for k in range(3):
        grad[3 + k] = float((g * wg[k]).sum())
    return grad


def register_affine(fixed: Volume3D, moving: Volume3D, init: RigidTransform,
                    cfg: RegistrationConfig = RegistrationConfig()) -> AffineTransform:
    """Affine correction composed inside the rigid result (sampler: init(affine(x)))."""
    _require_same_direction(fixed, moving)
    center = np.asarray(init.center)
    r_mat = init.matrix
    r_off = center + np.asarray(init.translation) - r_mat @ center
    x0 = np.concatenate([np.eye(3).ravel(), np.zeros(3)])

    half_extent = float(np.max(np.asarray(fixed.spacing) * np.asarray(fixed.shape)) / 2.0)
    scales = np.array([1.0] * 9 + [half_extent] * 3)

    levels = {}

    def level_builder(lvl):
        if lvl not in levels:
            levels[lvl] = _Level(fixed, moving, cfg.downsample_factors[lvl],
                                 cfg.smoothing_sigmas[lvl], cfg.metric_window)
        return levels[lvl]

    def param_map(params):
        mat_a = params[:9].reshape(3, 3)
        off_a = center + params[9:12] - mat_a @ center
        # total sampler: rigid(affine(x)) = r_mat @ (mat_a x + off_a) + r_off
        mat = r_mat @ mat_a
        offset = r_mat @ off_a + r_off

        def jac(level, g_vals, wgrad, m, off):
            return _affine_grad(level, g_vals, wgrad, r_mat, center)

        return mat, offset, jac

    params = _optimize(level_builder, x0, scales, param_map, cfg)
    mat = params[:9].reshape(3, 3)
    if np.linalg.det(mat) <= 0:
        raise RegistrationError("optimizer produced a non orientation-preserving affine")
    return AffineTransform(mat, tuple(params[9:12]), tuple(center))


def _affine_grad(level: _Level, g_vals, wgrad, r_mat, center):
    """Metric gradient w.r.t. the 12 affine-correction parameters."""
    g = g_vals.ravel()
    wg = wgrad.reshape(3, -1)
    # d(sample)/d(affine param) passes through the outer rigid: r_mat @ d(affine(x))
    rwg = r_mat.T @ wg  # equivalent to projecting wg through r_mat once
    rel = level.world - center  # (N, 3)
    grad = np.empty(12)
    grw = g[None, :] * rwg  # (3, N)
    grad[:9] = (grw @ rel).ravel()  # d/dM_ij = sum_n g_n * (r^T wg)_i * rel_j
    grad[9:12] = grw.sum(axis=1)
    return grad
