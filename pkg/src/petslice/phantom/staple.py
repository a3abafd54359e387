"""Multi-rater mask simulation and binary STAPLE fusion."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

PARAM_MIN, PARAM_MAX = 0.01, 0.99


@dataclass(frozen=True)
class RaterNoise:
    boundary_jitter_mm: float = 0.0
    flip_rate: float = 0.0

    def __post_init__(self):
        if self.boundary_jitter_mm < 0:
            raise ValueError(f"boundary_jitter_mm must be >= 0, got {self.boundary_jitter_mm}")
        if not 0.0 <= self.flip_rate < 0.5:
            raise ValueError(f"flip_rate must lie in [0, 0.5), got {self.flip_rate}")


@dataclass
class RaterMaskSet:
    masks: list
    rater_noise: list

    def __post_init__(self):
        if not self.masks:
            raise ValueError("need at least one rater mask")
        shape = self.masks[0].shape
        for m in self.masks:
            if m.shape != shape:
                raise ValueError(f"rater masks disagree in shape: {m.shape} vs {shape}")

    def __len__(self):
        return len(self.masks)


def simulate_raters(mask, noise, n_raters, seed, spacing_mm=(1.0, 1.0, 1.0)):
    """Noisy copies of ``mask``, one per rater.

    Each rater first moves the boundary by a random amount in
    ``[-jitter, +jitter]`` mm (dilation if positive, erosion if negative,
    rounded to whole voxels along the finest axis), then flips every voxel
    independently with probability ``flip_rate``. ``noise`` is one
    RaterNoise shared by all raters or a list with one per rater.
    """
    if n_raters < 1:
        raise ValueError(f"n_raters must be >= 1, got {n_raters}")
    if isinstance(noise, RaterNoise):
        noise = [noise] * n_raters
    noise = list(noise)
    if len(noise) != n_raters:
        raise ValueError(f"got {len(noise)} noise settings for {n_raters} raters")
    truth = np.asarray(mask).astype(bool)
    step = float(min(spacing_mm))
    structure = ndimage.generate_binary_structure(truth.ndim, 1)
    rng = np.random.default_rng(seed)
    masks = []
    for nz in noise:
        m = truth.copy()
        shift = rng.uniform(-nz.boundary_jitter_mm, nz.boundary_jitter_mm) if nz.boundary_jitter_mm else 0.0
        n_iter = int(round(abs(shift) / step))
        if n_iter and m.any():
            op = ndimage.binary_dilation if shift > 0 else ndimage.binary_erosion
            m = op(m, structure=structure, iterations=n_iter)
        flips = rng.random(m.shape) < nz.flip_rate
        masks.append((m ^ flips).astype(np.uint8))
    return RaterMaskSet(masks, noise)


@dataclass
class StapleResult:
    fused: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    posterior: np.ndarray
    prior: float
    log_likelihood: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def __iter__(self):
        # allows ``fused, (p, q) = staple_fuse(...)``
        yield self.fused
        yield (self.sensitivity, self.specificity)


def _log_terms(decisions, p, q, prior):
    """Per-voxel log of f*P(D|T=1) and (1-f)*P(D|T=0)."""
    d = decisions
    log_a = np.log(prior) + (d * np.log(p)[:, None] + (1 - d) * np.log1p(-p)[:, None]).sum(axis=0)
    log_b = np.log1p(-prior) + ((1 - d) * np.log(q)[:, None] + d * np.log1p(-q)[:, None]).sum(axis=0)
    return log_a, log_b


def staple_e_step(decisions, p, q, prior):
    """Posterior P(T=1 | D) per voxel and the observed-data log-likelihood."""
    log_a, log_b = _log_terms(decisions, p, q, prior)
    log_z = np.logaddexp(log_a, log_b)
    return np.exp(log_a - log_z), float(log_z.sum())


def staple_m_step(decisions, w):
    """Rater sensitivity/specificity maximizing the expected log-likelihood, clamped."""
    d = decisions
    sw, sn = w.sum(), (1.0 - w).sum()
    p = (d * w).sum(axis=1) / sw if sw > 0 else np.full(d.shape[0], PARAM_MAX)
    q = ((1 - d) * (1.0 - w)).sum(axis=1) / sn if sn > 0 else np.full(d.shape[0], PARAM_MAX)
    return np.clip(p, PARAM_MIN, PARAM_MAX), np.clip(q, PARAM_MIN, PARAM_MAX)


def staple_fuse(raters, max_iters=50, tol=1e-6, init=0.99):
    """Binary STAPLE with a spatially uniform prior.

    The prior is the mean positive fraction over all rater masks. Rater
    parameters start at ``init`` and are kept inside [0.01, 0.99]; since the
    expected log-likelihood is concave and separable in each parameter, the
    clamped M-step is still the constrained maximizer and EM stays monotone.
    """
    masks = raters.masks if isinstance(raters, RaterMaskSet) else list(raters)
    if not masks:
        raise ValueError("need at least one rater mask")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    shape = masks[0].shape
    d = np.stack([np.asarray(m).astype(bool).reshape(-1) for m in masks]).astype(np.float64)
    for j, row in enumerate(d):
        if row.all() or not row.any():
            log.warning("rater %d marked %s voxels; its parameters stay clamped to [%.2f, %.2f]",
                        j, "all" if row.all() else "no", PARAM_MIN, PARAM_MAX)
    prior = float(np.clip(d.mean(), 1e-6, 1 - 1e-6))
    n = d.shape[0]
    p = np.full(n, float(init))
    q = np.full(n, float(init))
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        w, ll = staple_e_step(d, p, q, prior)
        history.append(ll)
        p_new, q_new = staple_m_step(d, w)
        change = max(np.abs(p_new - p).max(), np.abs(q_new - q).max())
        p, q = p_new, q_new
        if change < tol:
            converged = True
            break
    w, ll = staple_e_step(d, p, q, prior)
    history.append(ll)
    fused = (w >= 0.5).reshape(shape).astype(np.uint8)
    return StapleResult(fused, p, q, w.reshape(shape), prior, history, it, converged)
