"""Forward model of accelerated MR acquisition.

Images are real 2-D numpy arrays with intensities in [0, 1]; their spatial
frequency representation ("k-space") is a complex array of the same shape
with the DC coefficient at the grid center, index (H//2, W//2). Acquisition
is accelerated by keeping only a subset of lines along the phase-encoding
axis (the width axis by default) and zeroing the rest.

Two line-selection policies are provided, both parameterized by the
subsampling factor k:

- ``center``: all kept lines form one contiguous block around the center,
  i.e. only low frequencies along the phase axis are acquired.
- ``custom``: a configurable fraction (default 80%) of the kept lines form
  the center block and the remainder are spread equidistantly over the outer
  region, retaining some high-frequency content.

All mask arithmetic rounds half away from zero, except the outer-line
placement which resolves .5 ties toward the lower index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PHASE_AXIS",
    "MaskConfig",
    "SamplingMask",
    "apply_mask",
    "fft2",
    "ifft2",
    "make_mask",
    "zero_filled_recon",
]

PHASE_AXIS = 1  # width axis of (H, W) images

_KINDS = ("center", "custom")


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class MaskConfig:
    """Line-mask policy: subsampling factor, kind and center fraction."""

    k: float = 4.0
    kind: str = "custom"
    center_fraction: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "k", float(self.k))
        object.__setattr__(self, "center_fraction", float(self.center_fraction))
        if self.kind not in _KINDS:
            raise ValueError(f"mask kind must be one of {_KINDS}, got {self.kind!r}")
        if not self.k >= 1.0:
            raise ValueError(f"subsampling factor must be >= 1, got {self.k}")
        if not 0.0 < self.center_fraction <= 1.0:
            raise ValueError(
                f"center fraction must be in (0, 1], got {self.center_fraction}"
            )
        if self.kind == "center" and self.center_fraction != 1.0:
            raise ValueError("center masks fix center_fraction = 1.0")

    @staticmethod
    def center(k: float = 4.0) -> "MaskConfig":
        return MaskConfig(k=k, kind="center", center_fraction=1.0)

    @staticmethod
    def custom(k: float = 4.0, center_fraction: float = 0.8) -> "MaskConfig":
        return MaskConfig(k=k, kind="custom", center_fraction=center_fraction)


@dataclass(frozen=True)
class SamplingMask:
    """Kept phase-encode line indices over a grid of ``length`` lines."""

    length: int
    kept: tuple
    config: MaskConfig

    @property
    def n_kept(self) -> int:
        return len(self.kept)

    @property
    def acceleration(self) -> float:
        return self.length / len(self.kept)

    def id(self) -> str:
        cfg = self.config
        return f"{cfg.kind}-k{cfg.k:g}-cf{cfg.center_fraction:g}-N{self.length}"

    def to_bool(self) -> np.ndarray:
        line = np.zeros(self.length, dtype=bool)
        line[list(self.kept)] = True
        return line

    def save(self, path):
        cfg = self.config
        header = f"{self.length} {cfg.k!r} {cfg.kind} {cfg.center_fraction!r}"
        body = " ".join(str(i) for i in self.kept)
        with open(path, "w", encoding="ascii") as fh:
            fh.write(header + "\n" + body + "\n")

    @staticmethod
    def load(path) -> "SamplingMask":
        with open(path, "r", encoding="ascii") as fh:
            header = fh.readline().split()
            body = fh.readline().split()
        if len(header) != 4:
            raise ValueError(f"mask file {path}: header must have 4 fields, got {len(header)}")
        length = int(header[0])
        config = MaskConfig(k=float(header[1]), kind=header[2], center_fraction=float(header[3]))
        kept = tuple(int(tok) for tok in body)
        if any(i < 0 or i >= length for i in kept):
            raise ValueError(f"mask file {path}: kept index out of range [0, {length})")
        return SamplingMask(length=length, kept=kept, config=config)


def make_mask(n_lines: int, config: MaskConfig) -> SamplingMask:
    """Build the kept-line set for ``n_lines`` phase-encode lines.

    n_keep = round(N / k) lines are retained. A contiguous block of
    n_center = round(center_fraction * n_keep) lines is centered on index
    N // 2 (extending one extra line toward lower indices when the block
    length is even). The remaining lines are placed at equidistant real
    positions over the complement of the block and rounded to the nearest
    unused integer index, lower index on ties.
    """
    if n_lines < 4:
        raise ValueError(f"need at least 4 phase-encode lines, got {n_lines}")
    n_keep = _round_half_away(n_lines / config.k)
    if n_keep < 2:
        raise ValueError(
            f"round({n_lines}/{config.k}) = {n_keep} kept lines; need at least 2"
        )
    n_center = _round_half_away(config.center_fraction * n_keep)
    n_center = min(max(n_center, 1), n_keep)
    start = n_lines // 2 - n_center // 2
    block = range(start, start + n_center)

    kept = set(block)
    n_outer = n_keep - n_center
    if n_outer > 0:
        m = n_lines - n_center  # complement length, both sides concatenated
        spacing = m / n_outer
        used = set()
        for j in range(n_outer):
            pos = (j + 0.5) * spacing - 0.5
            idx = _nearest_unused(pos, m, used)
            used.add(idx)
        for idx in used:
            kept.add(idx if idx < start else idx + n_center)

    return SamplingMask(length=n_lines, kept=tuple(sorted(kept)), config=config)


def _nearest_unused(pos: float, limit: int, used: set) -> int:
    """Nearest free integer in [0, limit) to ``pos``; lower index on ties."""
    base = int(math.ceil(pos - 0.5))  # nearest integer, .5 resolves down
    base = min(max(base, 0), limit - 1)
    if base not in used:
        return base
    for d in range(1, limit):
        lo, hi = base - d, base + d
        lo_ok = lo >= 0 and lo not in used
        hi_ok = hi < limit and hi not in used
        if lo_ok and hi_ok:
            return lo if abs(pos - lo) <= abs(pos - hi) else hi
        if lo_ok:
            return lo
        if hi_ok:
            return hi
    raise ValueError("no unused line index available")


def fft2(image: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D DFT; DC lands at (H//2, W//2)."""
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(image), norm="ortho"))


def ifft2(kspace: np.ndarray, return_residual: bool = False):
    """Inverse of :func:`fft2`, returning the real part.

    The imaginary residue is discarded; pass ``return_residual=True`` to also
    get its maximum magnitude (nonzero whenever the spectrum is not exactly
    conjugate-symmetric, e.g. after asymmetric masking).
    """
    full = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(kspace), norm="ortho"))
    img = full.real
    if return_residual:
        return img, float(np.abs(full.imag).max())
    return img


def apply_mask(kspace: np.ndarray, mask: SamplingMask, axis: int = PHASE_AXIS) -> np.ndarray:
    """Zero every line not in the kept set; kept lines are copied verbatim."""
    if kspace.shape[axis] != mask.length:
        raise ValueError(
            f"mask covers {mask.length} lines but k-space axis {axis} has extent "
            f"{kspace.shape[axis]}"
        )
    out = np.zeros_like(kspace)
    idx = list(mask.kept)
    if axis == 0:
        out[idx, :] = kspace[idx, :]
    elif axis == 1:
        out[:, idx] = kspace[:, idx]
    else:
        raise ValueError(f"axis must be 0 or 1 for 2-D k-space, got {axis}")
    return out


def zero_filled_recon(
    image: np.ndarray,
    mask: SamplingMask,
    axis: int = PHASE_AXIS,
    clip: bool = True,
) -> np.ndarray:
    """Simulated accelerated acquisition: subsample k-space, invert, clamp.

    Returns the real part of the inverse transform of the masked spectrum,
    clamped to [0, 1] unless ``clip`` is false (the unclamped map is linear
    in the input image).
    """
    recon = ifft2(apply_mask(fft2(image), mask, axis=axis))
    return np.clip(recon, 0.0, 1.0) if clip else recon
