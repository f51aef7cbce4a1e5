"""Synthetic paired phantoms, raw image I/O and dataset assembly.

A phantom is a head-shaped arrangement of soft-tissue ellipses with a few
small bright lesions. Both modalities are rendered from one shared tissue
map (identical geometry) through two different monotone piecewise-linear
contrast curves, which makes the pair strongly correlated; one curve mimics
a T2-weighted rendering, the other a fluid-suppressed one. Lesions are
stamped after smoothing so their pixels stay bright in both modalities.

Training triples pair a phantom's ground-truth image with its zero-filled
reconstruction under a sampling mask: t2sub is recomputable bit-exactly
from the stored float32 t2 image and the mask.

The raw image format is: 16-byte header (8-byte magic ``KSRIMAGE``, uint32
version, 4 reserved zero bytes), uint32 height, uint32 width, then
height*width float32 values, everything little-endian, row-major.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from .kspace import MaskConfig, SamplingMask, make_mask, zero_filled_recon

__all__ = [
    "ImageFormatError",
    "PhantomError",
    "PhantomSpec",
    "SampleTriple",
    "build_dataset",
    "export_png8",
    "generate_phantom",
    "load_dataset",
    "load_image",
    "normalize_intensity",
    "resize2d",
    "save_image",
    "subsample_image",
    "synthesize_triples",
]


class PhantomError(RuntimeError):
    pass


class ImageFormatError(RuntimeError):
    pass


# tissue value -> intensity breakpoints; both curves are monotone so the two
# renderings of one tissue map stay positively correlated
T2_CURVE = ((0.0, 0.02), (0.25, 0.32), (0.5, 0.55), (0.75, 0.70), (1.0, 1.0))
FLAIR_CURVE = ((0.0, 0.02), (0.25, 0.18), (0.5, 0.42), (0.75, 0.85), (1.0, 1.0))


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, contrast and texture parameters of one synthetic slice.

    ``texture_band`` is the fine-tissue texture passband along the phase
    axis, as fractions of the image width (cycles per image / width); the
    texture rides on the interior anatomy in both modalities and is what
    distinguishes masks that sample high frequencies from masks that do not.
    """

    shape: tuple = (64, 64)
    n_ellipses: int = 6
    n_lesions: int = 3
    seed: int = 0
    t2_curve: tuple = T2_CURVE
    flair_curve: tuple = FLAIR_CURVE
    smoothing: float = 1.0
    texture_amp: float = 0.24
    texture_band: tuple = (0.31, 0.42)

    def __post_init__(self):
        if self.n_ellipses < 1:
            raise ValueError(f"need at least one ellipse, got {self.n_ellipses}")
        if self.n_lesions < 0:
            raise ValueError(f"lesion count must be >= 0, got {self.n_lesions}")
        if self.texture_amp < 0:
            raise ValueError(f"texture amplitude must be >= 0, got {self.texture_amp}")
        lo, hi = self.texture_band
        if not 0.0 < lo < hi <= 0.5:
            raise ValueError(f"texture band must satisfy 0 < lo < hi <= 0.5, got {self.texture_band}")
        for curve in (self.t2_curve, self.flair_curve):
            xs = [p[0] for p in curve]
            ys = [p[1] for p in curve]
            if xs != sorted(xs) or ys != sorted(ys):
                raise ValueError("contrast curves must be monotone piecewise-linear")

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "n_ellipses": self.n_ellipses,
            "n_lesions": self.n_lesions,
            "seed": self.seed,
            "t2_curve": [list(p) for p in self.t2_curve],
            "flair_curve": [list(p) for p in self.flair_curve],
            "smoothing": self.smoothing,
            "texture_amp": self.texture_amp,
            "texture_band": list(self.texture_band),
        }

    @staticmethod
    def from_dict(d: dict) -> "PhantomSpec":
        return PhantomSpec(
            shape=tuple(d["shape"]),
            n_ellipses=d["n_ellipses"],
            n_lesions=d["n_lesions"],
            seed=d["seed"],
            t2_curve=tuple(tuple(p) for p in d["t2_curve"]),
            flair_curve=tuple(tuple(p) for p in d["flair_curve"]),
            smoothing=d["smoothing"],
            texture_amp=d["texture_amp"],
            texture_band=tuple(d["texture_band"]),
        )


def _ellipse_mask(yy, xx, cy, cx, ay, ax, theta):
    dy = yy - cy
    dx = xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    return u * u + v * v <= 1.0


def _apply_curve(tissue, curve):
    xs = np.array([p[0] for p in curve])
    ys = np.array([p[1] for p in curve])
    return np.interp(tissue, xs, ys)


def _band_texture(rng, H, W, band):
    """Unit-variance noise band-limited along the width (phase) axis.

    Rows are correlated by a light vertical blur, which leaves the
    along-width passband untouched.
    """
    noise = rng.normal(size=(H, W))
    spec = np.fft.fft(noise, axis=1)
    freq = np.abs(np.fft.fftfreq(W))
    keep = (freq >= band[0]) & (freq <= band[1])
    tex = np.real(np.fft.ifft(spec * keep[None, :], axis=1))
    tex = gaussian_filter(tex, sigma=(1.0, 0.0))
    sd = tex.std()
    return tex / sd if sd > 0 else tex


def generate_phantom(spec: PhantomSpec):
    """Deterministic (t2, flair, lesion_mask) triple for one seed.

    Lesion pixels are at least 0.8 bright in both modalities; the returned
    boolean mask marks them for region-restricted evaluation. Raises
    :class:`PhantomError` when a lesion cannot be placed inside the anatomy
    without overlap after 100 attempts.
    """
    rng = np.random.default_rng(spec.seed)
    H, W = spec.shape
    yy, xx = np.mgrid[0:H, 0:W]
    yy = (yy - (H - 1) / 2.0) / (H / 2.0)
    xx = (xx - (W - 1) / 2.0) / (W / 2.0)

    head_ay = rng.uniform(0.78, 0.88)
    head_ax = rng.uniform(0.66, 0.78)
    head_cy = rng.uniform(-0.04, 0.04)
    head_cx = rng.uniform(-0.04, 0.04)
    head_theta = rng.uniform(-0.15, 0.15)
    head = _ellipse_mask(yy, xx, head_cy, head_cx, head_ay, head_ax, head_theta)

    tissue = np.zeros((H, W))
    tissue[head] = 0.25
    for _ in range(spec.n_ellipses):
        ay = rng.uniform(0.10, 0.45) * head_ay
        ax = rng.uniform(0.10, 0.45) * head_ax
        cy = head_cy + rng.uniform(-0.55, 0.55) * head_ay
        cx = head_cx + rng.uniform(-0.55, 0.55) * head_ax
        theta = rng.uniform(0.0, np.pi)
        value = rng.uniform(0.15, 0.8)
        region = _ellipse_mask(yy, xx, cy, cx, ay, ax, theta) & head
        tissue[region] = value

    t2 = _apply_curve(tissue, spec.t2_curve)
    flair = _apply_curve(tissue, spec.flair_curve)
    if spec.smoothing > 0:
        t2 = gaussian_filter(t2, spec.smoothing)
        flair = gaussian_filter(flair, spec.smoothing)

    if spec.texture_amp > 0:
        texture = _band_texture(rng, H, W, spec.texture_band)
        interior = gaussian_filter(
            _ellipse_mask(yy, xx, head_cy, head_cx, 0.92 * head_ay, 0.92 * head_ax,
                          head_theta).astype(float),
            1.0,
        )
        t2 = t2 + spec.texture_amp * texture * interior
        flair = flair + 0.8 * spec.texture_amp * texture * interior
        t2 = np.clip(t2, 0.0, 1.0)
        flair = np.clip(flair, 0.0, 1.0)

    lesion_mask = np.zeros((H, W), dtype=bool)
    scale = min(H, W) / 64.0
    margin = _ellipse_mask(yy, xx, head_cy, head_cx,
                           0.9 * head_ay, 0.9 * head_ax, head_theta)
    for _ in range(spec.n_lesions):
        placed = False
        for _attempt in range(100):
            r = rng.uniform(2.0, 3.4) * scale
            cy = head_cy + rng.uniform(-0.6, 0.6) * head_ay
            cx = head_cx + rng.uniform(-0.6, 0.6) * head_ax
            py = cy * (H / 2.0) + (H - 1) / 2.0
            px = cx * (W / 2.0) + (W - 1) / 2.0
            dy = np.arange(H)[:, None] - py
            dx = np.arange(W)[None, :] - px
            disk = dy * dy + dx * dx <= r * r
            if disk.any() and np.all(margin[disk]) and not (lesion_mask & disk).any():
                b_t2 = rng.uniform(0.9, 1.0)
                b_fl = rng.uniform(0.9, 1.0)
                t2 = np.maximum(t2, np.where(disk, b_t2, 0.0))
                flair = np.maximum(flair, np.where(disk, b_fl, 0.0))
                lesion_mask |= disk
                placed = True
                break
        if not placed:
            raise PhantomError(
                f"could not place lesion inside anatomy after 100 attempts "
                f"(seed {spec.seed})"
            )

    return np.clip(t2, 0.0, 1.0), np.clip(flair, 0.0, 1.0), lesion_mask


@dataclass
class SampleTriple:
    id: str
    seed: int
    mask_id: str
    t2sub: np.ndarray
    flair: np.ndarray
    t2: np.ndarray
    lesion_mask: np.ndarray | None = None
    paths: dict | None = None


def subsample_image(t2: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """float32 zero-filled reconstruction of a float32 ground-truth image.

    The float64 transform of the float32 input is cast back to float32, so
    the stored t2sub of a triple recomputes bit-exactly from its stored t2.
    """
    return zero_filled_recon(np.asarray(t2, dtype=np.float64), mask).astype(np.float32)


def synthesize_triples(n: int, spec_template: PhantomSpec, mask: SamplingMask,
                       base_seed=None):
    """n in-memory triples with derived seeds base_seed, base_seed+1, ..."""
    seed0 = spec_template.seed if base_seed is None else int(base_seed)
    triples = []
    for i in range(n):
        spec = replace(spec_template, seed=seed0 + i)
        t2, flair, lesions = generate_phantom(spec)
        t2 = t2.astype(np.float32)
        flair = flair.astype(np.float32)
        triples.append(
            SampleTriple(
                id=f"s{i:04d}",
                seed=spec.seed,
                mask_id=mask.id(),
                t2sub=subsample_image(t2, mask),
                flair=flair,
                t2=t2,
                lesion_mask=lesions,
            )
        )
    return triples


# -- raw image format ---------------------------------------------------------

_MAGIC = b"KSRIMAGE"
_VERSION = 1
_HEADER = struct.Struct("<8sI4s")
_DIMS = struct.Struct("<II")


def save_image(path, image: np.ndarray):
    """Write one 2-D image in the raw float32 format (atomic replace)."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"raw format stores 2-D images, got shape {arr.shape}")
    h, w = arr.shape
    payload = (
        _HEADER.pack(_MAGIC, _VERSION, b"\x00" * 4)
        + _DIMS.pack(h, w)
        + np.ascontiguousarray(arr, dtype="<f4").tobytes()
    )
    directory = os.path.dirname(os.path.abspath(str(path)))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, str(path))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_image(path) -> np.ndarray:
    """Read a raw-format image back as float32, validating the layout."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size + _DIMS.size:
        raise ImageFormatError(
            f"{path}: expected at least {_HEADER.size + _DIMS.size} header bytes, "
            f"got {len(raw)}"
        )
    magic, version, _pad = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ImageFormatError(f"{path}: bad magic at byte offset 0: {magic!r}")
    if version != _VERSION:
        raise ImageFormatError(f"{path}: unsupported version {version} at byte offset 8")
    h, w = _DIMS.unpack_from(raw, _HEADER.size)
    expected = _HEADER.size + _DIMS.size + 4 * h * w
    if len(raw) != expected:
        raise ImageFormatError(
            f"{path}: header declares {h}x{w} pixels, expected {expected} bytes, "
            f"got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size + _DIMS.size)
    return data.reshape(h, w).copy()


def export_png8(path, image: np.ndarray):
    """Lossy 8-bit grayscale view; quantization rounds half away from zero."""
    arr = np.asarray(image, dtype=np.float64)
    q = np.clip(np.floor(arr * 255.0 + 0.5), 0.0, 255.0).astype(np.uint8)
    PILImage.fromarray(q, mode="L").save(str(path), format="PNG")


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant inputs map to zeros with a warning."""
    arr = np.asarray(image, dtype=np.float64)
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        warnings.warn("constant image: normalizing to all zeros", RuntimeWarning,
                      stacklevel=2)
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def resize2d(image: np.ndarray, out_shape, mode: str = "bilinear") -> np.ndarray:
    """Nearest or bilinear resampler for ingesting external slices."""
    from .tensor import _linear_resample_matrix

    arr = np.asarray(image, dtype=np.float64)
    H, W = arr.shape
    oh, ow = out_shape
    if mode == "nearest":
        iy = np.minimum((np.arange(oh) + 0.5) * H / oh, H - 1).astype(int)
        ix = np.minimum((np.arange(ow) + 0.5) * W / ow, W - 1).astype(int)
        return arr[np.ix_(iy, ix)]
    if mode == "bilinear":
        ry = _linear_resample_matrix(H, oh, arr.dtype)
        rx = _linear_resample_matrix(W, ow, arr.dtype)
        return ry @ arr @ rx.T
    raise ValueError(f"unknown resize mode {mode!r}")


# -- dataset directories ------------------------------------------------------


def build_dataset(n: int, spec_template: PhantomSpec, mask_config: MaskConfig,
                  out_dir, base_seed=None):
    """Generate n triples and write them plus mask and manifests to a directory.

    Layout: ``mask.txt``, ``dataset.json`` (generation parameters),
    ``manifest.jsonl`` (one object per sample: id, seed, mask_id, paths) and
    three raw images per sample.
    """
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    _, width = spec_template.shape
    mask = make_mask(width, mask_config)
    mask.save(os.path.join(out_dir, "mask.txt"))
    triples = synthesize_triples(n, spec_template, mask, base_seed=base_seed)

    records = []
    for t in triples:
        paths = {
            "t2sub": f"{t.id}_t2sub.raw",
            "flair": f"{t.id}_flair.raw",
            "t2": f"{t.id}_t2.raw",
        }
        save_image(os.path.join(out_dir, paths["t2sub"]), t.t2sub)
        save_image(os.path.join(out_dir, paths["flair"]), t.flair)
        save_image(os.path.join(out_dir, paths["t2"]), t.t2)
        t.paths = paths
        records.append({"id": t.id, "seed": t.seed, "mask_id": t.mask_id,
                        "paths": paths})

    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    meta = {
        "n": n,
        "base_seed": spec_template.seed if base_seed is None else int(base_seed),
        "phantom": spec_template.to_dict(),
        "mask_file": "mask.txt",
    }
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return triples


def load_dataset(directory):
    """Read a dataset directory back into SampleTriples (arrays in memory)."""
    directory = str(directory)
    mask = SamplingMask.load(os.path.join(directory, "mask.txt"))
    triples = []
    with open(os.path.join(directory, "manifest.jsonl"), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            triples.append(
                SampleTriple(
                    id=rec["id"],
                    seed=rec["seed"],
                    mask_id=rec["mask_id"],
                    t2sub=load_image(os.path.join(directory, rec["paths"]["t2sub"])),
                    flair=load_image(os.path.join(directory, rec["paths"]["flair"])),
                    t2=load_image(os.path.join(directory, rec["paths"]["t2"])),
                    paths=rec["paths"],
                )
            )
    return triples, mask
