"""Page rasters, patch cutting and per-cell feature transforms.

A page is an (H, W, channels) float array in [0, 1]. Patches are cut on a
fixed-stride grid and turned into FeatureGrids either verbatim (colour
features) or through a bank of Gabor filters sampled every ``subsample``
pixels.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class PageRaster:
    """Row-major image with values in [0, 1]; ``origin`` is its page offset."""
    data: np.ndarray
    origin: tuple = (0, 0)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError("page data must have shape (H, W) or (H, W, 1|3)")
        if not np.all(np.isfinite(a)) or a.size and (a.min() < 0 or a.max() > 1):
            raise ValueError("page values must be finite and lie in [0, 1]")
        object.__setattr__(self, "data", a)
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def gray(self):
        """Luminance image, shape (H, W)."""
        if self.channels == 1:
            return self.data[:, :, 0]
        return self.data @ LUMA


@dataclass(frozen=True)
class FeatureGrid:
    """(D1, D2, F) feature vectors. Cell (i, j) sits at page pixel
    ``origin + (i, j) * cell_stride``."""
    values: np.ndarray
    origin: tuple = (0, 0)
    cell_stride: int = 1

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError("feature values must have shape (D1, D2, F)")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def dims(self):
        return self.values.shape[:2]

    @property
    def feature_dim(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class GaborBankConfig:
    """Gabor bank layout.

    Scale s has wavelength ``wavelength_base * sqrt(2) ** s`` and a Gaussian
    envelope of width ``0.56 * wavelength`` (one octave bandwidth). Each
    kernel is cut to at most ``kernel_size`` pixels and to three envelope
    widths. Orientation k has its stripes at ``k * pi / num_orientations``
    from the vertical, so k = 0 responds most to vertical edges.
    """
    num_orientations: int = 8
    num_scales: int = 5
    kernel_size: int = 31
    wavelength_base: float = 4.0
    response: str = "magnitude"  # "magnitude" or "real" (real and imaginary parts)
    _kernels: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.num_orientations < 1 or self.num_scales < 1:
            raise ValueError("need at least one orientation and one scale")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd number >= 3")
        if self.wavelength_base <= 0:
            raise ValueError("wavelength_base must be positive")
        if self.response not in ("magnitude", "real"):
            raise ValueError(f"unknown response {self.response!r}")

    @property
    def feature_dim(self):
        n = self.num_orientations * self.num_scales
        return n if self.response == "magnitude" else 2 * n

    @property
    def radius(self):
        return max(k.shape[0] // 2 for k in self.kernels())

    def kernels(self):
        """Complex kernels ordered scale-major, each with unit L2 norm."""
        if self._kernels is None:
            object.__setattr__(self, "_kernels", _make_bank(self))
        return self._kernels


def _make_bank(cfg):
    bank = []
    for s in range(cfg.num_scales):
        lam = cfg.wavelength_base * math.sqrt(2.0) ** s
        sigma = 0.56 * lam
        r = min(cfg.kernel_size // 2, int(math.ceil(3 * sigma)))
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
        env = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
        for k in range(cfg.num_orientations):
            th = k * math.pi / cfg.num_orientations
            phase = 2 * math.pi / lam * (xx * math.cos(th) + yy * math.sin(th))
            re = env * np.cos(phase)
            re -= env * (re.sum() / env.sum())
            im = env * np.sin(phase)
            im -= env * (im.sum() / env.sum())
            g = re + 1j * im
            bank.append(g / np.sqrt((np.abs(g) ** 2).sum()))
    return bank


def extract_patches(page, patch_size, stride):
    """Patches at (r * stride1, c * stride2) that fit inside the page."""
    h, w = int(patch_size[0]), int(patch_size[1])
    s1, s2 = int(stride[0]), int(stride[1])
    if s1 < 1 or s2 < 1:
        raise ValueError("stride must be at least 1 in both axes")
    if h < 1 or w < 1 or h > page.height or w > page.width:
        raise ValueError(f"patch {h}x{w} does not fit in a {page.height}x{page.width} page")
    out = []
    for r in range(0, page.height - h + 1, s1):
        for c in range(0, page.width - w + 1, s2):
            out.append(PageRaster(page.data[r:r + h, c:c + w],
                                  origin=(page.origin[0] + r, page.origin[1] + c)))
    return out


def color_features(patch):
    """Pixel values as features: D = patch size, F = channels."""
    if patch.channels not in (1, 3):
        raise ValueError("colour features need 1 or 3 channels")
    return FeatureGrid(values=patch.data.copy(), origin=patch.origin, cell_stride=1)


def gabor_responses(image, config):
    """Full-resolution responses of a 2-D image, shape (H, W, F)."""
    image = np.asarray(image, dtype=np.float64)
    r = config.radius
    if 2 * r + 1 > min(image.shape):
        raise ValueError(f"Gabor kernel ({2 * r + 1} px) is larger than the {image.shape} image")
    padded = np.pad(image, r, mode="reflect")
    out = np.empty(image.shape + (config.feature_dim,))
    for j, g in enumerate(config.kernels()):
        kr = g.shape[0] // 2
        src = padded[r - kr:padded.shape[0] - (r - kr), r - kr:padded.shape[1] - (r - kr)]
        re = fftconvolve(src, g.real, mode="valid")
        im = fftconvolve(src, g.imag, mode="valid")
        if config.response == "magnitude":
            out[:, :, j] = np.hypot(re, im)
        else:
            out[:, :, 2 * j] = re
            out[:, :, 2 * j + 1] = im
    return out


def gabor_features(patch, config, subsample):
    """Gabor responses sampled every ``subsample`` pixels.

    Grid cell (i, j) holds the responses at patch pixel
    (i * s + s // 2, j * s + s // 2); borders are padded by reflection.
    """
    s = int(subsample)
    if s < 1:
        raise ValueError("subsample must be at least 1")
    gray = patch.gray()
    D1, D2 = gray.shape[0] // s, gray.shape[1] // s
    if D1 < 1 or D2 < 1:
        raise ValueError("patch smaller than one subsampling step")
    full = gabor_responses(gray, config)
    o = s // 2
    vals = full[o:o + D1 * s:s, o:o + D2 * s:s]
    return FeatureGrid(values=vals, origin=(patch.origin[0] + o, patch.origin[1] + o),
                       cell_stride=s)


@dataclass(frozen=True)
class FeatureConfig:
    """How a page becomes a dataset of FeatureGrids."""
    patch_size: tuple
    stride: tuple
    kind: str = "gabor"  # "gabor" or "color"
    gabor: GaborBankConfig = field(default_factory=GaborBankConfig)
    subsample: int = 3

    def __post_init__(self):
        if self.kind not in ("gabor", "color"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        object.__setattr__(self, "stride", tuple(int(v) for v in self.stride))

    @property
    def cell_stride(self):
        return self.subsample if self.kind == "gabor" else 1

    @property
    def grid_dims(self):
        s = self.cell_stride
        return (self.patch_size[0] // s, self.patch_size[1] // s)

    @property
    def feature_dim(self):
        return self.gabor.feature_dim if self.kind == "gabor" else None

    def transform(self, patch):
        if self.kind == "color":
            return color_features(patch)
        return gabor_features(patch, self.gabor, self.subsample)


def page_dataset(page, config):
    """Patches of ``page`` and their FeatureGrids, in row-major patch order."""
    patches = extract_patches(page, config.patch_size, config.stride)
    return patches, [config.transform(p) for p in patches]


def default_stride(pattern_size):
    """Half the pattern size per axis (at least 1)."""
    return tuple(max(1, int(v) // 2) for v in pattern_size)
