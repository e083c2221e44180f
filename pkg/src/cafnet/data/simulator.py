"""Synthetic camera pipeline.

Each simulated device owns a fixed photo-response non-uniformity (PRNU)
gain field plus capture settings (Bayer phase, demosaicing strength,
shot-noise level, quantization step).  Rendering a scene runs

    smooth RGB scene -> Bayer sampling -> bilinear demosaic
    -> PRNU gain -> shot-like noise -> quantization -> clip to [0, 1]

and returns a single luminance plane, so images from one device share a
learnable signature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# ITU-R BT.601 luma weights
LUMA = np.array([0.299, 0.587, 0.114])

# channel index (0=R, 1=G, 2=B) of the 2x2 Bayer tile, one entry per phase
CFA_PATTERNS = {
    0: ((0, 1), (1, 2)),  # RGGB
    1: ((1, 0), (2, 1)),  # GRBG
    2: ((1, 2), (0, 1)),  # GBRG
    3: ((2, 1), (1, 0)),  # BGGR
}
CFA_NAMES = {0: "RGGB", 1: "GRBG", 2: "GBRG", 3: "BGGR"}

_KERNEL_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=float) / 4.0
_KERNEL_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=float) / 4.0


@dataclass(frozen=True, eq=False)
class SyntheticCameraProfile:
    device_id: int
    prnu_field: np.ndarray = field(repr=False)
    sigma_prnu: float
    cfa_pattern: int
    demosaic_strength: float
    quantization_step: float
    shot_noise: float
    rng_seed: int

    @property
    def field_size(self) -> int:
        return self.prnu_field.shape[0]


def make_profile(device_id: int, sigma_prnu: float = 0.02, cfa_pattern: int = 0,
                 demosaic_strength: float = 1.0, quantization_step: float = 1.0 / 255,
                 shot_noise: float = 0.004, field_size: int = 128,
                 rng_seed: int | None = None) -> SyntheticCameraProfile:
    """Create a device profile; the PRNU field is drawn from ``rng_seed``.

    The field is standard Gaussian noise rescaled to exactly zero mean and
    standard deviation ``sigma_prnu``.
    """
    if cfa_pattern not in CFA_PATTERNS:
        raise ValueError(f"cfa_pattern must be one of {sorted(CFA_PATTERNS)}")
    if sigma_prnu < 0 or quantization_step < 0 or shot_noise < 0:
        raise ValueError("noise parameters must be non-negative")
    seed = device_id if rng_seed is None else rng_seed
    raw = np.random.default_rng([seed, 0x5052]).standard_normal((field_size, field_size))
    raw -= raw.mean()
    raw /= raw.std()
    return SyntheticCameraProfile(
        device_id=device_id,
        prnu_field=raw * sigma_prnu,
        sigma_prnu=float(sigma_prnu),
        cfa_pattern=int(cfa_pattern),
        demosaic_strength=float(demosaic_strength),
        quantization_step=float(quantization_step),
        shot_noise=float(shot_noise),
        rng_seed=int(seed),
    )


def default_profiles(n_devices: int, sigma_prnu: float = 0.02, field_size: int = 128,
                     seed: int = 0) -> list[SyntheticCameraProfile]:
    """Profiles whose capture settings are spread evenly across devices."""
    if n_devices < 2:
        raise ValueError("need at least two devices")
    strengths = np.linspace(1.0, 0.4, n_devices)
    gains = np.linspace(0.004, 0.016, n_devices)
    return [
        make_profile(
            d,
            sigma_prnu=sigma_prnu,
            cfa_pattern=d % 4,
            demosaic_strength=float(strengths[d]),
            shot_noise=float(gains[d]),
            field_size=field_size,
            rng_seed=seed * 1000 + d,
        )
        for d in range(n_devices)
    ]


def random_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random RGB scene in [0, 1], shape (3, size, size)."""
    sigma = rng.uniform(3.0, 8.0)
    smooth = ndimage.gaussian_filter(rng.standard_normal((4, size, size)), (0, sigma, sigma), mode="wrap")
    smooth /= smooth.std(axis=(1, 2), keepdims=True) + 1e-12
    base = rng.uniform(0.3, 0.7)
    scene = base + rng.uniform(0.08, 0.2) * smooth[0] + rng.uniform(0.02, 0.06) * smooth[1:]
    return np.clip(scene, 0.0, 1.0)


def bayer_mosaic(rgb: np.ndarray, cfa_pattern: int) -> np.ndarray:
    """Sample one colour per pixel; returns the (3, H, W) masked planes."""
    tile = CFA_PATTERNS[cfa_pattern]
    masks = np.zeros(rgb.shape, dtype=bool)
    for dy in range(2):
        for dx in range(2):
            masks[tile[dy][dx], dy::2, dx::2] = True
    return np.where(masks, rgb, 0.0)


def bilinear_demosaic(planes: np.ndarray) -> np.ndarray:
    out = np.empty_like(planes)
    for ch, kernel in ((0, _KERNEL_RB), (1, _KERNEL_G), (2, _KERNEL_RB)):
        out[ch] = ndimage.convolve(planes[ch], kernel, mode="mirror")
    return out


def synthesize_image(profile: SyntheticCameraProfile, scene_seed: int, size: int = 128) -> np.ndarray:
    """Render one grayscale image in [0, 1] of shape (size, size).

    All per-image randomness (scene content, shot noise) comes from
    ``scene_seed``; the device contributes only its fixed settings.
    """
    if size < 64:
        raise ValueError(f"image size must be at least 64, got {size}")
    if size > profile.field_size:
        raise ValueError(f"image size {size} exceeds the PRNU field size {profile.field_size}")
    rng = np.random.default_rng([int(scene_seed), 0x5343])
    scene = random_scene(rng, size)
    # sensor stage: PRNU gain and shot noise act on the photosites
    raw = scene * (1.0 + profile.prnu_field[:size, :size])
    noise = rng.standard_normal(scene.shape)
    if profile.shot_noise > 0:
        raw = raw + profile.shot_noise * np.sqrt(np.clip(raw, 0.0, None)) * noise
    demosaiced = bilinear_demosaic(bayer_mosaic(raw, profile.cfa_pattern))
    rgb = raw + profile.demosaic_strength * (demosaiced - raw)
    gray = np.tensordot(LUMA, rgb, axes=1)
    if profile.quantization_step > 0:
        gray = np.round(gray / profile.quantization_step) * profile.quantization_step
    return np.clip(gray, 0.0, 1.0)
