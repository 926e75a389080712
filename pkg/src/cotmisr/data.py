"""PROBA-V-layout dataset handling.

A scene directory holds LR000.png.. (16-bit gray), QM000.png.. (binary
clearance masks), and optionally HR.png with its SM.png status mask:

    <root>/<band>/imgset<NNNN>/{LR000.png.., QM000.png.., HR.png, SM.png}

Intensities are normalized by 2^16-1 on load; masks are true wherever
the stored value is nonzero. The synthetic generator writes the same
layout so everything downstream is exercised by desk-scale data.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import imageio.v3 as iio
import numpy as np

from cotmisr.errors import DataError

__all__ = [
    "LrStack",
    "SplitManifest",
    "load_scene",
    "write_scene",
    "list_scene_dirs",
    "preprocess",
    "split_scenes",
    "synthesize_dataset",
]

BANDS = ("NIR", "RED")
U16_MAX = 2**16 - 1


@dataclass
class LrStack:
    """One scene: K low-resolution frames with clearance masks, plus
    optional high-resolution ground truth and its status mask."""

    scene_id: str
    band: str
    frames: list[np.ndarray]
    masks: list[np.ndarray]
    hr: np.ndarray | None = None
    hr_mask: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.frames)

    @property
    def clearances(self) -> list[float]:
        return [float(m.mean()) for m in self.masks]


def _read_u16_image(path: Path) -> np.ndarray:
    try:
        arr = iio.imread(path)
    except Exception as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        raise DataError(f"{path}: expected 16-bit gray data, got dtype {arr.dtype}")
    return arr


def _read_mask_image(path: Path) -> np.ndarray:
    try:
        arr = iio.imread(path)
    except Exception as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel mask, got shape {arr.shape}")
    return arr != 0


def load_scene(scene_dir) -> LrStack:
    """Read one scene directory into an LrStack.

    Frames are sorted by index; every LR frame must have a matching QM
    mask of the same extent.
    """
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise DataError(f"{scene_dir}: not a scene directory")
    lr_paths = {}
    qm_paths = {}
    for p in sorted(scene_dir.iterdir()):
        m = re.fullmatch(r"(LR|QM)(\d+)\.png", p.name)
        if m:
            (lr_paths if m.group(1) == "LR" else qm_paths)[int(m.group(2))] = p
    if not lr_paths:
        raise DataError(f"{scene_dir}: no LR frames found")
    if set(lr_paths) != set(qm_paths):
        missing = sorted(set(lr_paths) ^ set(qm_paths))
        raise DataError(f"{scene_dir}: LR/QM pairing mismatch at indices {missing}")

    frames: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    for idx in sorted(lr_paths):
        frame = _read_u16_image(lr_paths[idx]).astype(np.float64) / U16_MAX
        mask = _read_mask_image(qm_paths[idx])
        if mask.shape != frame.shape:
            raise DataError(f"{scene_dir}: QM{idx:03d} extent {mask.shape} != LR extent {frame.shape}")
        if frames and frame.shape != frames[0].shape:
            raise DataError(f"{scene_dir}: LR{idx:03d} extent {frame.shape} differs from first frame")
        frames.append(frame)
        masks.append(mask)

    hr = hr_mask = None
    hr_path = scene_dir / "HR.png"
    if hr_path.exists():
        hr = _read_u16_image(hr_path).astype(np.float64) / U16_MAX
        sm_path = scene_dir / "SM.png"
        hr_mask = _read_mask_image(sm_path) if sm_path.exists() else np.ones(hr.shape, bool)
        if hr_mask.shape != hr.shape:
            raise DataError(f"{scene_dir}: SM extent {hr_mask.shape} != HR extent {hr.shape}")

    band = scene_dir.parent.name if scene_dir.parent.name in BANDS else "NIR"
    return LrStack(
        scene_id=scene_dir.name, band=band, frames=frames, masks=masks, hr=hr, hr_mask=hr_mask
    )


def write_scene(scene_dir, frames_u16, masks, hr_u16=None, hr_mask=None) -> None:
    """Write a scene in the on-disk layout (16-bit LR/HR, binary masks)."""
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    for i, (frame, mask) in enumerate(zip(frames_u16, masks)):
        iio.imwrite(scene_dir / f"LR{i:03d}.png", np.asarray(frame, dtype=np.uint16))
        iio.imwrite(scene_dir / f"QM{i:03d}.png", (np.asarray(mask) != 0).astype(np.uint8) * 255)
    if hr_u16 is not None:
        iio.imwrite(scene_dir / "HR.png", np.asarray(hr_u16, dtype=np.uint16))
        if hr_mask is not None:
            iio.imwrite(scene_dir / "SM.png", (np.asarray(hr_mask) != 0).astype(np.uint8) * 255)


def list_scene_dirs(root, band: str = "ALL") -> list[Path]:
    """Scene directories under the root, filtered by band, sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset root does not exist")
    bands = BANDS if band == "ALL" else (band,)
    if band != "ALL" and band not in BANDS:
        raise DataError(f"unknown band {band!r}; expected NIR, RED, or ALL")
    dirs = []
    for b in bands:
        bdir = root / b
        if bdir.is_dir():
            dirs.extend(p for p in bdir.iterdir() if p.is_dir() and p.name.startswith("imgset"))
    return sorted(dirs, key=lambda p: p.name)


def preprocess(stack: LrStack, min_clearance: float = 0.85) -> LrStack:
    """Drop frames whose clearance ratio falls below the threshold.

    If nothing would survive, the single clearest frame is kept instead
    (ties toward the earlier frame), so the stack never comes back empty.
    """
    keep = [i for i, c in enumerate(stack.clearances) if c >= min_clearance]
    if not keep:
        clearances = stack.clearances
        keep = [max(range(stack.k), key=lambda i: (clearances[i], -i))]
    return replace(
        stack,
        frames=[stack.frames[i] for i in keep],
        masks=[stack.masks[i] for i in keep],
    )


# -- train/validation split -------------------------------------------------


@dataclass
class SplitManifest:
    """Seeded, disjoint train/validation scene id partition."""

    seed: int
    train: list[str]
    val: list[str]

    def save(self, path) -> None:
        lines = [f"# seed={self.seed}", "[train]"]
        lines.extend(self.train)
        lines.append("[val]")
        lines.extend(self.val)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        seed = 0
        section = None
        train: list[str] = []
        val: list[str] = []
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("# seed="):
                seed = int(line.split("=", 1)[1])
            elif line == "[train]":
                section = train
            elif line == "[val]":
                section = val
            elif section is not None:
                section.append(line)
            else:
                raise DataError(f"{path}: scene id {line!r} before any section header")
        return cls(seed=seed, train=train, val=val)


def split_scenes(scene_ids: list[str], seed: int, ratio: float = 0.9) -> SplitManifest:
    """Deterministic shuffled split; ``ratio`` goes to the train side."""
    if not scene_ids:
        raise DataError("cannot split an empty scene list")
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must be in (0,1), got {ratio}")
    order = list(scene_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    n_train = max(1, min(len(order) - 1, round(len(order) * ratio)))
    return SplitManifest(seed=seed, train=sorted(order[:n_train]), val=sorted(order[n_train:]))


# -- synthetic scenes ----------------------------------------------------------


def _procedural_hr(rng, size: int, r: int) -> np.ndarray:
    """Procedural texture: oriented sinusoids concentrated near the
    low-resolution Nyquist band plus soft blobs, quantized so a
    box-downsample by r stays exactly on the 16-bit grid. Detail at
    sub-LR-pixel scale is what separates multi-frame fusion from
    single-frame interpolation, so that is where the energy goes."""
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size))
    for _ in range(6):
        mag = rng.uniform(6.0, 15.0)
        theta = rng.uniform(0, 2 * np.pi)
        fx, fy = mag * np.cos(theta), mag * np.sin(theta)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fx * x + fy * y) + phase)
    for _ in range(2):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        sigma = rng.uniform(0.08, 0.2)
        img += rng.uniform(0.5, 1.0) * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * sigma**2))
    lo, hi = img.min(), img.max()
    img = 0.39 + 0.22 * (img - lo) / (hi - lo)
    # snap to multiples of r*r so LR = mean of r*r samples is an exact u16 value
    step = r * r
    q = np.round(img * U16_MAX / step) * step
    return np.clip(q, 0, (U16_MAX // step) * step).astype(np.uint16)


def _random_occlusion(rng, shape) -> np.ndarray:
    """Clearance mask with a few small opaque patches (clearance ~0.9+)."""
    mask = np.ones(shape, bool)
    for _ in range(int(rng.integers(1, 5))):
        h = int(rng.integers(3, max(4, shape[0] // 4)))
        w = int(rng.integers(3, max(4, shape[1] // 4)))
        top = int(rng.integers(0, shape[0] - h + 1))
        left = int(rng.integers(0, shape[1] - w + 1))
        mask[top : top + h, left : left + w] = False
    return mask


def synthesize_dataset(
    root,
    n_scenes: int,
    hr_size: int = 96,
    r: int = 3,
    k: int = 9,
    shift_px: int = 2,
    noise_sigma: float = 0.01,
    seed: int = 0,
) -> list[Path]:
    """Generate a PROBA-V-layout dataset of procedural scenes.

    Each scene renders one HR texture; every LR frame shifts it by a
    random integer number of HR pixels (at most ``shift_px``, frame 0
    unshifted), box-downsamples by ``r``, adds Gaussian noise, and draws
    a random occlusion mask whose covered pixels are overwritten with a
    bright cloud value, the way a real occlusion hides the ground. The
    degenerate noise-free, shift-free configuration writes pristine
    frames with fully clear masks so downsampling stays bit-exact.
    Scenes alternate between the NIR and RED bands. Fully reproducible
    per seed.
    """
    if hr_size % r != 0:
        raise DataError(f"hr_size={hr_size} must be divisible by r={r}")
    if n_scenes < 1:
        raise DataError("n_scenes must be >= 1")
    root = Path(root)
    rng = np.random.default_rng(seed)
    pristine = noise_sigma == 0 and shift_px == 0
    written = []
    for idx in range(n_scenes):
        band = BANDS[idx % len(BANDS)]
        hr_u16 = _procedural_hr(rng, hr_size, r)
        hr = hr_u16.astype(np.float64) / U16_MAX
        frames_u16 = []
        masks = []
        for f in range(k):
            if f == 0 or shift_px == 0:
                dy = dx = 0
            else:
                dy, dx = (int(v) for v in rng.integers(-shift_px, shift_px + 1, size=2))
            shifted = np.roll(hr, (dy, dx), axis=(0, 1))
            lr = shifted.reshape(hr_size // r, r, hr_size // r, r).mean(axis=(1, 3))
            if noise_sigma > 0:
                lr = lr + rng.normal(0.0, noise_sigma, size=lr.shape)
            if pristine:
                mask = np.ones(lr.shape, bool)
            else:
                mask = _random_occlusion(rng, lr.shape)
                lr[~mask] = rng.uniform(0.82, 0.95)  # opaque cloud over occluded pixels
            lr_u16 = np.round(np.clip(lr, 0.0, 1.0) * U16_MAX).astype(np.uint16)
            frames_u16.append(lr_u16)
            masks.append(mask)
        scene_dir = root / band / f"imgset{idx:04d}"
        write_scene(scene_dir, frames_u16, masks, hr_u16=hr_u16, hr_mask=np.ones(hr.shape, bool))
        written.append(scene_dir)
    return written
