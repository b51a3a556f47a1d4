"""Mask visualization as binary PPM (P6) images.

Output is a side-by-side panel: the original image on the left, the same
image with pruned patches blacked out on the right. The kept-token density is
written to a sidecar text file next to the image.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, FormatError


def write_ppm(path: str, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DimensionError(f"write_ppm expects uint8 [H, W, 3], got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Minimal P6 reader (whitespace and # comments per the spec of the format)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P6":
        raise FormatError(f"{path}: not a P6 PPM file")
    fields = []
    i = 2
    while len(fields) < 3:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        fields.append(int(raw[start:i]))
    i += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=i)
    if data.size != w * h * 3:
        raise FormatError(f"{path}: pixel data truncated")
    return data.reshape(h, w, 3).copy()


def _to_rgb_hwc(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"expected image [C, S, S], got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(image, 0, 255).astype(np.uint8)
    c = image.shape[0]
    if c == 1:
        image = np.repeat(image, 3, axis=0)
    elif c != 3:
        raise DimensionError(f"expected 1 or 3 channels, got {c}")
    return image.transpose(1, 2, 0)


def visualize_mask(image: np.ndarray, mask_bits: np.ndarray, patch_size: int, out_path: str) -> float:
    """Write original | pruned-blacked-out side by side; returns kept density.

    mask_bits covers N+1 positions (CLS first); patch bits map row-major onto
    the patch grid. Density is also recorded in ``out_path + '.txt'``.
    """
    rgb = _to_rgb_hwc(image)
    s = rgb.shape[0]
    if rgb.shape[1] != s or s % patch_size:
        raise DimensionError(f"image {rgb.shape[:2]} not square or not divisible by patch {patch_size}")
    grid = s // patch_size
    mask_bits = np.asarray(mask_bits).astype(np.uint8)
    if mask_bits.shape != (grid * grid + 1,):
        raise DimensionError(
            f"mask has {mask_bits.shape[0]} bits but the {grid}x{grid} patch grid needs {grid * grid + 1}"
        )
    pruned = rgb.copy()
    patch_bits = mask_bits[1:].reshape(grid, grid)
    for r in range(grid):
        for c in range(grid):
            if not patch_bits[r, c]:
                pruned[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = 0
    panel = np.concatenate([rgb, pruned], axis=1)
    write_ppm(out_path, panel)
    density = float(mask_bits.sum() / mask_bits.size)
    with open(out_path + ".txt", "w") as fh:
        fh.write(f"kept_density={density:.5f}\nkept_tokens={int(mask_bits.sum())}\ntotal_tokens={mask_bits.size}\n")
    return density
