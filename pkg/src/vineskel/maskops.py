"""Binary mask operations: thinning, dilation, refinement, and scoring.

Masks are boolean numpy arrays of shape (height, width). The refinement
trick (thin, dilate, intersect with the original) trims unreliable object
rims while keeping the well-classified centers.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def as_mask(a) -> np.ndarray:
    m = np.asarray(a)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    return m.astype(bool)


def _neighborhood_views(img: np.ndarray):
    """The 8 neighbor planes of the core region, clockwise from north."""
    return (
        img[:-2, 1:-1],  # N
        img[:-2, 2:],    # NE
        img[1:-1, 2:],   # E
        img[2:, 2:],     # SE
        img[2:, 1:-1],   # S
        img[2:, :-2],    # SW
        img[1:-1, :-2],  # W
        img[:-2, :-2],   # NW
    )


def _deletable(img: np.ndarray, r: int, c: int, first_pass: bool) -> bool:
    """Re-check the thinning conditions against the current (padded) image."""
    n, ne, e, se, s, sw, w, nw = (
        img[r - 1, c], img[r - 1, c + 1], img[r, c + 1], img[r + 1, c + 1],
        img[r + 1, c], img[r + 1, c - 1], img[r, c - 1], img[r - 1, c - 1],
    )
    ring = (n, ne, e, se, s, sw, w, nw)
    b = sum(ring)
    if not 2 <= b <= 6:
        return False
    a = sum(ring[i] == 0 and ring[(i + 1) % 8] == 1 for i in range(8))
    if a != 1:
        return False
    if first_pass:
        return n * e * s == 0 and e * s * w == 0
    return n * e * w == 0 and n * s * w == 0


def thin_skeleton(mask) -> np.ndarray:
    """Iterative Zhang-Suen-style thinning to a 1-pixel-wide skeleton.

    Candidate pixels are found per sub-iteration with the classic parallel
    rules, then deleted one at a time in scan order with the conditions
    re-checked against the current image. The sequential guard keeps every
    deletion connectivity-safe, so each 8-connected input component survives
    as one connected component (isolated pixels and dominoes are left as
    they are). Output is always a subset of the input.
    """
    mask = as_mask(mask)
    if mask.size == 0 or not mask.any():
        return mask.copy()
    img = np.pad(mask.astype(np.uint8), 1)
    while True:
        changed = False
        for first_pass in (True, False):
            core = img[1:-1, 1:-1]
            n, ne, e, se, s, sw, w, nw = _neighborhood_views(img)
            ring = [n, ne, e, se, s, sw, w, nw]
            b = sum(r.astype(np.int8) for r in ring)
            a = sum(((ring[i] == 0) & (ring[(i + 1) % 8] == 1)) for i in range(8))
            if first_pass:
                cond = (n * e * s == 0) & (e * s * w == 0)
            else:
                cond = (n * e * w == 0) & (n * s * w == 0)
            cand = (core == 1) & (b >= 2) & (b <= 6) & (a == 1) & cond
            for r0, c0 in zip(*np.nonzero(cand)):
                if _deletable(img, r0 + 1, c0 + 1, first_pass):
                    img[r0 + 1, c0 + 1] = 0
                    changed = True
        if not changed:
            break
    return img[1:-1, 1:-1].astype(bool)


def disk_footprint(radius_px: float) -> np.ndarray:
    """Boolean disk: integer offsets with dy^2 + dx^2 <= radius^2."""
    if radius_px < 0:
        raise ValueError("radius_px must be >= 0")
    r = int(np.floor(radius_px))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    return (dy * dy + dx * dx) <= radius_px * radius_px


def dilate(mask, radius_px: float) -> np.ndarray:
    """Dilation by a Euclidean disk; radius 0 is the identity."""
    mask = as_mask(mask)
    if radius_px < 0:
        raise ValueError("radius_px must be >= 0")
    if radius_px < 1 or mask.size == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk_footprint(radius_px))


def refine_cane_mask(mask, radius_px: float) -> np.ndarray:
    """intersect(dilate(thin(mask), radius), mask): keep centers, drop rims."""
    mask = as_mask(mask)
    return dilate(thin_skeleton(mask), radius_px) & mask


def precision_recall(predicted, truth) -> tuple[float, float, float]:
    """(precision, recall, f1) of two same-shaped masks.

    0/0 ratios are 1.0 when both masks are empty, else 0.0.
    """
    predicted = as_mask(predicted)
    truth = as_mask(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(predicted & truth))
    fp = int(np.count_nonzero(predicted & ~truth))
    fn = int(np.count_nonzero(~predicted & truth))
    if tp == fp == fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def connected_component_count(mask, connectivity: int = 8) -> int:
    structure = EIGHT_CONNECTED if connectivity == 8 else None
    _, n = ndimage.label(as_mask(mask), structure=structure)
    return n


def load_mask(path) -> np.ndarray:
    """Read a binary mask from PNG (any single-channel image) or PGM."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def save_mask(mask, path) -> None:
    path = Path(path)
    mask = as_mask(mask)
    if path.suffix.lower() == ".pgm":
        _write_pgm(mask, path)
        return
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path)


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        if i >= len(data):
            raise ValueError(f"{path}: truncated PGM header")
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i] not in b"\n":
                i += 1
        elif data[i] in b" \t\r\n":
            i += 1
        else:
            j = i
            while j < len(data) and data[j] not in b" \t\r\n#":
                j += 1
            fields.append(data[i:j])
            i = j
    magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5" or maxval > 255:
        raise ValueError(f"{path}: only 8-bit P5 PGM is supported")
    pixels = np.frombuffer(data[i + 1 :], dtype=np.uint8, count=width * height)
    return pixels.reshape(height, width) > 127


def _write_pgm(mask: np.ndarray, path: Path) -> None:
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask.astype(np.uint8) * 255).tobytes())
