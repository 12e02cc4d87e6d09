"""Binary PPM (P6) and PGM (P5) encoders for 8-bit images."""

import re
from pathlib import Path

import numpy as np

GRID_TOLERANCE = 1e-6
_HEADER = re.compile(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def to_bytes(values: np.ndarray) -> np.ndarray:
    """
    Convert values on the 1/255 grid in [0, 1] to uint8.

    Raises:
        ValueError: If any value is off the grid or outside [0, 1].
    """
    scaled = np.asarray(values, dtype=np.float64) * 255
    rounded = np.rint(scaled)
    if np.any(np.abs(scaled - rounded) > GRID_TOLERANCE * 255):
        raise ValueError("pixel values are not multiples of 1/255")
    if rounded.size and (rounded.min() < 0 or rounded.max() > 255):
        raise ValueError("pixel values fall outside [0, 1]")
    return rounded.astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    """Encode a 3×H×W image (values k/255) as P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3×H×W image, got shape {image.shape}")
    _, height, width = image.shape
    pixels = to_bytes(image).transpose(1, 2, 0)
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def encode_pgm(grid: np.ndarray) -> bytes:
    """Encode an H×W grid (values k/255, or booleans) as P5."""
    if grid.ndim != 2:
        raise ValueError(f"expected an H×W grid, got shape {grid.shape}")
    height, width = grid.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + to_bytes(grid.astype(np.float64)).tobytes()


def write_ppm(image: np.ndarray, path: Path) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(grid: np.ndarray, path: Path) -> None:
    Path(path).write_bytes(encode_pgm(grid))


def read_netpbm(path: Path) -> tuple[str, np.ndarray]:
    """
    Read a P5 or P6 file written by this module.

    Returns:
        The magic ("P5" or "P6") and a uint8 array (H×W or H×W×3).
    """
    payload = Path(path).read_bytes()
    header = _HEADER.match(payload)
    if header is None:
        raise ValueError(f"{path} is not a binary PGM/PPM file")
    magic = header.group(1).decode("ascii")
    width, height, maxval = (int(v) for v in header.groups()[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    channels = 3 if magic == "P6" else 1
    data = np.frombuffer(payload[header.end() :], dtype=np.uint8)
    if data.size != width * height * channels:
        raise ValueError(f"{path}: expected {width * height * channels} pixel bytes")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return magic, data.reshape(shape)
