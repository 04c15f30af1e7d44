"""
CSIF dataset files and the external-array converter.

Layout (little-endian): magic "CSIF", version u16, sample count u32,
N_s u16, N_t u16, scale factor f64, then per sample 2*N_s*N_t float32
values (real plane row-major, then imaginary plane).
"""

import logging
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

try:
    from .channel import ChannelDataset, scale_planes
    from .errors import ConfigError, DataFormatError, DimensionError
except ImportError:
    from channel import ChannelDataset, scale_planes
    from errors import ConfigError, DataFormatError, DimensionError

logger = logging.getLogger(__name__)

MAGIC = b"CSIF"
VERSION = 1
HEADER = struct.Struct("<4sHIHHd")


class ByteReader:
    """Sequential reader that reports the offset of whatever went wrong."""

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = buf
        self.offset = 0
        self.what = what

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise DataFormatError(
                f"Truncated {self.what}: needed {n} bytes, {self.remaining} left", offset=self.offset
            )
        chunk = self.buf[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: Union[str, struct.Struct]) -> Tuple:
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def encode_dataset(ds: ChannelDataset) -> bytes:
    if len(ds) > 0xFFFFFFFF or ds.n_s > 0xFFFF or ds.n_t > 0xFFFF:
        raise ConfigError("Dataset too large for the CSIF header fields")
    header = HEADER.pack(MAGIC, VERSION, len(ds), ds.n_s, ds.n_t, float(ds.scale_factor))
    return header + ds.planes.astype("<f4").tobytes(order="C")


def decode_dataset(
    buf: bytes,
    *,
    expected_dims: Optional[Tuple[int, int]] = None,
    split: str = "train",
    source: str = "memory",
) -> ChannelDataset:
    reader = ByteReader(buf, "CSIF file")
    magic, version, count, n_s, n_t, scale_factor = reader.unpack(HEADER)
    if magic != MAGIC:
        raise DataFormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"Unsupported CSIF version {version}", offset=4)
    if n_s == 0 or n_t == 0:
        raise DataFormatError(f"Invalid dimensions {n_s}x{n_t}", offset=10)
    if expected_dims is not None and (n_s, n_t) != tuple(expected_dims):
        raise DataFormatError(
            f"Dimension mismatch: file holds {n_s}x{n_t}, expected {expected_dims[0]}x{expected_dims[1]}",
            offset=10,
        )
    if count == 0:
        raise DataFormatError("CSIF file declares zero samples", offset=6)

    payload = reader.take(count * 2 * n_s * n_t * 4)
    if reader.remaining:
        raise DataFormatError(f"{reader.remaining} trailing bytes after the last record", offset=reader.offset)
    planes = np.frombuffer(payload, dtype="<f4").reshape(count, 2, n_s, n_t).astype(np.float32)
    if not np.all(np.isfinite(planes)):
        raise DataFormatError("Records contain non-finite values", offset=HEADER.size)
    return ChannelDataset(planes=planes, split=split, source=source, scale_factor=scale_factor)


def save_dataset(ds: ChannelDataset, path: Union[str, Path]) -> None:
    path = Path(path)
    data = encode_dataset(ds)
    path.write_bytes(data)
    logger.info(f"Wrote {len(ds)} samples ({ds.n_s}x{ds.n_t}) to {path}")


def load_dataset(
    path: Union[str, Path],
    *,
    expected_dims: Optional[Tuple[int, int]] = None,
    split: str = "train",
) -> ChannelDataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"Cannot read dataset {path}: {e}") from e
    ds = decode_dataset(buf, expected_dims=expected_dims, split=split, source=str(path))
    logger.debug(f"Loaded {len(ds)} samples from {path} (scale factor {ds.scale_factor:.6g})")
    return ds


def convert_array(
    array: np.ndarray,
    *,
    input_scale: float = 25.0,
    rescale: bool = True,
    split: str = "train",
    source: str = "array",
) -> ChannelDataset:
    """Wrap externally generated angle-delay samples shaped (n, 2, N_s, N_t).

    Samples are assumed already transformed and truncated. With ``rescale``
    the raw magnitudes get the dataset-global map to +-input_scale;
    otherwise they are taken as already scaled.
    """
    arr = np.asarray(array)
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise DimensionError(f"Expected an array shaped (n, 2, N_s, N_t), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ConfigError("Cannot convert an empty array")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ConfigError(f"Expected a floating-point array, got {arr.dtype}")
    if rescale:
        planes, factor = scale_planes(arr, input_scale)
    else:
        planes, factor = arr.astype(np.float32), 1.0
        logger.warning("Converting without rescaling; scale factor recorded as 1.0")
    return ChannelDataset(planes=planes, split=split, source=source, scale_factor=factor)


def convert_npy(source: Union[str, Path], out: Union[str, Path], **kwargs) -> ChannelDataset:
    source = Path(source)
    try:
        array = np.load(source, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise DataFormatError(f"Cannot read array file {source}: {e}") from e
    ds = convert_array(array, source=str(source), **kwargs)
    save_dataset(ds, out)
    return ds
