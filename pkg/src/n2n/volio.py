"""Volume and slice IO plus the two preprocessing pipelines.

Volumes are stored as NIfTI-1 single files (``.nii``): uncompressed,
little-endian, datatype restricted to uint8 / int16 / float32. Everything
outside that envelope errors loudly rather than guessing.

Two preprocessing pipelines are provided:

* generation: slice along z, bilinear resize to 256x256, scale [0,255] to
  [0,1], then normalize with mean 0.5 / std 0.5 so inputs live in [-1,1];
* registration: crop to the tight foreground bounding box, trilinear
  resize to a 128^3 cube, then slice along z.
"""

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractError, FormatError, N2NError

SUPPORTED_DTYPES = ("uint8", "int16", "float32")

# NIfTI-1 datatype codes for the supported subset
_DTYPE_BY_CODE = {2: np.uint8, 4: np.int16, 16: np.float32}
_CODE_BY_DTYPE = {"uint8": 2, "int16": 4, "float32": 16}
_BITPIX_BY_CODE = {2: 8, 4: 16, 16: 32}

_HEADER_SIZE = 348
_VOX_OFFSET = 352

# full NIfTI-1 header layout, little-endian
_HEADER_FMT = (
    "<i"     # sizeof_hdr
    "10s"    # data_type (unused)
    "18s"    # db_name (unused)
    "i"      # extents (unused)
    "h"      # session_error (unused)
    "b"      # regular (unused)
    "b"      # dim_info
    "8h"     # dim
    "3f"     # intent_p1..p3
    "h"      # intent_code
    "h"      # datatype
    "h"      # bitpix
    "h"      # slice_start
    "8f"     # pixdim
    "f"      # vox_offset
    "f"      # scl_slope
    "f"      # scl_inter
    "h"      # slice_end
    "b"      # slice_code
    "b"      # xyzt_units
    "f"      # cal_max
    "f"      # cal_min
    "f"      # slice_duration
    "f"      # toffset
    "i"      # glmax (unused)
    "i"      # glmin (unused)
    "80s"    # descrip
    "24s"    # aux_file
    "h"      # qform_code
    "h"      # sform_code
    "3f"     # quatern_b,c,d
    "3f"     # qoffset_x,y,z
    "4f"     # srow_x
    "4f"     # srow_y
    "4f"     # srow_z
    "16s"    # intent_name
    "4s"     # magic
)
assert struct.calcsize(_HEADER_FMT) == _HEADER_SIZE


class NiftiFormatError(FormatError):
    """File is not a supported single-file little-endian NIfTI-1 volume."""


class UnsupportedDatatypeError(NiftiFormatError):
    def __init__(self, code):
        self.code = code
        super().__init__(
            f"unsupported NIfTI datatype code {code}; "
            f"supported codes are {sorted(_DTYPE_BY_CODE)}"
        )


class NoForegroundError(N2NError):
    """Volume has no voxel above the foreground threshold."""


@dataclass
class Volume:
    """A 3D scalar grid of shape (D, H, W) with shape metadata only."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ContractError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(s < 1 for s in self.data.shape):
            raise ContractError(f"volume dimensions must be >= 1, got {self.data.shape}")
        if self.data.dtype.name not in SUPPORTED_DTYPES:
            raise ContractError(
                f"unsupported volume dtype {self.data.dtype.name}; "
                f"supported: {SUPPORTED_DTYPES}"
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype.name


def read_nifti(path) -> Volume:
    """Parse a single-file uncompressed little-endian NIfTI-1 volume.

    Applies scl_slope/scl_inter when nonzero (result becomes float32).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER_SIZE:
        raise NiftiFormatError(f"{path}: truncated header ({len(raw)} < {_HEADER_SIZE} bytes)")
    fields = struct.unpack_from(_HEADER_FMT, raw, 0)
    sizeof_hdr = fields[0]
    if sizeof_hdr != _HEADER_SIZE:
        if struct.unpack("<i", struct.pack(">i", sizeof_hdr))[0] == _HEADER_SIZE:
            raise NiftiFormatError(f"{path}: big-endian NIfTI is not supported")
        raise NiftiFormatError(f"{path}: bad sizeof_hdr {sizeof_hdr}")
    magic = fields[-1]
    if magic != b"n+1\0":
        if magic == b"ni1\0":
            raise NiftiFormatError(f"{path}: two-file NIfTI (hdr/img) is not supported")
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")

    dim = fields[7 : 7 + 8]
    datatype = fields[19]
    vox_offset = fields[30]
    scl_slope = fields[31]
    scl_inter = fields[32]

    if datatype not in _DTYPE_BY_CODE:
        raise UnsupportedDatatypeError(datatype)
    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise NiftiFormatError(f"{path}: dim[0]={ndim} outside [3,7]")
    if any(d > 1 for d in dim[4 : 1 + ndim]):
        raise NiftiFormatError(f"{path}: only 3D volumes are supported, dim={dim}")
    # dim[1] is the fastest-varying axis on disk (x); volumes are (D, H, W)
    w, h, d = dim[1], dim[2], dim[3]
    if min(w, h, d) < 1:
        raise NiftiFormatError(f"{path}: non-positive dimensions in dim={dim}")

    np_dtype = np.dtype(_DTYPE_BY_CODE[datatype]).newbyteorder("<")
    offset = int(round(vox_offset))
    nbytes = w * h * d * np_dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiFormatError(
            f"{path}: truncated data section (need {offset + nbytes} bytes, have {len(raw)})"
        )
    data = np.frombuffer(raw, dtype=np_dtype, count=w * h * d, offset=offset)
    data = data.reshape(d, h, w).copy()

    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        data = (data.astype(np.float32) * np.float32(scl_slope)) + np.float32(scl_inter)
    return Volume(np.ascontiguousarray(data))


def write_nifti(volume: Volume, path):
    """Write a volume as a 348-byte-header single-file NIfTI-1 (.nii)."""
    d, h, w = volume.data.shape
    code = _CODE_BY_DTYPE[volume.dtype]
    dim = (3, w, h, d, 1, 1, 1, 1)
    pixdim = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    header = struct.pack(
        _HEADER_FMT,
        _HEADER_SIZE,
        b"", b"", 0, 0, 0, 0,
        *dim,
        0.0, 0.0, 0.0,
        0,
        code,
        _BITPIX_BY_CODE[code],
        0,
        *pixdim,
        float(_VOX_OFFSET),
        0.0,  # scl_slope: 0 means "no scaling"
        0.0,
        0, 0, 0,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"", b"",
        0, 0,
        0.0, 0.0, 0.0,
        0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        b"",
        b"n+1\0",
    )
    payload = np.ascontiguousarray(volume.data).astype(
        np.dtype(volume.data.dtype).newbyteorder("<"), copy=False
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\0" * (_VOX_OFFSET - _HEADER_SIZE))
        fh.write(payload.tobytes())


def slice_volume(volume: Volume, axis="z"):
    """Split a volume into 2D slices along one axis (default z), order preserved."""
    axes = {"z": 0, "y": 1, "x": 2}
    if axis not in axes:
        raise ContractError(f"invalid slice axis {axis!r}; expected one of {sorted(axes)}")
    moved = np.moveaxis(volume.data, axes[axis], 0)
    return [moved[k].copy() for k in range(moved.shape[0])]


def stack_slices(slices):
    """Inverse of slice_volume along z."""
    return Volume(np.ascontiguousarray(np.stack(slices, axis=0)))


def _resize_axis(arr, out_n, axis, nearest=False):
    """Corner-aligned 1D resampling along one axis (linear or nearest)."""
    in_n = arr.shape[axis]
    if out_n < 1:
        raise ContractError(f"output size must be >= 1, got {out_n}")
    if in_n == out_n:
        return arr
    if out_n == 1:
        pos = np.array([(in_n - 1) / 2.0])
    else:
        pos = np.arange(out_n, dtype=np.float64) * (in_n - 1) / (out_n - 1)
    if nearest:
        idx = np.floor(pos + 0.5).astype(np.intp)
        return np.take(arr, np.clip(idx, 0, in_n - 1), axis=axis)
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, max(in_n - 2, 0))
    frac = pos - i0
    lo = np.take(arr, i0, axis=axis).astype(np.float64)
    hi = np.take(arr, np.minimum(i0 + 1, in_n - 1), axis=axis).astype(np.float64)
    shape = [1] * arr.ndim
    shape[axis] = out_n
    frac = frac.reshape(shape)
    return lo * (1.0 - frac) + hi * frac


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize with corner-aligned sampling; constants are preserved exactly."""
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise ContractError(f"expected a 2D image (or HxWxC), got shape {img.shape}")
    out = _resize_axis(img, out_h, axis=0)
    out = _resize_axis(out, out_w, axis=1)
    return np.asarray(out, dtype=np.float32)


def resize_nearest(image, out_h, out_w):
    """Nearest-neighbor resize (corner-aligned); use for label maps."""
    img = np.asarray(image)
    out = _resize_axis(img, out_h, axis=0, nearest=True)
    out = _resize_axis(out, out_w, axis=1, nearest=True)
    return np.ascontiguousarray(out)


def normalize(image_u8):
    """Map intensities from [0,255] to [-1,1]: p -> (p/255 - 0.5)/0.5.

    Returns a float32 HxWxC tensor (C=1 is added for 2D input).
    """
    arr = np.asarray(image_u8)
    if arr.size == 0:
        raise ContractError("cannot normalize an empty image")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 255.0:
        raise ContractError(f"intensities outside [0,255]: min={lo}, max={hi}")
    out = (arr.astype(np.float32) / 255.0 - 0.5) / 0.5
    if out.ndim == 2:
        out = out[:, :, None]
    elif out.ndim != 3 or out.shape[2] not in (1, 3):
        raise ContractError(f"expected HxW or HxWxC with C in {{1,3}}, got {arr.shape}")
    return out


def denormalize(tensor):
    """Rounded inverse of normalize: [-1,1] float back to uint8 [0,255]."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    out = np.rint((arr * 0.5 + 0.5) * 255.0)
    return np.clip(out, 0, 255).astype(np.uint8)


def foreground_bbox(volume: Volume, threshold=0):
    """Inclusive (lo, hi) index bounds per axis of voxels above threshold."""
    mask = volume.data > threshold
    if not mask.any():
        raise NoForegroundError("volume has no voxels above the foreground threshold")
    bounds = []
    for axis in range(3):
        proj = mask.any(axis=tuple(a for a in range(3) if a != axis))
        idx = np.flatnonzero(proj)
        bounds.append((int(idx[0]), int(idx[-1])))
    return bounds


def brain_cube_preprocess(volume: Volume, size=128, nearest=False):
    """Crop to the tight foreground bounding box, then resize to size^3.

    Images use trilinear interpolation; pass nearest=True for label volumes
    (crop bounds should then come from the matching intensity volume via
    crop_resize_cube).
    """
    bbox = foreground_bbox(volume)
    return crop_resize_cube(volume, bbox, size=size, nearest=nearest)


def crop_resize_cube(volume: Volume, bbox, size=128, nearest=False):
    """Crop a volume to bbox (inclusive bounds) and resize to size^3."""
    (d0, d1), (h0, h1), (w0, w1) = bbox
    cropped = volume.data[d0 : d1 + 1, h0 : h1 + 1, w0 : w1 + 1]
    out = cropped
    for axis in range(3):
        out = _resize_axis(out, size, axis=axis, nearest=nearest)
    if nearest:
        return Volume(np.ascontiguousarray(out))
    return Volume(np.ascontiguousarray(out, dtype=np.float32))


def cube_coordinate_map(bbox, size=128):
    """Offsets and scales mapping original (z,y,x) coords into cube coords.

    cube = (orig - offset) * scale, matching the corner-aligned resampling
    grid of crop_resize_cube.
    """
    offsets = np.array([lo for lo, _ in bbox], dtype=np.float64)
    extents = np.array([hi - lo for lo, hi in bbox], dtype=np.float64)
    scales = np.where(extents > 0, (size - 1) / np.maximum(extents, 1e-12), 0.0)
    return offsets, scales


def write_png(path, image_u8):
    """Write an 8-bit grayscale PNG."""
    arr = np.asarray(image_u8)
    if arr.dtype != np.uint8:
        raise ContractError(f"PNG slices must be uint8, got {arr.dtype}")
    Image.fromarray(arr, mode="L").save(path)


def read_png(path):
    """Read an 8-bit grayscale PNG into a uint8 array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def slice_filename(subject, modality, index):
    """Slice naming convention; keeps modality pairs aligned lexicographically."""
    return f"{subject}_{modality}_{index:04d}.png"
