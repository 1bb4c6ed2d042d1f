"""Image datasets: IDX parsing, binarization, synthetic data and splits."""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, IdxFormatError

SPLITS = ("train", "validation", "test")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
_MAX_ELEMENTS = 1 << 31

# IDX type byte -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def _open(path: Path, mode: str):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an IDX byte string into an array in native byte order."""
    if len(buf) < 4:
        raise IdxFormatError("file too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise IdxFormatError(f"bad magic number 0x{int.from_bytes(buf[:4], 'big'):08x}")
    if ndim == 0:
        raise IdxFormatError("IDX file declares zero dimensions")
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxFormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = 1
    for n in dims:
        count *= n
        if count > _MAX_ELEMENTS:
            raise IdxFormatError(f"declared size {dims} overflows the element limit")
    dtype = _IDX_TYPES[code]
    need = head + count * dtype.itemsize
    if len(buf) < need:
        raise IdxFormatError(f"truncated payload: need {need} bytes, found {len(buf)}")
    if len(buf) > need:
        raise IdxFormatError(f"{len(buf) - need} trailing bytes after the payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=head)
    return data.astype(dtype.newbyteorder("=")).reshape(dims)


def read_idx(path) -> np.ndarray:
    path = Path(path)
    with _open(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx(path, array) -> None:
    """Write ``array`` as IDX (gzip-compressed when the name ends in ``.gz``)."""
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ContractViolation(f"dtype {array.dtype} has no IDX type code")
    if not 1 <= array.ndim <= 255:
        raise ContractViolation("IDX arrays need between 1 and 255 dimensions")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    with _open(Path(path), "wb") as fh:
        fh.write(header)
        fh.write(array.astype(_IDX_TYPES[code]).tobytes())


@dataclass
class RawImages:
    pixels: np.ndarray          # (n, d) uint8
    height: int
    width: int
    provenance: str = ""

    @property
    def n(self) -> int:
        return self.pixels.shape[0]


def load_idx(path) -> RawImages:
    """Load an IDX image file (magic ``0x00000803``) as flattened uint8 rows."""
    arr = read_idx(path)
    if arr.ndim != 3 or arr.dtype != np.uint8:
        raise IdxFormatError(f"expected unsigned-byte images (n, H, W), got {arr.dtype} {arr.shape}")
    n, h, w = arr.shape
    return RawImages(arr.reshape(n, h * w), h, w, file_digest(path))


def load_idx_labels(path) -> np.ndarray:
    """Load an IDX label file (magic ``0x00000801``)."""
    arr = read_idx(path)
    if arr.ndim != 1 or arr.dtype != np.uint8:
        raise IdxFormatError(f"expected a 1-D unsigned-byte label file, got {arr.dtype} {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# Datasets.


def make_splits(n: int, seed: int, fractions=DEFAULT_FRACTIONS) -> np.ndarray:
    """Random split labels (indices into ``SPLITS``); sizes are floor of the fractions
    with the remainder going to the training split."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ContractViolation("fractions must be three non-negative numbers summing to 1")
    sizes = np.floor(fr * n).astype(int)
    sizes[0] += n - sizes.sum()
    labels = np.repeat(np.arange(3, dtype=np.int8), sizes)
    return np.random.default_rng(seed).permutation(labels)


@dataclass
class Dataset:
    images: np.ndarray          # (n, d) uint8 in {0, 1}
    height: int
    width: int
    split: np.ndarray           # (n,) int8 indices into SPLITS
    provenance: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        if self.images.ndim != 2:
            self.images = self.images.reshape(len(self.images), -1)
        if self.images.shape[1] != self.height * self.width:
            raise ContractViolation("image width x height does not match the row length")
        if not np.all(self.images <= 1):
            raise ContractViolation("dataset images must be binary")
        self.split = np.asarray(self.split, dtype=np.int8)
        if self.split.shape != (self.n,) or np.any((self.split < 0) | (self.split > 2)):
            raise ContractViolation("split labels must give one of three splits per image")
        if not self.provenance:
            raise ContractViolation("provenance must be recorded")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def d(self) -> int:
        return self.images.shape[1]

    def sizes(self) -> dict[str, int]:
        return {name: int(np.sum(self.split == i)) for i, name in enumerate(SPLITS)}

    def subset(self, name: str) -> np.ndarray:
        """Float rows of one split, or of all images for ``"all"``."""
        if name == "all":
            return self.images.astype(float)
        if name not in SPLITS:
            raise ContractViolation(f"unknown split {name!r}")
        return self.images[self.split == SPLITS.index(name)].astype(float)


def binarize(raw: RawImages, mode: str = "threshold_half", seed: int | None = None,
             split_seed: int = 0, fractions=DEFAULT_FRACTIONS) -> Dataset:
    """Binarize raw pixels.

    ``threshold_half``: pixel >= 128. ``bernoulli``: one draw with bias
    pixel / 255 (needs ``seed``). ``static``: pixel >= half the maximum value,
    for inputs that are already binary in some encoding.
    """
    px = np.asarray(raw.pixels)
    if px.size and (px.min() < 0 or px.max() > 255):
        raise ContractViolation("raw pixels must lie in [0, 255]")
    if mode == "threshold_half":
        images = px >= 128
        tag = "threshold_half"
    elif mode == "bernoulli":
        if seed is None:
            raise ContractViolation("bernoulli binarization needs a seed")
        rng = np.random.default_rng(seed)
        images = rng.random(px.shape) < px / 255.0
        tag = f"bernoulli(seed={seed})"
    elif mode == "static":
        top = px.max() if px.size else 1
        images = px >= 0.5 * max(top, 1)
        tag = "static"
    else:
        raise ContractViolation(f"unknown binarization mode {mode!r}")
    n = len(px)
    return Dataset(images.astype(np.uint8), raw.height, raw.width,
                   make_splits(n, split_seed, fractions),
                   f"{raw.provenance or 'raw'};{tag};split_seed={split_seed}")


def _square_shape(d: int) -> tuple[int, int]:
    h = int(np.sqrt(d))
    while d % h:
        h -= 1
    return h, d // h


def synth_dataset(n: int, d: int, k_clusters: int, seed: int, bias: float | None = None,
                  fractions=DEFAULT_FRACTIONS) -> Dataset:
    """Bernoulli images drawn around ``k_clusters`` random prototype bias vectors.

    Prototype biases are Beta(0.3, 0.3) draws clipped to [0.02, 0.98]; with
    ``bias`` set every prototype entry equals that value.
    """
    if n < 0 or d < 1 or k_clusters < 1:
        raise ContractViolation("n must be >= 0, d and k_clusters positive")
    rng = np.random.default_rng(seed)
    if bias is None:
        protos = np.clip(rng.beta(0.3, 0.3, (k_clusters, d)), 0.02, 0.98)
    else:
        if not 0.0 <= bias <= 1.0:
            raise ContractViolation("bias must lie in [0, 1]")
        protos = np.full((k_clusters, d), float(bias))
    members = rng.integers(0, k_clusters, n)
    images = (rng.random((n, d)) < protos[members]).astype(np.uint8)
    h, w = _square_shape(d)
    return Dataset(images, h, w, make_splits(n, seed, fractions),
                   f"synth(n={n},d={d},k={k_clusters},seed={seed},bias={bias})",
                   meta={"prototypes": protos, "members": members})


# --------------------------------------------------------------------------
# Plain binary matrix format (.npz) and generic loading.


def save_dataset(path, ds: Dataset) -> None:
    """Write ``ds`` as ``.npz`` with arrays ``images``, ``split`` and a JSON header."""
    header = json.dumps({"height": ds.height, "width": ds.width, "provenance": ds.provenance})
    with open(path, "wb") as fh:
        np.savez_compressed(fh, images=ds.images, split=ds.split, header=np.array(header))


def load_dataset(path, binarize_mode: str = "threshold_half", seed: int | None = None,
                 split_seed: int = 0) -> Dataset:
    """Load an ``.npz`` dataset, or binarize an IDX image file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".npz":
        try:
            with np.load(path, allow_pickle=False) as z:
                header = json.loads(str(z["header"]))
                return Dataset(z["images"], header["height"], header["width"], z["split"],
                               header["provenance"])
        except (KeyError, ValueError) as exc:
            raise ContractViolation(f"{path} is not a dataset file: {exc}") from exc
    return binarize(load_idx(path), binarize_mode, seed=seed, split_seed=split_seed)
