"""Domain types and file IO: attribution maps (AGF1), PGM images, manifests."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import DataError, DomainError, ParseError

PathLike = Union[str, Path]
Coord = tuple[int, int]

# Plain decimal reals only: Python's float() would also accept "nan", "inf"
# and "1_0", none of which are valid AGF1 tokens.
_REAL_RE = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")


def format_real(x: float) -> str:
    """17 significant digits, enough for an exact binary64 round trip."""
    return format(float(x), ".17g")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AttributionMap:
    """Per-pixel importance scores on a ``height x width`` grid."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DomainError(f"attribution map must be a non-empty 2D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("attribution map contains non-finite values")
        object.__setattr__(self, "values", _freeze(arr))

    @classmethod
    def from_flat(cls, flat: Sequence[float], height: int, width: int) -> "AttributionMap":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != height * width:
            raise DomainError(f"{flat.size} values do not fill a {height}x{width} grid")
        return cls(flat.reshape(height, width))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def abs(self) -> "AttributionMap":
        return AttributionMap(np.abs(self.values))

    def __eq__(self, other):
        if not isinstance(other, AttributionMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.shape, self.values.tobytes()))

    def __repr__(self):
        return f"AttributionMap({self.height}x{self.width})"


def collapse_channels(attr: np.ndarray) -> np.ndarray:
    """Reduce a ``(channels, h, w)`` attribution to one score per pixel.

    A single channel is returned as-is (signed); several channels are reduced
    by summing absolute values.
    """
    attr = np.asarray(attr, dtype=np.float64)
    if attr.ndim == 2:
        return attr
    if attr.ndim != 3:
        raise DomainError(f"expected (channels, h, w) attribution, got shape {attr.shape}")
    if attr.shape[0] == 1:
        return attr[0]
    return np.abs(attr).sum(axis=0)


@dataclass(frozen=True)
class PixelSet:
    """Duplicate-free ordered pixel coordinates on a ``dims`` grid."""

    coords: tuple[Coord, ...]
    dims: tuple[int, int]

    def __post_init__(self):
        h, w = self.dims
        coords = tuple((int(r), int(c)) for r, c in self.coords)
        if len(set(coords)) != len(coords):
            raise DomainError("pixel set contains duplicate coordinates")
        for r, c in coords:
            if not (0 <= r < h and 0 <= c < w):
                raise DomainError(f"pixel ({r}, {c}) outside {h}x{w} grid")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "dims", (int(h), int(w)))

    @classmethod
    def from_flat_indices(cls, indices: Iterable[int], dims: tuple[int, int]) -> "PixelSet":
        w = dims[1]
        return cls(tuple((int(i) // w, int(i) % w) for i in indices), dims)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "PixelSet":
        """Row-major ordered set of the True entries of ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        return cls.from_flat_indices(np.flatnonzero(mask), mask.shape)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.dims, dtype=bool)
        if self.coords:
            rows, cols = zip(*self.coords)
            m[list(rows), list(cols)] = True
        return m

    def as_set(self) -> frozenset[Coord]:
        return frozenset(self.coords)

    def __len__(self) -> int:
        return len(self.coords)

    def __iter__(self) -> Iterator[Coord]:
        return iter(self.coords)

    def __contains__(self, item) -> bool:
        return tuple(item) in self.as_set()


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Input image with values in [0, 1], stored as ``(channels, h, w)``."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DomainError(f"image must be (channels, h, w), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise DomainError("image pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(arr))

    @classmethod
    def clipped(cls, arr: np.ndarray) -> "ImageTensor":
        return cls(np.clip(arr, 0.0, 1.0))

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"ImageTensor({self.channels}x{self.height}x{self.width})"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[tuple[Path, int], ...]
    class_count: int
    root: Path = field(default=Path("."))

    def __post_init__(self):
        if self.class_count < 1:
            raise DataError("class_count must be positive")
        for path, label in self.entries:
            if not 0 <= label < self.class_count:
                raise DataError(f"label {label} of {path} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.entries)

    def image_id(self, index: int) -> str:
        return self.entries[index][0].stem

    def load_images(self) -> np.ndarray:
        """All images flattened into an ``(n, pixels)`` float array."""
        return np.stack([load_pgm(p).flat for p, _ in self.entries])

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.entries], dtype=np.int64)

    def image_shape(self) -> tuple[int, int, int]:
        return load_pgm(self.entries[0][0]).pixels.shape


# --- AGF1 -------------------------------------------------------------------


def _parse_real(token: str, path, line: int) -> float:
    if not _REAL_RE.match(token):
        raise ParseError(f"not a finite decimal real: {token!r}", path, line)
    value = float(token)
    if not np.isfinite(value):
        raise ParseError(f"value overflows binary64: {token!r}", path, line)
    return value


def parse_map(text: str, path=None) -> AttributionMap:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", path, 1)
    header = lines[0].split()
    if len(header) != 3 or header[0] != "AGF1":
        raise ParseError("header must be 'AGF1 <height> <width>'", path, 1)
    try:
        height, width = int(header[1]), int(header[2])
    except ValueError:
        raise ParseError("header dimensions must be integers", path, 1) from None
    if height < 1 or width < 1:
        raise ParseError("header dimensions must be positive", path, 1)
    if len(lines) - 1 < height:
        raise ParseError(f"expected {height} rows, found {len(lines) - 1}", path, len(lines) + 1)
    if len(lines) - 1 > height:
        raise ParseError(f"unexpected extra row beyond {height}", path, height + 2)
    values = np.empty((height, width), dtype=np.float64)
    for r in range(height):
        lineno = r + 2
        tokens = lines[r + 1].split()
        if len(tokens) != width:
            raise ParseError(f"expected {width} values, found {len(tokens)}", path, lineno)
        for c, tok in enumerate(tokens):
            values[r, c] = _parse_real(tok, path, lineno)
    return AttributionMap(values)


def load_map(path: PathLike) -> AttributionMap:
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return parse_map(text, path)


def render_map(amap: AttributionMap) -> str:
    rows = [f"AGF1 {amap.height} {amap.width}"]
    rows += [" ".join(format_real(v) for v in row) for row in amap.values]
    return "\n".join(rows) + "\n"


def save_map(amap: AttributionMap, path: PathLike) -> None:
    path = Path(path)
    try:
        path.write_text(render_map(amap), encoding="ascii")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


# --- PGM --------------------------------------------------------------------


def _pgm_header(data: bytes, path) -> tuple[bytes, list[int], int]:
    """Return (magic, [width, height, maxval], offset of first payload byte)."""
    pos = 0
    fields: list[bytes] = []
    n = len(data)
    while len(fields) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated header", path)
        fields.append(data[start:pos])
    magic = fields[0]
    if magic not in (b"P2", b"P5"):
        raise ParseError(f"unsupported magic {magic!r} (only P2/P5 PGM)", path)
    try:
        nums = [int(f) for f in fields[1:]]
    except ValueError:
        raise ParseError("non-integer header field", path) from None
    width, height, maxval = nums
    if width < 1 or height < 1:
        raise ParseError("image dimensions must be positive", path)
    if not 1 <= maxval <= 65535:
        raise ParseError(f"maxval {maxval} outside [1, 65535]", path)
    # exactly one whitespace byte separates the header from a binary payload
    if pos < n and not data[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after header", path)
    return magic, nums, pos + 1


def parse_pgm(data: bytes, path=None) -> ImageTensor:
    magic, (width, height, maxval), offset = _pgm_header(data, path)
    count = width * height
    if magic == b"P5":
        nbytes = 1 if maxval < 256 else 2
        payload = data[offset:offset + count * nbytes]
        if len(payload) < count * nbytes:
            raise ParseError(f"truncated payload: {len(payload)} of {count * nbytes} bytes", path)
        raw = np.frombuffer(payload, dtype=np.uint8 if nbytes == 1 else ">u2").astype(np.int64)
    else:
        tokens = data[offset:].split()
        if len(tokens) < count:
            raise ParseError(f"truncated payload: {len(tokens)} of {count} samples", path)
        try:
            raw = np.array([int(t) for t in tokens[:count]], dtype=np.int64)
        except ValueError:
            raise ParseError("non-integer sample in P2 payload", path) from None
    if raw.min() < 0 or raw.max() > maxval:
        raise ParseError(f"sample outside [0, {maxval}]", path)
    return ImageTensor((raw.astype(np.float64) / maxval).reshape(1, height, width))


def load_pgm(path: PathLike) -> ImageTensor:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return parse_pgm(data, path)


def encode_pgm(samples: np.ndarray, maxval: int = 255, binary: bool = True) -> bytes:
    """Encode an integer ``(h, w)`` sample grid as P5 (binary) or P2 (ASCII)."""
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise DomainError("PGM encoding needs a 2D sample grid")
    if samples.min() < 0 or samples.max() > maxval:
        raise DomainError(f"samples outside [0, {maxval}]")
    h, w = samples.shape
    if binary:
        header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        return header + samples.astype(dtype).tobytes()
    body = "\n".join(" ".join(str(int(v)) for v in row) for row in samples)
    return f"P2\n{w} {h}\n{maxval}\n{body}\n".encode("ascii")


def save_pgm(image: ImageTensor, path: PathLike, maxval: int = 255, binary: bool = True) -> None:
    if image.channels != 1:
        raise DomainError("PGM holds a single channel")
    samples = np.rint(image.pixels[0] * maxval).astype(np.int64)
    Path(path).write_bytes(encode_pgm(samples, maxval, binary))


# --- manifest ---------------------------------------------------------------


def load_manifest(path: PathLike, class_count: int | None = None) -> DatasetManifest:
    """Read a ``path,label`` CSV; image paths are relative to the manifest."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["path", "label"]:
        raise ParseError("manifest header must be 'path,label'", path, 1)
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError("expected 2 columns", path, lineno)
        try:
            label = int(row[1])
        except ValueError:
            raise ParseError(f"label {row[1]!r} is not an integer", path, lineno) from None
        img = (path.parent / row[0].strip()).resolve()
        if not img.is_file():
            raise DataError(f"{path}:{lineno}: referenced image {img} does not exist")
        entries.append((img, label))
    if not entries:
        raise DataError(f"manifest {path} lists no images")
    if class_count is None:
        class_count = max(label for _, label in entries) + 1
    manifest = DatasetManifest(tuple(entries), class_count, path.parent)
    shape = None
    for img, _ in entries:
        s = load_pgm(img).pixels.shape
        if shape is not None and s != shape:
            raise DataError(f"{img}: shape {s} differs from {shape}")
        shape = s
    return manifest
