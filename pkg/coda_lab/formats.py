"""
File formats: PGM label maps, CODAPMAP float arrays, segmenter checkpoints, alignment dumps.

References:
 - https://netpbm.sourceforge.net/doc/pgm.html
 - https://docs.python.org/3.12/library/struct.html#byte-order-size-and-alignment
"""

import struct
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path

import numpy as np

from coda_lab import settings
from coda_lab.alignment import AlignmentState
from coda_lab.core_types import (
    DistributionMatrix,
    LabelMap,
    PixelFeatures,
    ProbabilityMap,
    Role,
)
from coda_lab.exceptions import FormatError
from coda_lab.segmenter import PARAMETER_NAMES, SegmenterDims, SegmenterState


@dataclass
class PmapHeader:
    """
    CODAPMAP header: 8-byte magic, then u32 height, width, channels, little-endian.
    """

    height: int
    width: int
    channels: int

    _struct = struct.Struct("<8sIII")

    def as_bytes(self) -> bytes:
        return self._struct.pack(settings.PMAP_MAGIC, self.height, self.width, self.channels)

    @staticmethod
    def from_bytes(reader: BytesIO) -> "PmapHeader":
        raw = reader.read(PmapHeader._struct.size)
        if len(raw) != PmapHeader._struct.size:
            raise FormatError("<pmap>", "truncated header")
        magic, height, width, channels = PmapHeader._struct.unpack(raw)
        if magic != settings.PMAP_MAGIC:
            raise FormatError("<pmap>", f"bad magic {magic!r}")
        return PmapHeader(height, width, channels)


def encode_pmap(values: np.ndarray) -> bytes:
    """
    Serialize an (H, W, C) array as CODAPMAP: header, then little-endian float32 values, row-major.
    """
    height, width, channels = values.shape
    header = PmapHeader(height, width, channels)
    return header.as_bytes() + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_pmap(data: bytes) -> np.ndarray:
    reader = BytesIO(data)
    header = PmapHeader.from_bytes(reader)
    count = header.height * header.width * header.channels
    body = reader.read()
    if len(body) != 4 * count:
        raise FormatError("<pmap>", f"expected {4 * count} data bytes, got {len(body)}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return values.reshape(header.height, header.width, header.channels)


def write_probability_map(path: Path, prob_map: ProbabilityMap):
    Path(path).write_bytes(encode_pmap(prob_map.values))


def read_probability_map(path: Path) -> ProbabilityMap:
    return ProbabilityMap(decode_pmap(Path(path).read_bytes()))


def write_features(path: Path, features: PixelFeatures):
    # Same container, the channel slot holds the feature dimension
    Path(path).write_bytes(encode_pmap(features.values))


def read_features(path: Path) -> PixelFeatures:
    return PixelFeatures(decode_pmap(Path(path).read_bytes()))


def encode_pgm(labels: LabelMap) -> bytes:
    """
    Binary PGM (P5), maxval = K−1, one byte per pixel, comment line carries K.
    """
    if labels.classes > 256:
        raise FormatError("<pgm>", f"{labels.classes} classes don't fit one byte per pixel")
    header = (
        f"P5\n# classes {labels.classes}\n{labels.width} {labels.height}\n{labels.classes - 1}\n"
    )
    return header.encode("ascii") + labels.labels.astype(np.uint8).tobytes()


def _next_token(reader: BytesIO, comments: list[str]) -> bytes:
    token = b""
    while True:
        char = reader.read(1)
        if not char:
            return token
        if char == b"#":
            comments.append(reader.readline().decode("ascii", "replace").strip())
            if token:
                return token
            continue
        if char.isspace():
            if token:
                return token
            continue
        token += char


def decode_pgm(data: bytes) -> LabelMap:
    reader = BytesIO(data)
    comments: list[str] = []
    magic = _next_token(reader, comments)
    if magic != settings.PGM_MAGIC:
        raise FormatError("<pgm>", f"bad magic {magic!r}")
    try:
        width, height, maxval = (int(_next_token(reader, comments)) for _ in range(3))
    except ValueError as ex:
        raise FormatError("<pgm>", f"bad header: {ex}")

    classes = maxval + 1
    for comment in comments:
        key, _, value = comment.partition(" ")
        if key == "classes":
            classes = int(value)

    # `_next_token` has consumed exactly one whitespace byte after maxval
    body = reader.read()
    if len(body) != width * height:
        raise FormatError("<pgm>", f"expected {width * height} pixels, got {len(body)}")
    labels = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    return LabelMap(labels, classes)


def write_label_map(path: Path, labels: LabelMap):
    Path(path).write_bytes(encode_pgm(labels))


def read_label_map(path: Path) -> LabelMap:
    try:
        return decode_pgm(Path(path).read_bytes())
    except FormatError as ex:
        raise FormatError(path, ex.reason)


@dataclass
class SegmenterHeader:
    """
    Checkpoint header: 8-byte magic "CODASEG1", then u32 feature dim, hidden width, classes.
    """

    features: int
    hidden: int
    classes: int

    _struct = struct.Struct("<8sIII")

    def as_bytes(self) -> bytes:
        return self._struct.pack(settings.SEGMENTER_MAGIC, self.features, self.hidden, self.classes)

    @staticmethod
    def from_bytes(reader: BytesIO) -> "SegmenterHeader":
        raw = reader.read(SegmenterHeader._struct.size)
        if len(raw) != SegmenterHeader._struct.size:
            raise FormatError("<checkpoint>", "truncated header")
        magic, features, hidden, classes = SegmenterHeader._struct.unpack(raw)
        if magic != settings.SEGMENTER_MAGIC:
            raise FormatError("<checkpoint>", f"bad magic {magic!r}")
        return SegmenterHeader(features, hidden, classes)


def encode_segmenter(state: SegmenterState) -> bytes:
    """
    Header, then every parameter as little-endian float64 in declaration order,
    then the momentum buffers in the same order.
    """
    dims = state.dims
    chunks = [SegmenterHeader(dims.features, dims.hidden, dims.classes).as_bytes()]
    for arrays in (state.params, state.momentum):
        for name in PARAMETER_NAMES:
            chunks.append(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_segmenter(data: bytes) -> SegmenterState:
    reader = BytesIO(data)
    header = SegmenterHeader.from_bytes(reader)
    dims = SegmenterDims(header.features, header.hidden, header.classes)
    shapes = dims.parameter_shapes()

    loaded = []
    for _ in range(2):
        arrays = {}
        for name in PARAMETER_NAMES:
            count = int(np.prod(shapes[name]))
            raw = reader.read(8 * count)
            if len(raw) != 8 * count:
                raise FormatError("<checkpoint>", f"truncated at {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shapes[name])
        loaded.append(arrays)
    if reader.read(1):
        raise FormatError("<checkpoint>", "trailing bytes")

    params, momentum = loaded
    return SegmenterState(dims=dims, params=params, momentum=momentum)


def write_segmenter(path: Path, state: SegmenterState):
    Path(path).write_bytes(encode_segmenter(state))


def read_segmenter(path: Path) -> SegmenterState:
    try:
        return decode_segmenter(Path(path).read_bytes())
    except FormatError as ex:
        raise FormatError(path, ex.reason)


def _format_row(row: np.ndarray) -> str:
    return " ".join(f"{value:.{settings.DUMP_DIGITS}g}" for value in row)


def dump_alignment(state: AlignmentState) -> str:
    """
    Plain text dump: alpha and fallback counter as comments, then M^l and M^u,
    one row per line, 17 significant digits.
    """
    lines = [
        f"# alpha {state.alpha!r}",
        f"# fallback_count {state.fallback_count}",
        f"# {Role.LABELED.value}",
        *(_format_row(row) for row in state.labeled.rows),
        f"# {Role.UNLABELED.value}",
        *(_format_row(row) for row in state.unlabeled.rows),
    ]
    return "\n".join(lines) + "\n"


def parse_alignment(text: str) -> AlignmentState:
    alpha = settings.DEFAULT_ALPHA
    fallback_count = 0
    sections: dict[str, list[list[float]]] = {}
    current = None

    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(" ")
            if key == "alpha":
                alpha = float(value)
            elif key == "fallback_count":
                fallback_count = int(value)
            else:
                current = key
                sections[current] = []
            continue
        if current is None:
            raise FormatError("<alignment>", "matrix row before section header")
        sections[current].append([float(token) for token in line.split()])

    try:
        labeled = DistributionMatrix(np.array(sections[Role.LABELED.value]), Role.LABELED)
        unlabeled = DistributionMatrix(np.array(sections[Role.UNLABELED.value]), Role.UNLABELED)
    except KeyError as ex:
        raise FormatError("<alignment>", f"missing section {ex}")
    return AlignmentState(labeled, unlabeled, alpha, fallback_count)


def write_alignment(path: Path, state: AlignmentState):
    Path(path).write_text(dump_alignment(state))


def read_alignment(path: Path) -> AlignmentState:
    return parse_alignment(Path(path).read_text())
