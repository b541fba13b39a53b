"""File formats: keypoint JSON and the binary weights container.

Keypoint files are human-diffable JSON (schema_version, image size,
keypoint array of {x, y}, descriptor array).  Weights are little-endian
binary: magic, format version, config echo, ordered named parameter
blobs with shape headers, and a trailing CRC32 over everything after
the magic.  Loading validates the checksum and every shape before any
parameter is touched.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .encoder import KeypointSet
from .errors import FormatError, ShapeError
from .layers import iter_parameters
from .model import Matcher, MatcherConfig, init_matcher_params

KEYPOINT_SCHEMA_VERSION = 1
WEIGHTS_MAGIC = b"KPMATCHW"
WEIGHTS_VERSION = 1

_VARIANTS = ["full", "no_bilateral_context", "vanilla_attention", "random_sampling"]


# ---------------------------------------------------------------------------
# Keypoint JSON
# ---------------------------------------------------------------------------

def save_keypoints(path, kps: KeypointSet) -> None:
    doc = {
        "schema_version": KEYPOINT_SCHEMA_VERSION,
        "image_width": kps.image_size[0],
        "image_height": kps.image_size[1],
        "descriptor_dim": int(kps.descriptors.shape[1]),
        "keypoints": [{"x": float(x), "y": float(y)} for x, y in kps.positions],
        "descriptors": [[float(v) for v in row] for row in kps.descriptors],
    }
    Path(path).write_text(json.dumps(doc))


def load_keypoints(path) -> KeypointSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at line {e.lineno}, "
                          f"column {e.colno} (offset {e.pos})") from e
    try:
        version = doc["schema_version"]
        if version != KEYPOINT_SCHEMA_VERSION:
            raise FormatError(f"{path}: unsupported schema version {version}")
        size = (doc["image_width"], doc["image_height"])
        positions = np.array([[kp["x"], kp["y"]] for kp in doc["keypoints"]],
                             dtype=np.float64).reshape(-1, 2)
        descriptors = np.array(doc["descriptors"], dtype=np.float32)
        if descriptors.size == 0:
            descriptors = descriptors.reshape(0, doc.get("descriptor_dim", 0))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed keypoint file ({e})") from e
    if len(positions) != len(descriptors):
        raise FormatError(f"{path}: {len(positions)} keypoints but "
                          f"{len(descriptors)} descriptors")
    declared = doc.get("descriptor_dim")
    if declared is not None and descriptors.shape[1] != declared:
        raise FormatError(f"{path}: declared descriptor_dim {declared} but "
                          f"rows have width {descriptors.shape[1]}")
    return KeypointSet(positions, descriptors, size)


# ---------------------------------------------------------------------------
# Weights binary
# ---------------------------------------------------------------------------

def save_weights(path, matcher: Matcher) -> None:
    cfg = matcher.config
    body = io.BytesIO()
    variant = _variant_of(cfg)
    body.write(struct.pack("<IIIIIII", WEIGHTS_VERSION, cfg.dim, cfg.heads,
                           cfg.init_layers, cfg.unit_layers, cfg.k,
                           _VARIANTS.index(variant)))
    named = list(iter_parameters(matcher.params))
    body.write(struct.pack("<I", len(named)))
    for name, p in named:
        encoded = name.encode("utf-8")
        body.write(struct.pack("<H", len(encoded)))
        body.write(encoded)
        body.write(struct.pack("<II", p.rows, p.cols))
        body.write(p.data.astype("<f4").tobytes())
    payload = body.getvalue()
    blob = WEIGHTS_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(blob)


def load_weights(path) -> Matcher:
    raw = Path(path).read_bytes()
    if len(raw) < len(WEIGHTS_MAGIC) + 4 or not raw.startswith(WEIGHTS_MAGIC):
        raise FormatError(f"{path}: not a weights file (bad magic)")
    payload, (stored_crc,) = raw[len(WEIGHTS_MAGIC):-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    buf = io.BytesIO(payload)

    def read(fmt):
        size = struct.calcsize(fmt)
        data = buf.read(size)
        if len(data) != size:
            raise FormatError(f"{path}: truncated weights file")
        return struct.unpack(fmt, data)

    version, dim, heads, init_layers, unit_layers, k, variant_idx = read("<IIIIIII")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    if variant_idx >= len(_VARIANTS):
        raise FormatError(f"{path}: unknown variant index {variant_idx}")
    cfg = MatcherConfig(dim=dim, heads=heads, init_layers=init_layers,
                        unit_layers=unit_layers, k=k).with_variant(_VARIANTS[variant_idx])
    params = init_matcher_params(cfg, np.random.default_rng(0))
    named = list(iter_parameters(params))
    (count,) = read("<I")
    if count != len(named):
        raise FormatError(f"{path}: {count} parameter blobs but the "
                          f"config implies {len(named)}")
    for name, p in named:
        (name_len,) = read("<H")
        stored_name = buf.read(name_len).decode("utf-8")
        if stored_name != name:
            raise FormatError(f"{path}: parameter order mismatch: "
                              f"expected {name!r}, found {stored_name!r}")
        rows, cols = read("<II")
        if (rows, cols) != p.shape:
            raise ShapeError(f"{path}: {name} has shape ({rows}, {cols}), "
                             f"config implies {p.shape}")
        nbytes = rows * cols * 4
        data = buf.read(nbytes)
        if len(data) != nbytes:
            raise FormatError(f"{path}: truncated weights file")
        p.data = np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float32)
        p.zero_grad()
    if buf.read(1):
        raise FormatError(f"{path}: trailing bytes after parameter blobs")
    return Matcher(cfg, params)


def _variant_of(cfg: MatcherConfig) -> str:
    if not cfg.bilateral_context:
        return "no_bilateral_context"
    if not cfg.guided_attention:
        return "vanilla_attention"
    if cfg.random_sampling:
        return "random_sampling"
    return "full"
