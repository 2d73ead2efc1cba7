"""Binary checkpoints, float-grid dumps and PNG output.

Checkpoint layout (little endian)::

    b"LYRF" | u32 version | 4-byte role tag | u32 layer index
    | u32 n | descriptor JSON, sorted keys (n bytes)
    | u64 count | float64[count] parameters

Role tags: ``BODY``, ``CLTH`` (clothing layer), ``OFFS`` (vertex-offset
model), ``SHLT`` (SH lighting).

Float grid layout::

    b"FGRD" | u32 version | u32 ndim | u32[ndim] shape | float64[prod(shape)]
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, ConfigError
from .fields import BODY, CLOTHING, AnalyticField, LayerField

CHECKPOINT_MAGIC = b"LYRF"
GRID_MAGIC = b"FGRD"
FORMAT_VERSION = 1
ROLE_TAGS = {"body": b"BODY", "clothing": b"CLTH", "offsets": b"OFFS", "sh": b"SHLT"}
TAG_ROLES = {v: k for k, v in ROLE_TAGS.items()}


@dataclass
class Checkpoint:
    role: str
    layer_index: int
    descriptor: dict
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.role not in ROLE_TAGS:
            raise ConfigError(f"unknown checkpoint role {self.role!r}")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64).reshape(-1)

    def to_bytes(self):
        desc = json.dumps(self.descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
        head = CHECKPOINT_MAGIC + struct.pack("<I", FORMAT_VERSION) + ROLE_TAGS[self.role]
        head += struct.pack("<II", self.layer_index, len(desc)) + desc
        return head + struct.pack("<Q", self.params.size) + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data):
        def need(pos, n):
            if len(data) < pos + n:
                raise CheckpointError("checkpoint is truncated")

        need(0, 16)
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a layer checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"checkpoint version {version}, this build reads {FORMAT_VERSION}")
        tag = data[8:12]
        if tag not in TAG_ROLES:
            raise CheckpointError(f"unknown role tag {tag!r}")
        need(12, 8)
        layer_index, n_desc = struct.unpack_from("<II", data, 12)
        need(20, n_desc + 8)
        try:
            descriptor = json.loads(data[20:20 + n_desc].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt descriptor: {exc}") from exc
        pos = 20 + n_desc
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if len(data) != pos + 8 * count:
            raise CheckpointError("checkpoint is truncated or has trailing bytes")
        params = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        return cls(TAG_ROLES[tag], layer_index, descriptor, params)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, role=None):
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        ckpt = cls.from_bytes(data)
        if role is not None and ckpt.role != role:
            raise CheckpointError(f"{path} holds a {ckpt.role} checkpoint, expected {role}")
        return ckpt


def field_checkpoint(layer, extra=None):
    if isinstance(layer, AnalyticField):
        raise ConfigError("analytic fields have no parameters to checkpoint")
    desc = dict(layer.descriptor())
    desc.update(extra or {})
    return Checkpoint(layer.role, layer.layer_index, desc, layer.params)


def field_from_checkpoint(ckpt, role=None):
    if ckpt.role not in (BODY, CLOTHING):
        raise CheckpointError(f"a {ckpt.role} checkpoint does not hold a radiance field")
    if role is not None and ckpt.role != role:
        raise CheckpointError(f"expected a {role} layer, got {ckpt.role}")
    return LayerField.from_descriptor(ckpt.descriptor, ckpt.params, role=ckpt.role,
                                      layer_index=ckpt.layer_index)


def save_grid(path, array):
    # asarray, not ascontiguousarray: the latter promotes 0-d arrays to 1-d
    array = np.asarray(array, dtype=np.float64)
    head = GRID_MAGIC + struct.pack("<II", FORMAT_VERSION, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.astype("<f8").tobytes())


def load_grid(path):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != GRID_MAGIC:
        raise CheckpointError("not a float grid (bad magic)")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"grid version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < 12 + 4 * ndim:
        raise CheckpointError("float grid is truncated")
    shape = struct.unpack_from(f"<{ndim}I", data, 12)
    pos = 12 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(data) != pos + 8 * count:
        raise CheckpointError("float grid size does not match its header")
    return np.frombuffer(data, dtype="<f8", offset=pos).reshape(shape).astype(np.float64)


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image):
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path, format="PNG")
