"""Model configuration, the AFQW weight container and PPM image input.

AFQW layout (all integers little-endian)::

    b"AFQW"  u32 version (=1)  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, u64 dims[rank], u64 offset
    payload: float32 little-endian tensors, back to back

``offset`` is measured from the first payload byte, so the file size is
exactly ``header_size + sum(tensor byte lengths)``.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DEFAULT_LN_EPS, DTYPE

MAGIC = b"AFQW"
VERSION = 1


class WeightFormatError(ValueError):
    """Base class for problems with an AFQW container."""


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class TensorShapeError(WeightFormatError):
    """A tensor's shape disagrees with the manifest; ``name`` identifies it."""

    def __init__(self, name, message):
        super().__init__(message)
        self.name = name


class ManifestError(WeightFormatError):
    """Tensors missing from, or not expected by, the manifest."""


class ImageFormatError(ValueError):
    pass


class ImageSizeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of a patch-token ViT (no class token)."""

    image_height: int = 112
    image_width: int = 112
    patch_size: int = 8
    embed_dim: int = 512
    num_blocks: int = 12
    num_heads: int = 8
    mlp_ratio: float = 4.0
    ln_eps: float = DEFAULT_LN_EPS
    input_mean: float = 0.5
    input_std: float = 0.5

    def __post_init__(self):
        for name in ("image_height", "image_width", "patch_size", "embed_dim",
                     "num_blocks", "num_heads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("image dimensions must be multiples of patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.hidden_dim < 1:
            raise ValueError("mlp_ratio * embed_dim must be at least 1")
        if self.ln_eps <= 0 or self.input_std <= 0:
            raise ValueError("ln_eps and input_std must be positive")

    @property
    def grid_height(self):
        return self.image_height // self.patch_size

    @property
    def grid_width(self):
        return self.image_width // self.patch_size

    @property
    def num_patches(self):
        return self.grid_height * self.grid_width

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * 3

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self):
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def attention_scale(self):
        return 1.0 / float(np.sqrt(self.head_dim))


_INT_FIELDS = {"image_height", "image_width", "patch_size", "embed_dim",
               "num_blocks", "num_heads"}


def parse_config(text):
    """Parse a flat ``key = value`` config; ``#`` starts a comment."""
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = int(value) if key in _INT_FIELDS else float(value)
    return ModelConfig(**values)


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg):
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n"
                   for f in dataclasses.fields(ModelConfig))


def save_config(cfg, path):
    Path(path).write_text(format_config(cfg), encoding="utf-8")


def weight_manifest(cfg):
    """Ordered mapping of canonical tensor name -> shape for ``cfg``.

    Projections are stored so that they right-multiply token rows, except the
    patch projection which keeps the ``D x (P*P*3)`` orientation of ``Y``.
    Blocks are numbered from 0 in tensor names.
    """
    d, hid = cfg.embed_dim, cfg.hidden_dim
    shapes = {
        "patch_embed.weight": (d, cfg.patch_dim),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.num_patches, d),
    }
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.weight": (d,),
            p + "ln1.bias": (d,),
            p + "attn.q.weight": (d, d),
            p + "attn.k.weight": (d, d),
            p + "attn.v.weight": (d, d),
            p + "attn.proj.weight": (d, d),
            p + "ln2.weight": (d,),
            p + "ln2.bias": (d,),
            p + "mlp.fc1.weight": (d, hid),
            p + "mlp.fc1.bias": (hid,),
            p + "mlp.fc2.weight": (hid, d),
            p + "mlp.fc2.bias": (d,),
        })
    return shapes


class WeightSet(Mapping):
    """Read-only name -> float32 array mapping validated against a manifest."""

    def __init__(self, tensors, cfg=None):
        self._tensors = {}
        for name, value in tensors.items():
            arr = np.array(value, dtype=DTYPE, order="C", copy=True)
            arr.setflags(write=False)
            self._tensors[name] = arr
        if cfg is not None:
            check_manifest(self._tensors, cfg)

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        return f"WeightSet({len(self)} tensors)"


def check_manifest(tensors, cfg):
    """Raise unless ``tensors`` holds exactly the manifest names and shapes."""
    expected = weight_manifest(cfg)
    missing = [n for n in expected if n not in tensors]
    extra = [n for n in tensors if n not in expected]
    if missing or extra:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing[:8]) + (" ..." if len(missing) > 8 else ""))
        if extra:
            parts.append("unexpected: " + ", ".join(extra[:8]) + (" ..." if len(extra) > 8 else ""))
        raise ManifestError("weight manifest mismatch (" + "; ".join(parts) + ")")
    for name, shape in expected.items():
        got = tuple(np.shape(tensors[name]))
        if got != shape:
            msg = f"tensor {name!r} has shape {got}, expected {shape}"
            if name == "pos_embed" and got == (shape[0] + 1, shape[1]):
                msg += " (one extra row: checkpoint appears to include a class token)"
            raise TensorShapeError(name, msg)


def init_random_weights(cfg, seed=0, scale=0.02):
    """Gaussian toy weights (LN gammas 1, betas 0) for tests and demos."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in weight_manifest(cfg).items():
        if name.endswith(("ln1.weight", "ln2.weight")):
            tensors[name] = np.ones(shape, DTYPE)
        elif name.endswith(("ln1.bias", "ln2.bias")):
            tensors[name] = np.zeros(shape, DTYPE)
        else:
            tensors[name] = (rng.standard_normal(shape) * scale).astype(DTYPE)
    return WeightSet(tensors, cfg)


# -- AFQW container -----------------------------------------------------------

def _header_bytes(entries):
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(entries)))
    for name, shape, offset in entries:
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", len(shape)))
        out.write(struct.pack(f"<{len(shape)}Q", *shape))
        out.write(struct.pack("<Q", offset))
    return out.getvalue()


def write_tensors(path, tensors):
    """Write an ordered name -> array mapping as an AFQW container."""
    entries, payload, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        entries.append((name, arr.shape, offset))
        payload.append(arr)
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(_header_bytes(entries))
        for arr in payload:
            fh.write(arr.tobytes())


def _take(buf, pos, n):
    if pos + n > len(buf):
        raise TruncatedFileError(f"file truncated while reading header at byte {pos}")
    return buf[pos:pos + n], pos + n


def read_tensors(path):
    """Read an AFQW container into an ordered dict of float32 arrays."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an AFQW container")
    raw, pos = _take(buf, 4, 8)
    version, count = struct.unpack("<II", raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported AFQW version {version}")
    entries = []
    for _ in range(count):
        raw, pos = _take(buf, pos, 2)
        (name_len,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, name_len)
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, 1)
        (rank,) = struct.unpack("<B", raw)
        raw, pos = _take(buf, pos, 8 * rank)
        shape = struct.unpack(f"<{rank}Q", raw)
        raw, pos = _take(buf, pos, 8)
        (offset,) = struct.unpack("<Q", raw)
        entries.append((name, shape, offset))
    payload = memoryview(buf)[pos:]
    tensors = {}
    for name, shape, offset in entries:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise TruncatedFileError(f"{path}: payload truncated in tensor {name!r}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(DTYPE)
    return tensors


def save_weights(ws, cfg, path):
    """Validate ``ws`` against the manifest of ``cfg``, then write it."""
    check_manifest(ws, cfg)
    ordered = {name: ws[name] for name in weight_manifest(cfg)}
    write_tensors(path, ordered)


def load_weights(path, cfg):
    tensors = read_tensors(path)
    return WeightSet(tensors, cfg)


# -- PPM input ----------------------------------------------------------------

def _ppm_tokens(buf, count):
    """Return ``count`` whitespace-separated header tokens and the data offset."""
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path):
    """Read a binary (P6, maxval 255) PPM into a ``(H, W, 3)`` uint8 array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise ImageFormatError(f"{path}: unsupported image format (only binary PPM P6)")
    try:
        tokens, start = _ppm_tokens(buf, 4)
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PPM (maxval 255) is supported")
    data = buf[start:start + width * height * 3]
    if len(data) != width * height * 3:
        raise ImageFormatError(f"{path}: PPM raster truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, raster):
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[2] != 3 or raster.dtype != np.uint8:
        raise ValueError("raster must be a (H, W, 3) uint8 array")
    h, w, _ = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(raster).tobytes())


def preprocess(raster, cfg):
    """Map 8-bit pixels to ``(x/255 - mean)/std`` as a float32 ``(H, W, 3)`` array."""
    x = np.asarray(raster, dtype=np.float64) / 255.0
    return ((x - cfg.input_mean) / cfg.input_std).astype(DTYPE)


def load_image(path, cfg):
    """Load a PPM of the configured size and apply the input normalization."""
    raster = read_ppm(path)
    if raster.shape[:2] != (cfg.image_height, cfg.image_width):
        raise ImageSizeError(
            f"{path}: image is {raster.shape[1]}x{raster.shape[0]}, "
            f"model expects {cfg.image_width}x{cfg.image_height}")
    return preprocess(raster, cfg)


def read_id_list(path):
    """One identifier per line; blank lines are ignored."""
    text = Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def write_id_list(path, ids):
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
