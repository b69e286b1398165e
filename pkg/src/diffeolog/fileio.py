"""Bit-exact file formats and simple image renders.

Field files ("LEDF"): magic `LEDF`, then little-endian u32 version (1),
u32 height, u32 width, u32 channels (2), u8 dtype code (0 = f32, 1 = f64),
then the payload row-major in (row, col, component) order, little-endian.

Checkpoint files ("LEDM"): a u32 little-endian byte length, a JSON header
(format tag, dtype, model config, tensor names and shapes in order), then
the concatenated little-endian tensor payloads in header order.

Dataset manifests are JSON; every listed field path is opened and its header
checked against the manifest grid when the manifest is loaded.

Renders are binary P6 PPM images.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .fields import DeformationField, Grid2, VectorField, jacobian_logdet, warp_image

FIELD_MAGIC = b"LEDF"
FIELD_VERSION = 1
_DTYPE_BY_CODE = {0: "<f4", 1: "<f8"}
_CODE_BY_NAME = {"f32": 0, "f64": 1}
_U32_MAX = 0xFFFFFFFF


class FormatError(ValueError):
    """A file does not conform to its declared format."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class DimensionError(FormatError):
    pass


class ConfigMismatchError(FormatError):
    pass


class ManifestError(FormatError):
    pass


# ---------------------------------------------------------------------------
# LEDF vector/deformation field files


def field_write(path, f, dtype: str = "f64") -> None:
    """Write a vector field (or a deformation's displacement) as LEDF."""
    if isinstance(f, DeformationField):
        f = f.displacement
    if dtype not in _CODE_BY_NAME:
        raise UnknownDtypeError(f"unsupported dtype {dtype!r}, expected f32 or f64")
    h, w = f.grid.shape
    if h > _U32_MAX or w > _U32_MAX:
        raise DimensionError("grid dimensions overflow u32")
    code = _CODE_BY_NAME[dtype]
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<IIIIB", FIELD_VERSION, h, w, 2, code))
        fh.write(np.ascontiguousarray(f.data).astype(_DTYPE_BY_CODE[code]).tobytes())


def field_read_header(path) -> tuple[int, int, str]:
    """(height, width, dtype name) from an LEDF header, without the payload."""
    with open(path, "rb") as fh:
        head = fh.read(21)
    if len(head) < 21:
        raise TruncatedFileError(f"{path}: header truncated")
    if head[:4] != FIELD_MAGIC:
        raise BadMagicError(f"{path}: bad magic {head[:4]!r}")
    version, h, w, channels, code = struct.unpack("<IIIIB", head[4:21])
    if version != FIELD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if channels != 2:
        raise DimensionError(f"{path}: expected 2 channels, got {channels}")
    if code not in _DTYPE_BY_CODE:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    return h, w, "f32" if code == 0 else "f64"


def field_read(path) -> VectorField:
    """Read an LEDF field; fails without partial results on malformed files."""
    h, w, dtype_name = field_read_header(path)
    dt = np.dtype(_DTYPE_BY_CODE[_CODE_BY_NAME[dtype_name]])
    expected = h * w * 2 * dt.itemsize
    with open(path, "rb") as fh:
        fh.seek(21)
        payload = fh.read()
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype=dt).reshape(h, w, 2).astype(np.float64)
    return VectorField(Grid2(h, w), data)


def field_read_deformation(path) -> DeformationField:
    return DeformationField(field_read(path))


# ---------------------------------------------------------------------------
# LEDM model checkpoints


def checkpoint_save(path, params) -> None:
    """Write model parameters and their config as an LEDM checkpoint."""
    dtype_name = params.config.precision
    header = {
        "format": "LEDM",
        "version": 1,
        "dtype": dtype_name,
        "config": asdict(params.config),
        "tensors": [
            {"name": name, "shape": list(t.data.shape)}
            for name, t in params.tensors.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    wire = "<f4" if dtype_name == "f32" else "<f8"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t.data).astype(wire).tobytes())


def checkpoint_load(path):
    """Load an LEDM checkpoint back into model parameters.

    The tensor table must agree with the architecture implied by the stored
    config (ConfigMismatchError otherwise), and the payload must match the
    declared shapes exactly.
    """
    from .model import ModelConfig, ModelParams, param_shapes
    from .autodiff import Tensor

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: missing header length")
    (hlen,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + hlen:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format") != "LEDM":
        raise BadMagicError(f"{path}: not an LEDM checkpoint")
    if header.get("dtype") not in ("f32", "f64"):
        raise UnknownDtypeError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    config = ModelConfig(**header["config"])
    if header["dtype"] != config.precision:
        raise ConfigMismatchError(f"{path}: dtype {header['dtype']} != config precision")
    expected = param_shapes(config)
    declared = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    if declared != list(expected.items()):
        raise ConfigMismatchError(
            f"{path}: tensor table does not match the architecture for this config"
        )
    wire = "<f4" if header["dtype"] == "f32" else "<f8"
    itemsize = 4 if header["dtype"] == "f32" else 8
    tensors = {}
    offset = 4 + hlen
    for name, shape in declared:
        count = int(np.prod(shape))
        nbytes = count * itemsize
        chunk = raw[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise TruncatedFileError(f"{path}: payload truncated at tensor {name}")
        data = np.frombuffer(chunk, dtype=wire).reshape(shape)
        data = data.astype(np.float32) if header["dtype"] == "f32" else data.astype(np.float64)
        tensors[name] = Tensor(data, requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class PairRecord:
    pair_id: int
    path_fwd: str
    path_bwd: str
    path_gt_velocity: str | None
    covariates: dict[str, float]
    factor_coeffs: list[float] | None


@dataclass
class DatasetManifest:
    format_version: int
    height: int
    width: int
    records: list[PairRecord]
    root: Path

    @property
    def grid(self) -> Grid2:
        return Grid2(self.height, self.width)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_pair(self, i: int) -> tuple[DeformationField, DeformationField]:
        rec = self.records[i]
        return (
            field_read_deformation(self.resolve(rec.path_fwd)),
            field_read_deformation(self.resolve(rec.path_bwd)),
        )

    def load_velocity(self, i: int) -> VectorField | None:
        rec = self.records[i]
        if rec.path_gt_velocity is None:
            return None
        return field_read(self.resolve(rec.path_gt_velocity))


def manifest_to_dict(m: DatasetManifest) -> dict:
    return {
        "format_version": m.format_version,
        "grid": {"height": m.height, "width": m.width},
        "records": [
            {
                "pair_id": r.pair_id,
                "path_fwd": r.path_fwd,
                "path_bwd": r.path_bwd,
                "path_gt_velocity": r.path_gt_velocity,
                "covariates": r.covariates,
                "factor_coeffs": r.factor_coeffs,
            }
            for r in m.records
        ],
    }


def manifest_save(path, m: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_dict(m), fh, indent=2, sort_keys=True)
        fh.write("\n")


def manifest_load(path) -> DatasetManifest:
    """Load a manifest and check every referenced field header against it."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    try:
        records = [
            PairRecord(
                pair_id=r["pair_id"],
                path_fwd=r["path_fwd"],
                path_bwd=r["path_bwd"],
                path_gt_velocity=r.get("path_gt_velocity"),
                covariates=dict(r.get("covariates", {})),
                factor_coeffs=r.get("factor_coeffs"),
            )
            for r in doc["records"]
        ]
        m = DatasetManifest(
            format_version=doc["format_version"],
            height=doc["grid"]["height"],
            width=doc["grid"]["width"],
            records=records,
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc
    for rec in m.records:
        paths = [rec.path_fwd, rec.path_bwd]
        if rec.path_gt_velocity is not None:
            paths.append(rec.path_gt_velocity)
        for rel in paths:
            target = m.resolve(rel)
            if not target.is_file():
                raise ManifestError(f"{path}: missing field file {rel}")
            h, w, _ = field_read_header(target)
            if (h, w) != (m.height, m.width):
                raise ManifestError(
                    f"{path}: {rel} is {h}x{w}, manifest says {m.height}x{m.width}"
                )
    return m


# ---------------------------------------------------------------------------
# PPM renders


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("write_ppm expects an (H, W, 3) uint8 array")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    """Parse a binary P6 file back into an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise BadMagicError(f"{path}: not a P6 file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(raw[pos : pos + h * w * 3], dtype=np.uint8)
    if pixels.size != h * w * 3:
        raise TruncatedFileError(f"{path}: pixel data truncated")
    return pixels.reshape(h, w, 3)


def render_logdet_ppm(path, f: DeformationField) -> None:
    """Jacobian log-determinant render: red contraction, blue expansion,
    white zero, black where the field folds (non-positive determinant)."""
    ld = jacobian_logdet(f)
    finite = np.isfinite(ld)
    vmax = float(np.max(np.abs(ld[finite]))) if finite.any() else 0.0
    if vmax == 0.0:
        vmax = 1.0
    t = np.clip(np.abs(np.where(finite, ld, 0.0)) / vmax, 0.0, 1.0)
    fade = np.round(255.0 * (1.0 - t)).astype(np.uint8)
    full = np.full(ld.shape, 255, dtype=np.uint8)
    neg = finite & (ld < 0)
    pos = finite & (ld > 0)
    r = np.where(finite, np.where(pos, fade, full), 0).astype(np.uint8)
    g = np.where(finite, fade, 0).astype(np.uint8)
    b = np.where(finite, np.where(neg, fade, full), 0).astype(np.uint8)
    write_ppm(path, np.stack([r, g, b], axis=-1))


def make_grid_image(grid: Grid2, line_every: int) -> np.ndarray:
    """White image with black grid lines every `line_every` pixels."""
    if line_every < 2:
        raise ValueError("line_every must be >= 2")
    img = np.ones(grid.shape)
    img[::line_every, :] = 0.0
    img[:, ::line_every] = 0.0
    return img


def render_grid_ppm(path, f: DeformationField, line_every: int = 4) -> None:
    """Render a grid-line image pulled back through the deformation."""
    warped = warp_image(make_grid_image(f.grid, line_every), f)
    gray = np.round(np.clip(warped, 0.0, 1.0) * 255.0).astype(np.uint8)
    write_ppm(path, np.stack([gray, gray, gray], axis=-1))
