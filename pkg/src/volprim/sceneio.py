"""Scene files, image output, packed binary formats, and metrics CSV.

Scenes are strict JSON: every key is checked against the schema and an
unknown key is reported with its full field path plus the closest valid
name, so typos fail loudly instead of silently rendering defaults.
parse/serialize are mutually inverse on the data model, and serialized
text is byte-stable after one normalization pass.

The packed mixture format (.vpm) exists for the compression story: a
16-byte header then one fixed 26-float little-endian record per
primitive (mean 3, euler 3, scale 3, sigma, albedo 3, phase_g, and
3x4 spherical-harmonics coefficients, zero padded).  Radiance above
degree 1 does not fit the fixed record and is rejected rather than
silently truncated.  Density grids (.vpg) carry a 48-byte header and
raw float32 voxels.
"""

import csv
import difflib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .cameras import Camera, Equirect360, Perspective, Pose, Telecentric
from .errors import InvalidParameterError
from .geometry import PrimitiveFrame
from .grid import DensityGrid
from .integrators import RenderSettings
from .kernels import KernelKind
from .medium import Mixture, Primitive
from .sampling import SamplingMode
from .sh import degree_from_count, n_coeffs as sh_n_coeffs

__all__ = [
    "SceneFile", "parse_scene", "serialize_scene", "load_scene", "save_scene",
    "write_pfm", "read_pfm", "write_png", "write_vpm", "read_vpm",
    "write_vpg", "read_vpg", "write_metrics_csv",
]

SCENE_VERSION = 1


@dataclass
class SceneFile:
    mixture: Mixture
    environment: np.ndarray
    cameras: list
    settings: RenderSettings = field(default_factory=RenderSettings)
    version: int = SCENE_VERSION


# ---------------------------------------------------------------------------
# Strict JSON parsing


def _fail(path, msg):
    raise InvalidParameterError(f"{path}: {msg}")


def _check_keys(obj, allowed, path):
    if not isinstance(obj, dict):
        _fail(path, f"expected an object, got {type(obj).__name__}")
    for key in obj:
        if key not in allowed:
            near = difflib.get_close_matches(key, allowed, n=1, cutoff=0.0)
            hint = f"; did you mean {near[0]!r}?" if near else ""
            _fail(path, f"unknown key {key!r}{hint}")


def _need(obj, key, path):
    if key not in obj:
        _fail(path, f"missing required key {key!r}")
    return obj[key]


def _num(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(path, f"expected a number, got {type(v).__name__}")
    if not np.isfinite(v):
        _fail(path, "number must be finite")
    return float(v)


def _integer(v, path):
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(path, f"expected an integer, got {type(v).__name__}")
    return v


def _vec3(v, path):
    if not isinstance(v, list) or len(v) != 3:
        _fail(path, "expected a list of 3 numbers")
    return np.array([_num(x, f"{path}[{i}]") for i, x in enumerate(v)])


def _parse_sh(obj, path):
    _check_keys(obj, ("degree", "coeffs"), path)
    degree = _integer(_need(obj, "degree", path), f"{path}.degree")
    if not 0 <= degree <= 4:
        _fail(f"{path}.degree", f"degree must be 0..4, got {degree}")
    want = sh_n_coeffs(degree)
    coeffs = _need(obj, "coeffs", path)
    if not isinstance(coeffs, list) or len(coeffs) != 3:
        _fail(f"{path}.coeffs", "expected 3 channel rows")
    rows = []
    for c, row in enumerate(coeffs):
        if not isinstance(row, list) or len(row) != want:
            _fail(f"{path}.coeffs[{c}]",
                  f"degree {degree} needs {want} coefficients per channel")
        rows.append([_num(x, f"{path}.coeffs[{c}][{i}]")
                     for i, x in enumerate(row)])
    return np.array(rows)


_PRIM_KEYS = ("mean", "euler", "scale", "sigma", "albedo", "phase_g", "sh")


def _parse_primitive(obj, kind, path):
    _check_keys(obj, _PRIM_KEYS, path)
    mean = _vec3(_need(obj, "mean", path), f"{path}.mean")
    euler = _vec3(obj.get("euler", [0.0, 0.0, 0.0]), f"{path}.euler")
    scale = _vec3(_need(obj, "scale", path), f"{path}.scale")
    if np.any(scale <= 0.0):
        _fail(f"{path}.scale", "scale axes must be positive")
    sigma = _num(_need(obj, "sigma", path), f"{path}.sigma")
    if sigma < 0.0:
        _fail(f"{path}.sigma", f"sigma must be >= 0, got {sigma}")
    albedo = _vec3(obj.get("albedo", [0.0, 0.0, 0.0]), f"{path}.albedo")
    if np.any(albedo < 0.0) or np.any(albedo > 1.0):
        _fail(f"{path}.albedo", "albedo channels must lie in [0, 1]")
    g = _num(obj.get("phase_g", 0.0), f"{path}.phase_g")
    if not -1.0 < g < 1.0:
        _fail(f"{path}.phase_g", f"phase_g must lie in (-1, 1), got {g}")
    if "sh" in obj:
        sh = _parse_sh(obj["sh"], f"{path}.sh")
    else:
        sh = np.zeros((3, 1))
    return Primitive(PrimitiveFrame(mean, euler, scale), kind=kind,
                     sigma=sigma, albedo=albedo, phase_g=g, sh_coeffs=sh)


_KINDS = {"gaussian": KernelKind.GAUSSIAN,
          "epanechnikov": KernelKind.EPANECHNIKOV}


def _parse_mixture(obj, path):
    _check_keys(obj, ("kind", "primitives"), path)
    kind_s = _need(obj, "kind", path)
    if kind_s not in _KINDS:
        near = difflib.get_close_matches(str(kind_s), _KINDS, n=1, cutoff=0.0)
        hint = f"; did you mean {near[0]!r}?" if near else ""
        _fail(f"{path}.kind", f"unknown kernel kind {kind_s!r}{hint}")
    prims = _need(obj, "primitives", path)
    if not isinstance(prims, list):
        _fail(f"{path}.primitives", "expected a list")
    kind = _KINDS[kind_s]
    return Mixture([_parse_primitive(p, kind, f"{path}.primitives[{i}]")
                    for i, p in enumerate(prims)])


_CAMERA_KEYS = {
    "perspective": ("type", "position", "target", "up", "vfov_deg",
                    "width", "height"),
    "telecentric": ("type", "position", "target", "up", "ortho_scale",
                    "width", "height", "aperture_radius", "focus_distance"),
    "equirect360": ("type", "position", "target", "up", "width", "height"),
}


def _parse_camera(obj, path):
    if not isinstance(obj, dict):
        _fail(path, "expected a camera object")
    ctype = _need(obj, "type", path)
    if ctype not in _CAMERA_KEYS:
        near = difflib.get_close_matches(str(ctype), _CAMERA_KEYS, n=1, cutoff=0.0)
        hint = f"; did you mean {near[0]!r}?" if near else ""
        _fail(f"{path}.type", f"unknown camera type {ctype!r}{hint}")
    _check_keys(obj, _CAMERA_KEYS[ctype], path)
    pose = Pose(_vec3(_need(obj, "position", path), f"{path}.position"),
                _vec3(_need(obj, "target", path), f"{path}.target"),
                _vec3(obj.get("up", [0.0, 1.0, 0.0]), f"{path}.up"))
    w = _integer(_need(obj, "width", path), f"{path}.width")
    h = _integer(_need(obj, "height", path), f"{path}.height")
    if ctype == "perspective":
        return Perspective(pose, _num(_need(obj, "vfov_deg", path),
                                      f"{path}.vfov_deg"), w, h)
    if ctype == "telecentric":
        return Telecentric(pose,
                           _num(_need(obj, "ortho_scale", path),
                                f"{path}.ortho_scale"), w, h,
                           _num(obj.get("aperture_radius", 0.0),
                                f"{path}.aperture_radius"),
                           _num(obj.get("focus_distance", 1.0),
                                f"{path}.focus_distance"))
    return Equirect360(pose, w, h)


_SETTINGS_KEYS = ("spp", "max_bounces", "max_events", "mode", "nee",
                  "rr_threshold", "rr_nee", "termination", "fast_vprf", "seed")
_MODES = {m.value: m for m in SamplingMode}


def _parse_settings(obj, path):
    _check_keys(obj, _SETTINGS_KEYS, path)
    kw = {}
    for key in ("spp", "max_bounces", "max_events", "seed"):
        if key in obj:
            kw[key] = _integer(obj[key], f"{path}.{key}")
    for key in ("rr_threshold", "termination"):
        if key in obj:
            kw[key] = _num(obj[key], f"{path}.{key}")
    for key in ("nee", "rr_nee", "fast_vprf"):
        if key in obj:
            if not isinstance(obj[key], bool):
                _fail(f"{path}.{key}", "expected true or false")
            kw[key] = obj[key]
    if "mode" in obj:
        if obj["mode"] not in _MODES:
            near = difflib.get_close_matches(str(obj["mode"]), _MODES,
                                             n=1, cutoff=0.0)
            hint = f"; did you mean {near[0]!r}?" if near else ""
            _fail(f"{path}.mode", f"unknown mode {obj['mode']!r}{hint}")
        kw["mode"] = _MODES[obj["mode"]]
    return RenderSettings(**kw)


def parse_scene(text: str) -> SceneFile:
    """Strict parse: schema violations carry the offending field path."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidParameterError(
            f"scene JSON syntax error at line {e.lineno}, "
            f"column {e.colno}: {e.msg}") from None
    _check_keys(obj, ("version", "mixture", "environment", "cameras",
                      "settings"), "scene")
    version = _integer(_need(obj, "version", "scene"), "scene.version")
    if version > SCENE_VERSION:
        raise InvalidParameterError(
            f"scene.version: file version {version} is newer than the "
            f"supported version {SCENE_VERSION}")
    if version < 1:
        _fail("scene.version", f"version must be >= 1, got {version}")
    mixture = _parse_mixture(_need(obj, "mixture", "scene"), "mixture")
    env = _vec3(_need(obj, "environment", "scene"), "environment")
    if np.any(env < 0.0):
        _fail("environment", "environment radiance must be >= 0")
    cams_obj = _need(obj, "cameras", "scene")
    if not isinstance(cams_obj, list) or not cams_obj:
        _fail("cameras", "expected a non-empty list of cameras")
    cameras = [_parse_camera(c, f"cameras[{i}]")
               for i, c in enumerate(cams_obj)]
    settings = _parse_settings(obj.get("settings", {}), "settings")
    return SceneFile(mixture, env, cameras, settings, version)


def _sh_record(p: Primitive):
    n = p.sh_coeffs.shape[1]
    return {"degree": degree_from_count(n),
            "coeffs": [[float(x) for x in row] for row in p.sh_coeffs]}


def serialize_scene(sf: SceneFile) -> str:
    prims = []
    for p in sf.mixture:
        rec = {"mean": [float(x) for x in p.frame.mean],
               "euler": [float(x) for x in p.frame.euler],
               "scale": [float(x) for x in p.frame.scale],
               "sigma": float(p.sigma),
               "albedo": [float(x) for x in p.albedo],
               "phase_g": float(p.phase_g),
               "sh": _sh_record(p)}
        prims.append(rec)
    kind_s = {v: k for k, v in _KINDS.items()}[sf.mixture.kind] \
        if len(sf.mixture) else "gaussian"
    cams = []
    for c in sf.cameras:
        rec = {"type": None,
               "position": [float(x) for x in c.pose.position],
               "target": [float(x) for x in c.pose.target],
               "up": [float(x) for x in c.pose.up],
               "width": c.width, "height": c.height}
        if isinstance(c, Perspective):
            rec["type"] = "perspective"
            rec["vfov_deg"] = float(c.vfov_deg)
        elif isinstance(c, Telecentric):
            rec["type"] = "telecentric"
            rec["ortho_scale"] = float(c.ortho_scale)
            rec["aperture_radius"] = float(c.aperture_radius)
            rec["focus_distance"] = float(c.focus_distance)
        elif isinstance(c, Equirect360):
            rec["type"] = "equirect360"
        else:
            raise InvalidParameterError(f"cannot serialize camera {type(c).__name__}")
        cams.append(rec)
    s = sf.settings
    obj = {
        "version": sf.version,
        "mixture": {"kind": kind_s, "primitives": prims},
        "environment": [float(x) for x in sf.environment],
        "cameras": cams,
        "settings": {"spp": s.spp, "max_bounces": s.max_bounces,
                     "max_events": s.max_events, "mode": s.mode.value,
                     "nee": s.nee, "rr_threshold": s.rr_threshold,
                     "rr_nee": s.rr_nee, "termination": s.termination,
                     "fast_vprf": s.fast_vprf, "seed": s.seed},
    }
    return json.dumps(obj, indent=2) + "\n"


def load_scene(path) -> SceneFile:
    with open(path, "r", encoding="utf-8") as f:
        return parse_scene(f.read())


def save_scene(sf: SceneFile, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_scene(sf))


# ---------------------------------------------------------------------------
# Images


def _check_image(image):
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidParameterError(f"image must be (h, w, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidParameterError("image must be finite")
    return img


def write_pfm(image, path):
    """Color PFM, little-endian float32, bottom-to-top row order."""
    img = _check_image(image)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"PF":
        raise InvalidParameterError(f"{path} is not a color PFM file")
    try:
        w, h = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError:
        raise InvalidParameterError(f"{path}: malformed PFM header") from None
    dt = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(parts[3][:w * h * 12], dtype=dt).reshape(h, w, 3)
    return np.ascontiguousarray(img[::-1]).astype(np.float32)


def write_png(image, path, exposure=1.0):
    """8-bit PNG after exposure multiply and 2.2 display gamma."""
    img = _check_image(image)
    encoded = np.clip(img * exposure, 0.0, 1.0) ** (1.0 / 2.2)
    data = (encoded * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Packed mixture (.vpm)

_VPM_MAGIC = b"VPM1"
_VPM_FLOATS = 26  # 3+3+3+1+3+1 parameters and 3x4 SH coefficients
_KIND_CODE = {KernelKind.GAUSSIAN: 0, KernelKind.EPANECHNIKOV: 1}


def write_vpm(mixture: Mixture, path):
    if len(mixture) == 0:
        raise InvalidParameterError("refusing to write an empty mixture")
    recs = np.zeros((len(mixture), _VPM_FLOATS), dtype="<f4")
    for i, p in enumerate(mixture):
        if p.sh_coeffs.shape[1] > 4:
            raise InvalidParameterError(
                "packed mixture records hold spherical harmonics up to "
                f"degree 1; primitive {i} carries {p.sh_coeffs.shape[1]} "
                "coefficients per channel")
        recs[i, 0:3] = p.frame.mean
        recs[i, 3:6] = p.frame.euler
        recs[i, 6:9] = p.frame.scale
        recs[i, 9] = p.sigma
        recs[i, 10:13] = p.albedo
        recs[i, 13] = p.phase_g
        sh_pad = np.zeros((3, 4), dtype="<f4")
        sh_pad[:, :p.sh_coeffs.shape[1]] = p.sh_coeffs
        recs[i, 14:26] = sh_pad.reshape(-1)
    header = _VPM_MAGIC + struct.pack("<III", len(mixture),
                                      _KIND_CODE[mixture.kind], 0)
    with open(path, "wb") as f:
        f.write(header)
        f.write(recs.tobytes())


def read_vpm(path) -> Mixture:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != _VPM_MAGIC:
        raise InvalidParameterError(f"{path} is not a packed mixture file")
    count, kind_code, _ = struct.unpack("<III", data[4:16])
    kinds = {v: k for k, v in _KIND_CODE.items()}
    if kind_code not in kinds:
        raise InvalidParameterError(f"{path}: unknown kernel code {kind_code}")
    want = 16 + count * _VPM_FLOATS * 4
    if len(data) < want:
        raise InvalidParameterError(
            f"{path}: truncated, expected {want} bytes for {count} records")
    recs = np.frombuffer(data[16:want], dtype="<f4").reshape(count, _VPM_FLOATS)
    prims = []
    for r in recs.astype(np.float64):
        sh = r[14:26].reshape(3, 4)
        if np.all(sh[:, 1:] == 0.0):
            sh = sh[:, :1]  # stored zero padding, not a real band limit
        prims.append(Primitive(
            PrimitiveFrame(r[0:3], r[3:6], r[6:9]), kind=kinds[kind_code],
            sigma=float(r[9]), albedo=r[10:13], phase_g=float(r[13]),
            sh_coeffs=sh))
    return Mixture(prims)


# ---------------------------------------------------------------------------
# Density grid (.vpg)

_VPG_MAGIC = b"VPG1"
_VPG_VERSION = 1


def write_vpg(grid: DensityGrid, path):
    nx, ny, nz = (int(x) for x in grid.res)
    header = _VPG_MAGIC + struct.pack("<IIIII", _VPG_VERSION, nx, ny, nz, 0)
    header += struct.pack("<6f", *grid.bbox_min.astype(np.float32),
                          *grid.bbox_max.astype(np.float32))
    assert len(header) == 48
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())


def read_vpg(path) -> DensityGrid:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 48 or data[:4] != _VPG_MAGIC:
        raise InvalidParameterError(f"{path} is not a density grid file")
    version, nx, ny, nz, _ = struct.unpack("<IIIII", data[4:24])
    if version > _VPG_VERSION:
        raise InvalidParameterError(
            f"{path}: grid version {version} is newer than supported "
            f"version {_VPG_VERSION}")
    bbox = struct.unpack("<6f", data[24:48])
    want = 48 + nx * ny * nz * 4
    if len(data) < want:
        raise InvalidParameterError(f"{path}: truncated voxel payload")
    vox = np.frombuffer(data[48:want], dtype="<f4").reshape(nx, ny, nz)
    return DensityGrid(vox, bbox[:3], bbox[3:])


# ---------------------------------------------------------------------------
# Metrics


_METRIC_COLUMNS = ("iteration", "loss", "psnr", "ssim", "n_primitives",
                   "wall_time_ms")


def write_metrics_csv(rows, path):
    """Fitting metrics table; iteration ids must be strictly increasing."""
    last = None
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(_METRIC_COLUMNS)
        for row in rows:
            it = row["iteration"]
            if last is not None and it <= last:
                raise InvalidParameterError(
                    f"iteration ids must increase, got {it} after {last}")
            last = it
            w.writerow([it, repr(float(row["loss"])),
                        repr(float(row["psnr"])), repr(float(row["ssim"])),
                        row["n_primitives"],
                        repr(float(row["wall_time"]) * 1000.0)])
