"""Run configuration, image/map file formats, and metrics reports.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment.  Keys are the Hyperparams and FitConfig field names, except that
the loss weight is spelled ``lambda``.

Raw maps ("BSG1") are the lossless interchange format::

    magic   4 bytes  b"BSG1"
    width   u32 little-endian
    height  u32 little-endian
    values  width*height float32 little-endian, row-major

PNG is for inspection only: maps are min-max scaled to 16 bits and the
scale is written to a ``<name>.png.scale`` sidecar.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .grid import ImageGrid
from .model import Hyperparams, SceneSpec
from .pipeline import FitConfig
from .var_loss import LossBreakdown

RAW_MAGIC = b"BSG1"
_RAW_HEADER = struct.Struct("<4sII")


class ConfigError(ValueError):
    """Bad configuration: unknown key, malformed line, or violated constraint."""


class FormatError(ValueError):
    """An image or map file that does not follow its format."""


# --------------------------------------------------------------------------
# configuration

# config key -> (section, attribute)
_KEY_ALIASES = {"lambda": "lam"}


def _keys_for(cls) -> dict:
    out = {}
    for f in fields(cls):
        key = next((k for k, v in _KEY_ALIASES.items() if v == f.name), f.name)
        out[key] = f.name
    return out


HYPER_KEYS = _keys_for(Hyperparams)
FIT_KEYS = _keys_for(FitConfig)
CONFIG_KEYS = tuple(HYPER_KEYS) + tuple(FIT_KEYS)


@dataclass
class RunConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    fit: FitConfig = field(default_factory=FitConfig)

    def as_dict(self) -> dict:
        out = {key: getattr(self.hyper, attr) for key, attr in HYPER_KEYS.items()}
        out.update({key: getattr(self.fit, attr) for key, attr in FIT_KEYS.items()})
        return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: str, like, key: str):
    """Parse ``raw`` to the type of the default value ``like``."""
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def parse_assignments(text: str, source: str = "<config>") -> dict:
    """Split ``key = value`` lines into a dict of raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value or any(c.isspace() for c in key):
            raise ConfigError(f"{source}:{lineno}: malformed line {line.strip()!r}; "
                              "expected 'key = value'")
        out[key] = value
    return out


def build_config(assignments: dict) -> RunConfig:
    unknown = sorted(set(assignments) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    defaults = RunConfig()
    hyper_kw, fit_kw = {}, {}
    for key, raw in assignments.items():
        if key in HYPER_KEYS:
            attr = HYPER_KEYS[key]
            hyper_kw[attr] = _convert(str(raw), getattr(defaults.hyper, attr), key)
        else:
            attr = FIT_KEYS[key]
            fit_kw[attr] = _convert(str(raw), getattr(defaults.fit, attr), key)
    try:
        return RunConfig(Hyperparams(**hyper_kw), FitConfig(**fit_kw))
    except ValueError as exc:
        raise ConfigError(f"constraint violated: {exc}") from None


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides``; later wins."""
    merged = {}
    if path is not None:
        path = Path(path)
        merged.update(parse_assignments(path.read_text(), str(path)))
    for key, value in (overrides or {}).items():
        merged[key] = value if isinstance(value, str) else format_value(value)
    return build_config(merged)


def dump_config(cfg: RunConfig) -> str:
    lines = ["# hyperparameters"]
    lines += [f"{k} = {format_value(getattr(cfg.hyper, a))}" for k, a in HYPER_KEYS.items()]
    lines.append("# optimization")
    lines += [f"{k} = {format_value(getattr(cfg.fit, a))}" for k, a in FIT_KEYS.items()]
    return "\n".join(lines) + "\n"


def parse_scene_spec(text: str, source: str = "<scene>") -> SceneSpec:
    """Scene description in the same ``key = value`` syntax.

    ``levels`` is a comma-separated list of intensities, one per class.
    """
    raw = parse_assignments(text, source)
    known = {f.name: f for f in fields(SceneSpec)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown scene key(s): {', '.join(unknown)}")
    base = SceneSpec()
    kw = {}
    for key, value in raw.items():
        if key == "levels":
            try:
                kw[key] = tuple(float(v) for v in value.split(",") if v.strip())
            except ValueError:
                raise ConfigError(f"levels: cannot parse {value!r}") from None
        else:
            kw[key] = _convert(value, getattr(base, key), key)
    if "K" in kw and "levels" not in kw:
        kw["levels"] = ()
    try:
        return replace(base, **kw) if kw else base
    except ValueError as exc:
        raise ConfigError(f"constraint violated: {exc}") from None


# --------------------------------------------------------------------------
# raw maps


def raw_to_bytes(values) -> bytes:
    arr = values.data if isinstance(values, ImageGrid) else np.asarray(values)
    if arr.ndim != 2:
        raise ValueError("raw maps are 2-D")
    h, w = arr.shape
    return _RAW_HEADER.pack(RAW_MAGIC, w, h) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def raw_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _RAW_HEADER.size:
        raise FormatError("raw map truncated: header incomplete")
    magic, w, h = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RAW_MAGIC!r}")
    expected = _RAW_HEADER.size + 4 * w * h
    if len(data) != expected:
        raise FormatError(f"raw map has {len(data)} bytes, expected {expected} for {w}x{h}")
    return np.frombuffer(data, dtype="<f4", offset=_RAW_HEADER.size).reshape(h, w).copy()


def write_raw(path, values) -> None:
    Path(path).write_bytes(raw_to_bytes(values))


def read_raw(path) -> np.ndarray:
    return raw_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# PNG


def _load_png(path) -> tuple[np.ndarray, int]:
    """Return (integer pixels, bit depth) of a grayscale PNG."""
    with Image.open(path) as im:
        mode = im.mode
        if mode == "L":
            return np.asarray(im, dtype=np.int64), 8
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im).astype(np.int64)
            if arr.min() < 0 or arr.max() > 65535:
                raise FormatError(f"{path}: pixel values outside 16-bit range")
            return arr, 16
    raise FormatError(f"{path}: expected a grayscale PNG, got mode {mode}")


def read_image(path) -> ImageGrid:
    """Read a raw map verbatim, or a grayscale PNG scaled to [0, 1]."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == RAW_MAGIC:
        return ImageGrid(read_raw(path).astype(float))
    if path.suffix.lower() in (".bsg", ".raw"):
        raise FormatError(f"{path}: bad magic {head!r}, expected {RAW_MAGIC!r}")
    try:
        pixels, depth = _load_png(path)
    except OSError as exc:
        raise FormatError(f"{path}: not a PNG or raw map ({exc})") from None
    return ImageGrid(pixels / float(2 ** depth - 1))


def write_map(path, values, encoding: str = "raw") -> None:
    """Write a 2-D map as "raw" (lossless) or "png16" (min-max scaled)."""
    arr = values.data if isinstance(values, ImageGrid) else np.asarray(values, dtype=float)
    if encoding == "raw":
        write_raw(path, arr)
        return
    if encoding != "png16":
        raise ValueError(f"unknown encoding {encoding!r}")
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo
    scaled = np.zeros_like(arr) if span == 0 else (arr - lo) / span
    pixels = np.round(scaled * 65535).astype(np.uint16)
    Image.fromarray(pixels).save(path)
    Path(str(path) + ".scale").write_text(f"min = {lo!r}\nmax = {hi!r}\n")


def read_labels(path, K: int | None = None) -> np.ndarray:
    """8-bit PNG whose pixel values are class ids."""
    pixels, depth = _load_png(path)
    if depth != 8:
        raise FormatError(f"{path}: label images must be 8-bit")
    if K is not None and pixels.max() >= K:
        raise FormatError(f"{path}: class id {int(pixels.max())} out of range for K={K}")
    return pixels


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("class ids must lie in 0..255")
    Image.fromarray(labels.astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# metrics


def _sig9(v):
    if isinstance(v, float):
        return float(f"{v:.9g}") if math.isfinite(v) else str(v)
    if isinstance(v, dict):
        return {k: _sig9(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_sig9(x) for x in v]
    return v


def loss_summary(history: list[LossBreakdown]) -> dict:
    totals = [b.total for b in history]
    return {
        "sweeps": len(history),
        "initial_total": totals[0],
        "final_total": totals[-1],
        "min_total": min(totals),
        "final": history[-1].as_dict(),
    }


def metrics_json(payload: dict) -> str:
    """JSON text with every float rounded to 9 significant digits."""
    return json.dumps(_sig9(payload), indent=2, sort_keys=True) + "\n"
