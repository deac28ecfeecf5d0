"""File formats: EVF1 tensor files, PGM images, key=value config and manifests.

EVF1 layout (all little-endian)::

    b"EVF1" | u8 rank | rank x u32 dims | prod(dims) x f64 payload (row-major)

All writers go through :func:`atomic_write` (temporary file + rename).
"""

import os
import struct
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ContractViolation

MAGIC = b"EVF1"
HEAD_PARAMS = ("centers", "log_width", "w2")


class FormatError(ContractViolation):
    """A file did not match the expected format."""


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data if isinstance(data, bytes) else data.encode("utf-8"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# tensor files -----------------------------------------------------------------


def encode_tensor(arr):
    arr = np.asarray(arr, dtype="<f8", order="C")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf):
    if buf[:4] != MAGIC:
        raise FormatError("bad magic: not an EVF1 tensor file")
    if len(buf) < 5:
        raise FormatError("truncated header")
    rank = buf[4]
    end = 5 + 4 * rank
    if len(buf) < end:
        raise FormatError("truncated header")
    dims = struct.unpack(f"<{rank}I", buf[5:end])
    n = int(np.prod(dims)) if rank else 1
    if len(buf) - end != 8 * n:
        raise FormatError(f"payload is {len(buf) - end} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", offset=end).reshape(dims).astype(np.float64)


def write_tensor(path, arr):
    atomic_write(path, encode_tensor(arr))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())


# PGM --------------------------------------------------------------------------


def encode_pgm(img, maxval):
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError("PGM images are 2-d")
    if img.min() < 0 or img.max() > maxval:
        raise FormatError(f"pixel values outside [0, {maxval}]")
    H, W = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    return f"P5\n{W} {H}\n{maxval}\n".encode("ascii") + img.astype(dtype).tobytes()


def decode_pgm(buf):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("only binary PGM (P5) is supported")
    W, H, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(buf, dtype=dtype, count=W * H, offset=pos).reshape(H, W).astype(np.int64)


def write_pgm(path, img, maxval=255):
    atomic_write(path, encode_pgm(img, maxval))


def read_pgm(path):
    return decode_pgm(Path(path).read_bytes())


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def uncertainty_pgm(u):
    """Uncertainty plane in [0, 1] scaled by 255, rounded half-up."""
    return round_half_up(np.clip(u, 0.0, 1.0) * 255.0)


# key=value text ---------------------------------------------------------------


def format_kv(d):
    return "".join(f"{k}={_fmt(v)}\n" for k, v in d.items())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_kv(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def coerce(value, like):
    """Parse a config string into the type of ``like``."""
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


# config -----------------------------------------------------------------------


def config_defaults():
    """Every recognised config key with its default value."""
    from .fusion import EPS_CONFLICT
    from .pipeline import TrainConfig
    from .synth import SynthParams

    train = TrainConfig.toy()
    out = {f"train.{f.name}": getattr(train, f.name) for f in fields(train)}
    out["anneal.beta0"] = train.beta0
    out["fuse.eps_conflict"] = EPS_CONFLICT
    sp = SynthParams()
    for f in fields(sp):
        out[f"synth.{f.name}"] = getattr(sp, f.name)
    out.update({
        "data.n": 250, "data.n_test": 50, "data.size": 64, "data.negative_ratio": 0.25,
        "seed": 7,
    })
    return out


def load_config(path=None, overrides=None):
    """Resolve defaults < config file < explicit overrides; unknown keys are rejected."""
    cfg = config_defaults()
    items = {}
    if path is not None:
        items.update(parse_kv(Path(path).read_text()))
    items.update(overrides or {})
    for k, v in items.items():
        if k not in cfg:
            raise ContractViolation(f"unknown config key {k!r}")
        try:
            cfg[k] = coerce(v, cfg[k]) if isinstance(v, str) else v
        except ValueError as exc:
            raise ContractViolation(f"bad value for {k}: {exc}") from exc
    cfg["train.beta0"] = cfg["anneal.beta0"]
    return cfg


def train_config_from(cfg):
    from .pipeline import TrainConfig

    kw = {f.name: cfg[f"train.{f.name}"] for f in fields(TrainConfig)}
    kw["beta0"] = cfg["anneal.beta0"]
    return TrainConfig(**kw)


def synth_params_from(cfg):
    from .synth import SynthParams

    return SynthParams(**{f.name: cfg[f"synth.{f.name}"] for f in fields(SynthParams)})


# dataset layout ---------------------------------------------------------------

CT_RANGE = (-1.0, 1.0)


def _quantize(img, lo, hi):
    return round_half_up((np.asarray(img) - lo) / (hi - lo) * 65535.0)


def write_case(directory, case):
    """``ct.pgm``/``pet.pgm`` (16-bit), ``mask.pgm`` (8-bit) and ``meta.txt``."""
    d = Path(directory)
    pet_lo, pet_hi = float(case.pet.min()), float(case.pet.max())
    if pet_hi <= pet_lo:
        pet_hi = pet_lo + 1.0
    write_pgm(d / "ct.pgm", _quantize(case.ct, *CT_RANGE), 65535)
    write_pgm(d / "pet.pgm", _quantize(case.pet, pet_lo, pet_hi), 65535)
    write_pgm(d / "mask.pgm", case.mask.astype(np.int64), 1)
    meta = dict(case.meta)
    meta.update(ct_lo=CT_RANGE[0], ct_hi=CT_RANGE[1], pet_lo=pet_lo, pet_hi=pet_hi)
    atomic_write(d / "meta.txt", format_kv(meta))


def read_case(directory):
    from .synth import Case

    d = Path(directory)
    meta = parse_kv((d / "meta.txt").read_text())

    def restore(name, lo, hi):
        q = read_pgm(d / name).astype(np.float64)
        return lo + q / 65535.0 * (hi - lo)

    ct = restore("ct.pgm", float(meta["ct_lo"]), float(meta["ct_hi"]))
    pet = restore("pet.pgm", float(meta["pet_lo"]), float(meta["pet_hi"]))
    mask = read_pgm(d / "mask.pgm").astype(np.uint8)
    return Case(ct=ct, pet=pet, mask=mask, seed=int(meta.get("seed", 0)), meta=meta)


def case_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.txt").exists())


# checkpoints ------------------------------------------------------------------


def save_model(directory, model, extra=None):
    from .pipeline import BRANCHES

    d = Path(directory)
    for k in BRANCHES:
        for name, p in zip(HEAD_PARAMS, model.heads[k].params()):
            write_tensor(d / f"{k}.{name}.evf", p)
    for k, s in model.scalers.items():
        write_tensor(d / f"scaler.{k}.mean.evf", s.mean)
        write_tensor(d / f"scaler.{k}.std.evf", s.std)
    manifest = {f"train.{k}": v for k, v in model.config.as_dict().items()}
    manifest["epoch"] = len(model.history)
    manifest.update(extra or {})
    atomic_write(d / "manifest.txt", format_kv(manifest))
    lines = ["epoch,beta,loss"] + [
        f"{r['epoch']},{r['beta']:.10f},{r['loss']:.10f}" for r in model.history
    ]
    atomic_write(d / "loss.csv", "\n".join(lines) + "\n")


def load_model(directory):
    from .pipeline import BRANCHES, EvidenceHead, FeatureScaler, Model, TrainConfig

    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {d}")
    manifest = parse_kv((d / "manifest.txt").read_text())
    defaults = TrainConfig()
    kw = {
        f.name: coerce(manifest[f"train.{f.name}"], getattr(defaults, f.name))
        for f in fields(TrainConfig)
        if f"train.{f.name}" in manifest
    }
    heads = {
        k: EvidenceHead(*(read_tensor(d / f"{k}.{n}.evf") for n in HEAD_PARAMS))
        for k in BRANCHES
    }
    scalers = {
        k: FeatureScaler(read_tensor(d / f"scaler.{k}.mean.evf"), read_tensor(d / f"scaler.{k}.std.evf"))
        for k in ("ct", "pet")
    }
    return Model(heads, scalers, TrainConfig(**kw))


def save_weights(directory, weights):
    """Serialize a weight dataclass exposing ``as_dict`` as one EVF1 file per field."""
    d = Path(directory)
    for name, arr in weights.as_dict().items():
        write_tensor(d / f"{name}.evf", arr)


def load_weights(directory, cls):
    d = Path(directory)
    return cls.from_dict({f.name: read_tensor(d / f"{f.name}.evf") for f in fields(cls)})
