"""Binary and text file formats.

All multi-byte values are little-endian.

Tensor container (checkpoints, attention dumps):
    magic  b"QTFM"
    u32    format version (currently 1)
    u32    tensor count
    per tensor:
        u32    name byte length, then UTF-8 name
        u8     dtype tag: 0 = float32, 1 = quantized codes
        u32    rank, then u32 per dimension
        tag 0: float32 payload, row-major
        tag 1: one code byte per element, then f64 range start ``a``,
               f64 step ``delta``, u32 bit width ``k``
    u32    metadata byte length, then UTF-8 JSON metadata
    (end of file; trailing bytes are an error)

Feature file (one utterance of input frames):
    magic  b"QFBK"
    u32    frame count, u32 feature dim
    float32 payload, row-major

Metrics/report records: UTF-8 text, one record per line, no timestamps.
Each line is the record type followed by tab-separated key/value pairs;
floats are rendered with ``repr`` so round trips are bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import Utterance
from .errors import ContractError, FormatError
from .model import ModelConfig
from .quant import QuantParams, QuantizedTensor

CONTAINER_MAGIC = b"QTFM"
FEATURE_MAGIC = b"QFBK"
CONTAINER_VERSION = 1
_TAG_F32 = 0
_TAG_Q8 = 1


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated file while reading {what}: expected {n} bytes, got {len(data)}",
            offset=f.tell())
    return data


def _read_u32(f, what: str) -> int:
    return struct.unpack("<I", _read_exact(f, 4, what))[0]


def _write_u32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


# -- tensor container -------------------------------------------------------------


def write_container(path, tensors: dict, metadata: dict) -> None:
    """Serialize named float32 arrays and/or quantized tensors plus JSON metadata."""
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    _write_u32(buf, CONTAINER_VERSION)
    _write_u32(buf, len(tensors))
    for name in sorted(tensors):
        t = tensors[name]
        encoded = name.encode("utf-8")
        _write_u32(buf, len(encoded))
        buf.write(encoded)
        if isinstance(t, QuantizedTensor):
            if t.params.k > 8:
                raise ContractError(f"container stores one byte per code; {name} has k={t.params.k}")
            buf.write(struct.pack("<B", _TAG_Q8))
            _write_u32(buf, t.codes.ndim)
            for d in t.codes.shape:
                _write_u32(buf, d)
            buf.write(np.ascontiguousarray(t.codes, dtype=np.uint8).tobytes())
            buf.write(struct.pack("<d", t.params.a))
            buf.write(struct.pack("<d", t.params.delta))
            _write_u32(buf, t.params.k)
        else:
            arr = np.asarray(t)
            if arr.dtype != np.float32:
                raise ContractError(f"container float tensors must be float32, got {arr.dtype} for {name}")
            buf.write(struct.pack("<B", _TAG_F32))
            _write_u32(buf, arr.ndim)
            for d in arr.shape:
                _write_u32(buf, d)
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    _write_u32(buf, len(meta))
    buf.write(meta)
    Path(path).write_bytes(buf.getvalue())


def read_container(path) -> tuple[dict, dict]:
    """Inverse of ``write_container``; bit-exact for payloads and quantizers."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CONTAINER_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CONTAINER_MAGIC!r}", offset=0)
        version = _read_u32(f, "version")
        if version != CONTAINER_VERSION:
            raise FormatError(f"unsupported container version {version}", offset=4)
        count = _read_u32(f, "tensor count")
        tensors: dict = {}
        for _ in range(count):
            name_len = _read_u32(f, "name length")
            raw = _read_exact(f, name_len, "tensor name")
            try:
                name = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise FormatError("tensor name is not valid UTF-8",
                                  offset=f.tell() - name_len) from e
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}", offset=f.tell())
            tag = _read_exact(f, 1, "dtype tag")[0]
            rank = _read_u32(f, "rank")
            if rank > 8:
                raise FormatError(f"implausible rank {rank} for {name!r}",
                                  offset=f.tell() - 4)
            shape = tuple(_read_u32(f, "dimension") for _ in range(rank))
            n = 1
            for d in shape:
                n *= d
            if tag == _TAG_F32:
                payload = _read_exact(f, 4 * n, f"float payload of {name!r}")
                tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            elif tag == _TAG_Q8:
                codes = np.frombuffer(_read_exact(f, n, f"codes of {name!r}"),
                                      dtype=np.uint8).reshape(shape).copy()
                a = struct.unpack("<d", _read_exact(f, 8, "range start"))[0]
                delta = struct.unpack("<d", _read_exact(f, 8, "step size"))[0]
                k = _read_u32(f, "bit width")
                tensors[name] = QuantizedTensor(codes, QuantParams.from_step(a, delta, k))
            else:
                raise FormatError(
                    f"unknown dtype tag {tag} for {name!r}; this reader supports "
                    f"format version {CONTAINER_VERSION} tags 0 (float32) and 1 (codes) — "
                    f"the file may come from a newer version",
                    offset=f.tell() - 1 - 4 * (rank + 1))
        meta_len = _read_u32(f, "metadata length")
        raw_meta = _read_exact(f, meta_len, "metadata")
        try:
            metadata = json.loads(raw_meta.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError("metadata is not valid JSON",
                              offset=f.tell() - meta_len) from e
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after metadata", offset=f.tell() - 1)
    return tensors, metadata


# -- checkpoints --------------------------------------------------------------------


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: dict = {}
    tensors.update(ckpt.params)
    tensors.update(ckpt.qparams)
    metadata = {
        "kind": "checkpoint",
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "constituents": list(ckpt.constituents),
        "calibrated": ckpt.calibrated,
        "act_ranges": {site: [lo, hi] for site, (lo, hi) in sorted(ckpt.act_ranges.items())},
    }
    write_container(path, tensors, metadata)


def read_checkpoint(path) -> Checkpoint:
    tensors, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"container holds {meta.get('kind')!r}, not a checkpoint")
    try:
        config = ModelConfig.from_dict(meta["config"])
        ckpt = Checkpoint(
            config=config,
            step=int(meta["step"]),
            params={n: t for n, t in tensors.items() if isinstance(t, np.ndarray)},
            qparams={n: t for n, t in tensors.items() if isinstance(t, QuantizedTensor)},
            act_ranges={site: (float(lo), float(hi))
                        for site, (lo, hi) in meta["act_ranges"].items()},
            calibrated=bool(meta["calibrated"]),
            constituents=[int(s) for s in meta["constituents"]],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"checkpoint metadata is malformed: {e}") from e
    return ckpt


# -- feature files --------------------------------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ContractError(f"features must be 2D (frames, dim), got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        _write_u32(f, arr.shape[0])
        _write_u32(f, arr.shape[1])
        f.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", offset=0)
        frames = _read_u32(f, "frame count")
        dim = _read_u32(f, "feature dim")
        payload = _read_exact(f, 4 * frames * dim, "feature payload")
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after feature payload", offset=f.tell() - 1)
    return np.frombuffer(payload, dtype="<f4").reshape(frames, dim).copy()


# -- record text files ------------------------------------------------------------------


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse_value(s: str):
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_records(path, records: list[dict]) -> None:
    """One line per record: the type token, then tab-separated key/value pairs."""
    lines = []
    for rec in records:
        if "type" not in rec:
            raise ContractError("record needs a 'type' field")
        parts = [str(rec["type"])]
        for key, value in rec.items():
            if key == "type":
                continue
            rendered = _render_value(value)
            if "\t" in key or "\n" in key or "\t" in rendered or "\n" in rendered:
                raise ContractError(f"record field {key!r} contains a separator")
            parts.append(key)
            parts.append(rendered)
        lines.append("\t".join(parts))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_records(path) -> list[dict]:
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) % 2 != 1:
            raise FormatError(f"line {line_no}: key without value")
        rec = {"type": parts[0]}
        for i in range(1, len(parts), 2):
            rec[parts[i]] = _parse_value(parts[i + 1])
        records.append(rec)
    return records


# -- datasets -------------------------------------------------------------------------


def save_dataset(directory, utterances: list[Utterance]) -> None:
    """One feature file per utterance plus a transcript record file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for i, u in enumerate(utterances):
        name = f"utt{i:05d}"
        write_features(d / f"{name}.qfb", u.features)
        records.append({"type": "utterance", "id": name,
                        "tokens": " ".join(str(int(t)) for t in u.tokens),
                        "repeated": bool(u.repeated_ngram)})
    write_records(d / "transcripts.txt", records)


def load_dataset(directory) -> list[Utterance]:
    d = Path(directory)
    out = []
    for rec in read_records(d / "transcripts.txt"):
        if rec["type"] != "utterance":
            raise FormatError(f"unexpected record type {rec['type']!r} in transcripts")
        tokens = np.array([int(t) for t in str(rec["tokens"]).split()], dtype=np.int64)
        feats = read_features(d / f"{rec['id']}.qfb").astype(np.float64)
        out.append(Utterance(feats, tokens, bool(rec["repeated"])))
    return out
