"""Bit-exact binary persistence, image export, and dataset caching.

File layout (little-endian only)::

    bytes 0..3    magic "HABA"
    bytes 4..7    format version, u32
    bytes 8..11   header length L, u32
    bytes 12..    header: UTF-8 JSON manifest, exactly L bytes
    bytes 12+L..  payload: raw '<f4' tensor bytes, in manifest order

The manifest lists every tensor as ``{name, shape, offset, nbytes}`` with
offsets relative to the payload start; offsets must be contiguous from 0 and
cover the payload exactly.  All tensors are stored as little-endian float32,
so a save -> load -> save cycle is byte-identical.  Integer sidecar data
(labels, counts, structure) lives in the manifest's ``meta`` object.

Writes are atomic (temp file + rename) so an interrupted run never leaves a
half-written checkpoint behind.
"""

import dataclasses
import hashlib
import json
import math
import os
import struct
import tempfile

import numpy as np
import torch

from .dataio import ImageDataset, ZCAStats, apply_zca, apply_zca_inverse, fit_zca, load_dataset
from .errors import FormatError, UsageError
from .factor import Basis, FactorizedDataset, Hallucinator, compose_pairs, basis_images
from .ddmatch import ExpertTrajectory
from .nets import ModelParams, ModelSpec

MAGIC = b"HABA"
VERSION = 1


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4")).tobytes()


def _collect(obj) -> tuple[str, list[tuple[str, torch.Tensor]], dict]:
    if isinstance(obj, FactorizedDataset):
        meta = {
            "labels": [b.label for b in obj.bases],
            "class_independent": obj.class_independent,
            "halls_per_class": obj.halls_per_class,
            "hall_count": len(obj.hallucinators),
            "basis_count": len(obj.bases),
            "hall_depth": obj.hallucinators[0].depth,
            "in_channels": obj.hallucinators[0].in_channels,
            "extra": obj.meta,
        }
        return "factorized_dataset", list(obj.synthetic_tensors()), meta
    if isinstance(obj, ExpertTrajectory):
        tensors = []
        for t, ckpt in enumerate(obj.checkpoints):
            tensors.extend((f"ckpt_{t}.{name}", tensor) for name, tensor in ckpt.items())
        meta = {
            "spec": dataclasses.asdict(obj.spec),
            "checkpoint_count": len(obj.checkpoints),
            "param_names": obj.checkpoints[0].names(),
            "interval": obj.interval,
            "seed": obj.seed,
            "beta": obj.beta,
        }
        return "expert_trajectory", tensors, meta
    if isinstance(obj, ModelParams):
        return "model_params", list(obj.items()), {"param_names": obj.names()}
    if isinstance(obj, ImageDataset):
        tensors = [("images", obj.images), ("labels", obj.labels.to(torch.float32))]
        return "image_dataset", tensors, {"class_count": obj.class_count,
                                          "split_tag": obj.split_tag}
    if isinstance(obj, ZCAStats):
        tensors = [("mean", obj.mean), ("whitening_matrix", obj.whitening_matrix)]
        return "zca_stats", tensors, {"epsilon": obj.epsilon}
    raise UsageError(f"cannot serialize object of type {type(obj).__name__}")


def serialize_bytes(obj) -> bytes:
    kind, tensors, meta = _collect(obj)
    entries, blobs, offset = [], [], 0
    for name, t in tensors:
        if t.numel() == 0:
            raise UsageError(f"tensor {name!r} is empty; refusing to serialize")
        raw = _tensor_bytes(t)
        entries.append({"name": name, "shape": list(t.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "tensors": entries, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header, *blobs])


def save_checkpoint(obj, path) -> None:
    """Serialize atomically: write a temp file in the same directory, then rename."""
    data = serialize_bytes(obj)
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_header(data: bytes) -> tuple[dict, int]:
    if len(data) < 12:
        raise FormatError(f"file is {len(data)} bytes; need at least a 12-byte header")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at byte 0 (expected {MAGIC!r})")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(
            f"unsupported version {version} at byte 4 "
            f"(file may be foreign-endian; this format is little-endian only)"
        )
    if 12 + header_len > len(data):
        raise FormatError(f"header of {header_len} bytes truncated at byte {len(data)}")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest at byte 12: {exc}") from exc
    return header, 12 + header_len


def _read_tensors(header: dict, data: bytes, payload_start: int) -> dict[str, torch.Tensor]:
    payload = data[payload_start:]
    expected = 0
    out = {}
    for entry in header["tensors"]:
        if entry["offset"] != expected:
            raise FormatError(
                f"manifest offsets not contiguous: {entry['name']!r} at {entry['offset']}, "
                f"expected {expected}"
            )
        nbytes = entry["nbytes"]
        count = int(math.prod(entry["shape"])) if entry["shape"] else 1
        if nbytes != 4 * count:
            raise FormatError(f"{entry['name']!r}: {nbytes} bytes for shape {entry['shape']}")
        end = entry["offset"] + nbytes
        if end > len(payload):
            raise FormatError(
                f"payload truncated at byte {payload_start + len(payload)}: "
                f"{entry['name']!r} needs bytes up to {payload_start + end}"
            )
        arr = np.frombuffer(payload[entry["offset"] : end], dtype="<f4").reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.copy())
        expected = end
    if expected != len(payload):
        raise FormatError(
            f"payload has {len(payload)} bytes but manifest covers {expected}"
        )
    return out


def _rebuild_model_params(names: list[str], tensors: dict, prefix: str = "") -> ModelParams:
    return ModelParams({name: tensors[prefix + name] for name in names})


def _rebuild_hallucinator(tensors: dict, prefix: str, depth: int, in_channels: int) -> Hallucinator:
    enc_w = [tensors[f"{prefix}enc_w{i}"] for i in range(depth)]
    enc_b = [tensors[f"{prefix}enc_b{i}"] for i in range(depth)]
    dec_w = [tensors[f"{prefix}dec_w{i}"] for i in range(depth)]
    dec_b = [tensors[f"{prefix}dec_b{i}"] for i in range(depth)]
    return Hallucinator(enc_w, enc_b, tensors[f"{prefix}sigma"], tensors[f"{prefix}mu"],
                        dec_w, dec_b, in_channels)


def loads_bytes(data: bytes):
    header, payload_start = _parse_header(data)
    tensors = _read_tensors(header, data, payload_start)
    kind, meta = header.get("kind"), header.get("meta", {})
    try:
        if kind == "factorized_dataset":
            halls = [
                _rebuild_hallucinator(tensors, f"hall_{j}.", meta["hall_depth"],
                                      meta["in_channels"])
                for j in range(meta["hall_count"])
            ]
            bases = [Basis(tensors[f"basis_{i}"], int(label))
                     for i, label in enumerate(meta["labels"])]
            extra = meta.get("extra", {})
            if "image_shape" in extra:
                extra["image_shape"] = tuple(extra["image_shape"])
            return FactorizedDataset(halls, bases, tensors["synth_lr_log"],
                                     class_independent=meta["class_independent"],
                                     halls_per_class=meta["halls_per_class"],
                                     meta=extra)
        if kind == "expert_trajectory":
            spec_dict = dict(meta["spec"])
            spec_dict["input_shape"] = tuple(spec_dict["input_shape"])
            spec = ModelSpec(**spec_dict)
            ckpts = [_rebuild_model_params(meta["param_names"], tensors, f"ckpt_{t}.")
                     for t in range(meta["checkpoint_count"])]
            return ExpertTrajectory(spec, ckpts, meta["interval"], meta["seed"], meta["beta"])
        if kind == "model_params":
            return _rebuild_model_params(meta["param_names"], tensors)
        if kind == "image_dataset":
            return ImageDataset(tensors["images"], tensors["labels"].to(torch.long),
                                meta["class_count"], meta["split_tag"])
        if kind == "zca_stats":
            return ZCAStats(tensors["mean"], tensors["whitening_matrix"], meta["epsilon"])
    except KeyError as exc:
        raise FormatError(f"manifest for kind {kind!r} is missing entry {exc}") from exc
    raise FormatError(f"unknown checkpoint kind {kind!r}")


def load_checkpoint(path):
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return loads_bytes(data)


def fd_fingerprint(fd: FactorizedDataset) -> str:
    """Content hash of the serialized artifact."""
    return hashlib.sha256(serialize_bytes(fd)).hexdigest()


# ---------------------------------------------------------------------------
# Image export

def _to_grid(images: torch.Tensor, class_count: int) -> np.ndarray:
    n, h, w, c = images.shape
    cols = class_count if class_count and n % class_count == 0 else math.ceil(math.sqrt(n))
    rows = -(-n // cols)
    canvas = np.ones((rows * (h + 2) + 2, cols * (w + 2) + 2, c), dtype=np.float32)
    for idx in range(n):
        r, col = divmod(idx, cols)
        top, left = 2 + r * (h + 2), 2 + col * (w + 2)
        canvas[top : top + h, left : left + w] = images[idx].numpy()
    return canvas


def export_images(fd: FactorizedDataset, out_dir, zca: ZCAStats | None) -> list[str]:
    """Write a bases grid plus one composed grid per hallucinator slot as PNGs.

    Pixels pass through the inverse whitening transform (when stats are
    given) and are clipped to [0, 1] only here, at the export boundary.
    """
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    base_ids = list(range(len(fd.bases)))
    stacks = {"bases": basis_images(fd, base_ids)}
    for slot in range(fd.slot_count):
        images, _ = compose_pairs(fd, [(i, slot) for i in base_ids])
        stacks[f"hall_{slot:02d}"] = images
    written = []
    for name, images in stacks.items():
        with torch.no_grad():
            flat = images.to(torch.float32)
            if zca is not None:
                flat = apply_zca_inverse(zca, flat)
            flat = flat.clamp(0.0, 1.0)
        grid = _to_grid(flat, fd.class_count)
        arr = (grid * 255).round().astype(np.uint8)
        img = Image.fromarray(arr[..., 0], mode="L") if arr.shape[-1] == 1 else \
            Image.fromarray(arr, mode="RGB")
        path = os.path.join(os.fspath(out_dir), f"{name}.png")
        img.save(path)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Whitened dataset cache

def cached_whitened(name: str, root: str, cache_dir, epsilon: float = 0.1):
    """Load train/test splits whitened with train-split statistics, cached on disk."""
    os.makedirs(cache_dir, exist_ok=True)
    paths = {
        "train": os.path.join(os.fspath(cache_dir), f"{name}_train_whitened.haba"),
        "test": os.path.join(os.fspath(cache_dir), f"{name}_test_whitened.haba"),
        "stats": os.path.join(os.fspath(cache_dir), f"{name}_zca_stats.haba"),
    }
    if all(os.path.exists(p) for p in paths.values()):
        return (load_checkpoint(paths["train"]), load_checkpoint(paths["test"]),
                load_checkpoint(paths["stats"]))
    train = load_dataset(name, root, "train")
    test = load_dataset(name, root, "test")
    stats = fit_zca(train, epsilon)
    train_w = ImageDataset(apply_zca(stats, train.images), train.labels,
                           train.class_count, "train")
    test_w = ImageDataset(apply_zca(stats, test.images), test.labels,
                          test.class_count, "test")
    save_checkpoint(train_w, paths["train"])
    save_checkpoint(test_w, paths["test"])
    save_checkpoint(stats, paths["stats"])
    return train_w, test_w, stats


def zca_fingerprint(stats: ZCAStats) -> str:
    return hashlib.sha256(serialize_bytes(stats)).hexdigest()
