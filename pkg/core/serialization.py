#!/usr/bin/env python3
"""Serialization module for SoftSplat Sim

Dataset layout (one directory per sequence):

    manifest.json                      cameras, dt, frame count, actions, metadata, checksums
    frames/<t>/<cam>_rgb.png           16-bit RGB
    frames/<t>/<cam>_depth.f32 (+json) little-endian float32 depth, 0 = invalid
    frames/<t>/<cam>_objmask.png       8-bit, 0 or 255
    frames/<t>/<cam>_occmask.png       8-bit, 0 or 255
    arrays/<name>.f32 (+json)          initial splat state and table points

Checkpoint: 4-byte little-endian header length, JSON header, float32 weight blocks.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from config import DynamicsConfig, arch_hash, model_arch
from core.dynamics import TORCH_DTYPES, DynamicsParams
from core.errors import SerializationError, ValidationError
from core.types import CameraModel, RobotAction, SceneFrame, SceneSequence, SplatSetState

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DATASET_INDEX = "dataset.json"
FORMAT_VERSION = 1
BLOCK_DTYPES = {"float32": "<f4", "float64": "<f8"}
RGB_LEVELS = 65535
STATE_FIELDS = ("positions", "covariances", "masses", "attributes", "colors", "opacities", "velocities")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dump_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path: Path, data: Any) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_dump_json(data))
    except OSError as e:
        raise SerializationError(f"cannot write {path}: {e}")


def read_json(path: Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise SerializationError(f"missing file: {path}")
    except (OSError, json.JSONDecodeError) as e:
        raise SerializationError(f"cannot read {path}: {e}")


def write_array(path: Path, array: np.ndarray) -> str:
    """Raw little-endian float32 file plus a JSON sidecar; returns the data checksum."""
    path = Path(path)
    data = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    raw = data.tobytes()
    digest = _sha256(raw)
    header = {"shape": list(data.shape), "dtype": "float32", "byte_order": "little", "sha256": digest}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(raw)
    except OSError as e:
        raise SerializationError(f"cannot write {path}: {e}")
    write_json(path.with_suffix(path.suffix + ".json"), header)
    return digest


def read_array(path: Path) -> np.ndarray:
    path = Path(path)
    header = read_json(path.with_suffix(path.suffix + ".json"))
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise SerializationError(f"missing array file: {path}")
    except OSError as e:
        raise SerializationError(f"cannot read {path}: {e}")
    if header.get("dtype") != "float32" or header.get("byte_order") != "little":
        raise SerializationError(f"{path}: unsupported encoding {header.get('dtype')}/{header.get('byte_order')}")
    shape = tuple(int(s) for s in header["shape"])
    if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
        raise SerializationError(f"{path}: {len(raw)} bytes do not match shape {shape}")
    if _sha256(raw) != header.get("sha256"):
        raise SerializationError(f"{path}: checksum mismatch")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _encode_png(image: np.ndarray, path: Path) -> bytes:
    ok, buf = cv2.imencode(".png", image)
    if not ok:
        raise SerializationError(f"cannot encode {path}")
    return buf.tobytes()


def _write_png(path: Path, image: np.ndarray, checksums: Dict[str, str], root: Path) -> None:
    data = _encode_png(image, path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise SerializationError(f"cannot write {path}: {e}")
    checksums[path.relative_to(root).as_posix()] = _sha256(data)


def _read_png(path: Path, checksums: Dict[str, str], root: Path) -> np.ndarray:
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise SerializationError(f"missing image: {path}")
    expected = checksums.get(path.relative_to(root).as_posix())
    if expected is not None and _sha256(data) != expected:
        raise SerializationError(f"{path}: checksum mismatch")
    image = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise SerializationError(f"{path}: not a readable PNG")
    return image


def rgb_to_png(rgb: np.ndarray) -> np.ndarray:
    """[0, 1] RGB float to 16-bit BGR codes."""
    codes = np.round(np.clip(rgb, 0.0, 1.0) * RGB_LEVELS).astype(np.uint16)
    return np.ascontiguousarray(codes[:, :, ::-1])


def png_to_rgb(image: np.ndarray) -> np.ndarray:
    if image.dtype != np.uint16 or image.ndim != 3 or image.shape[2] != 3:
        raise SerializationError(f"expected a 16-bit 3-channel image, got {image.dtype} {image.shape}")
    return (image[:, :, ::-1].astype(np.float32) / np.float32(RGB_LEVELS)).astype(np.float32)


def _mask_to_png(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8)


def _png_to_mask(image: np.ndarray, path: Path) -> np.ndarray:
    if image.ndim != 2:
        raise SerializationError(f"{path}: mask must be single-channel")
    if not np.all((image == 0) | (image == 255)):
        raise SerializationError(f"{path}: mask is not binary")
    return (image // 255).astype(np.uint8)


def _frame_paths(root: Path, t: int, cam: str) -> Dict[str, Path]:
    folder = root / "frames" / str(t)
    return {
        "rgb": folder / f"{cam}_rgb.png",
        "depth": folder / f"{cam}_depth.f32",
        "objmask": folder / f"{cam}_objmask.png",
        "occmask": folder / f"{cam}_occmask.png",
    }


def _check_frame(seq: SceneSequence, frame: SceneFrame) -> None:
    for cam in seq.cameras:
        hw = (cam.height, cam.width)
        for label, store in (("rgb", frame.rgb), ("depth", frame.depth), ("object mask", frame.object_mask),
                             ("occluder mask", frame.occluder_mask)):
            if cam.name not in store:
                raise ValidationError(f"frame {frame.index}: no {label} for camera {cam.name}")
            if store[cam.name].shape[:2] != hw:
                raise ValidationError(
                    f"frame {frame.index} camera {cam.name}: {label} shape {store[cam.name].shape} != {hw}")


def save_sequence(seq: SceneSequence, directory: Path) -> None:
    """Write a sequence; identical sequences produce identical bytes."""
    root = Path(directory)
    for frame in seq.frames:
        _check_frame(seq, frame)
    checksums: Dict[str, str] = {}
    frames_meta = []
    for frame in seq.frames:
        for cam in seq.cameras:
            paths = _frame_paths(root, frame.index, cam.name)
            rgb = frame.rgb[cam.name]
            codes = rgb_to_png(rgb)
            if not np.array_equal(png_to_rgb(codes), rgb):
                logger.debug(f"frame {frame.index} camera {cam.name}: rgb quantized to 16 bits on save")
            _write_png(paths["rgb"], codes, checksums, root)
            checksums[paths["depth"].relative_to(root).as_posix()] = write_array(paths["depth"], frame.depth[cam.name])
            _write_png(paths["objmask"], _mask_to_png(frame.object_mask[cam.name]), checksums, root)
            _write_png(paths["occmask"], _mask_to_png(frame.occluder_mask[cam.name]), checksums, root)
        frames_meta.append({
            "index": frame.index,
            "action": frame.action.to_record(),
            "camera_poses": {k: v.tolist() for k, v in sorted(frame.camera_poses.items())},
        })

    state = seq.initial_state
    arrays = {}
    for name in STATE_FIELDS:
        value = getattr(state, name).detach().cpu().double().numpy()
        arrays[f"initial_{name}"] = write_array(root / "arrays" / f"initial_{name}.f32", value)
    arrays["table_points"] = write_array(root / "arrays" / "table_points.f32", seq.table_points)

    manifest = {
        "format_version": FORMAT_VERSION,
        "name": seq.name,
        "dt": seq.dt,
        "frame_count": seq.num_frames,
        "cameras": [cam.to_record() for cam in seq.cameras],
        "frames": frames_meta,
        "initial_t": int(state.t),
        "arrays": arrays,
        "checksums": checksums,
        "metadata": seq.metadata,
    }
    write_json(root / MANIFEST, manifest)
    logger.debug(f"Saved sequence {seq.name} ({seq.num_frames} frames, {len(seq.cameras)} cameras) to {root}")


def load_sequence(directory: Path) -> SceneSequence:
    root = Path(directory)
    if not (root / MANIFEST).exists():
        raise SerializationError(f"no {MANIFEST} in {root}")
    manifest = read_json(root / MANIFEST)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SerializationError(f"{root}: unsupported format version {manifest.get('format_version')}")
    try:
        cameras = [CameraModel.from_record(r) for r in manifest["cameras"]]
        checksums = manifest["checksums"]
        frames_meta = manifest["frames"]
        if len(frames_meta) != manifest["frame_count"]:
            raise SerializationError(f"{root}: manifest lists {len(frames_meta)} frames, "
                                     f"expected {manifest['frame_count']}")
    except KeyError as e:
        raise SerializationError(f"{root}: manifest is missing field {e}")

    frames = []
    for meta in frames_meta:
        t = int(meta["index"])
        rgb, depth, obj, occ = {}, {}, {}, {}
        for cam in cameras:
            paths = _frame_paths(root, t, cam.name)
            rgb[cam.name] = png_to_rgb(_read_png(paths["rgb"], checksums, root))
            depth[cam.name] = read_array(paths["depth"])
            obj[cam.name] = _png_to_mask(_read_png(paths["objmask"], checksums, root), paths["objmask"])
            occ[cam.name] = _png_to_mask(_read_png(paths["occmask"], checksums, root), paths["occmask"])
        poses = {k: np.asarray(v, dtype=np.float64) for k, v in meta.get("camera_poses", {}).items()}
        frames.append(SceneFrame(t, rgb, depth, obj, occ, RobotAction.from_record(meta["action"]), poses))

    values = {}
    for name in STATE_FIELDS:
        values[name] = torch.as_tensor(read_array(root / "arrays" / f"initial_{name}.f32").astype(np.float64))
    initial = SplatSetState(t=int(manifest.get("initial_t", 0)), **values)
    table = read_array(root / "arrays" / "table_points.f32").astype(np.float64)
    return SceneSequence(manifest["name"], cameras, frames, float(manifest["dt"]), initial, table,
                         manifest.get("metadata", {}))


def load_manifest(directory: Path) -> Dict[str, Any]:
    """Manifest only (actions, cameras, metadata) without decoding any image."""
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise SerializationError(f"no {MANIFEST} in {directory}")
    return read_json(path)


def save_dataset_index(root: Path, names: Sequence[str], split: Dict[str, List[str]],
                       info: Optional[Dict[str, Any]] = None) -> None:
    write_json(Path(root) / DATASET_INDEX, {"sequences": list(names), "split": split, "info": info or {}})


def load_dataset_index(root: Path) -> Dict[str, Any]:
    root = Path(root)
    if (root / DATASET_INDEX).exists():
        index = read_json(root / DATASET_INDEX)
        for key in ("sequences", "split"):
            if key not in index:
                raise SerializationError(f"{root / DATASET_INDEX} is missing '{key}'")
        return index
    if (root / MANIFEST).exists():
        # a single sequence directory counts as a one-sequence training set
        return {"sequences": ["."], "split": {"train": ["."], "test": []}, "info": {}}
    raise SerializationError(f"{root} holds neither {DATASET_INDEX} nor {MANIFEST}")


def dataset_sequences(root: Path, split: Optional[str] = None) -> List[Path]:
    """Sequence directories of a dataset, optionally restricted to one split."""
    root = Path(root)
    index = load_dataset_index(root)
    names = index["sequences"] if split is None else index["split"].get(split, [])
    return [(root / name).resolve() if name != "." else root.resolve() for name in names]


def _model_dtype(params: DynamicsParams) -> str:
    return str(params.dtype).replace("torch.", "")


def _state_blocks(params: DynamicsParams) -> List[Tuple[str, np.ndarray]]:
    """Weights in the model's own precision, little-endian."""
    layout = BLOCK_DTYPES[_model_dtype(params)]
    return [(name, tensor.detach().cpu().numpy().astype(layout))
            for name, tensor in params.state_dict().items()]


def save_checkpoint(params: DynamicsParams, path: Path,
                    hierarchies: Optional[Dict[str, Sequence[np.ndarray]]] = None,
                    extra: Optional[Dict[str, Any]] = None) -> None:
    """Header (architecture, config hash, block table, parent maps) plus weights in the model dtype."""
    path = Path(path)
    blocks, payload, offset = [], [], 0
    for name, values in _state_blocks(params):
        raw = np.ascontiguousarray(values).tobytes()
        blocks.append({"name": name, "shape": list(values.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    body = b"".join(payload)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": {k: int(v) for k, v in params.arch.items()},
        "config_hash": arch_hash(params.arch),
        "model_dtype": _model_dtype(params),
        "blocks": blocks,
        "sha256": _sha256(body),
        "hierarchies": {name: [np.asarray(p, dtype=np.int64).tolist() for p in parents]
                        for name, parents in sorted((hierarchies or {}).items())},
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(struct.pack("<I", len(head)) + head + body)
    except OSError as e:
        raise SerializationError(f"cannot write checkpoint {path}: {e}")
    logger.debug(f"Saved checkpoint {path} ({len(blocks)} blocks, {len(body)} weight bytes)")


def _read_checkpoint(path: Path) -> Tuple[Dict[str, Any], bytes]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise SerializationError(f"checkpoint not found: {path}")
    except OSError as e:
        raise SerializationError(f"cannot read checkpoint {path}: {e}")
    if len(data) < 4:
        raise SerializationError(f"checkpoint {path} is truncated")
    (length,) = struct.unpack("<I", data[:4])
    if 4 + length > len(data):
        raise SerializationError(f"checkpoint {path}: header length {length} exceeds file size")
    try:
        header = json.loads(data[4:4 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SerializationError(f"checkpoint {path}: corrupt header ({e})")
    body = data[4 + length:]
    if header.get("format_version") != FORMAT_VERSION:
        raise SerializationError(f"checkpoint {path}: unsupported format version {header.get('format_version')}")
    if _sha256(body) != header.get("sha256"):
        raise SerializationError(f"checkpoint {path}: weight checksum mismatch")
    return header, body


def checkpoint_header(path: Path) -> Dict[str, Any]:
    return _read_checkpoint(path)[0]


def checkpoint_hierarchy_parents(path: Path, sequence: str) -> Optional[List[np.ndarray]]:
    """Stored parent maps for one training sequence, or None when it was not recorded."""
    parents = checkpoint_header(path).get("hierarchies", {}).get(sequence)
    if parents is None:
        return None
    return [np.asarray(p, dtype=np.int64) for p in parents]


def load_checkpoint(path: Path, expected: Optional[DynamicsConfig] = None) -> DynamicsParams:
    """Rebuild the parameters; with ``expected`` every architecture dimension must match."""
    header, body = _read_checkpoint(path)
    arch = header.get("arch", {})
    try:
        params = DynamicsParams(arch["embed_dim"], arch["num_layers"], arch["knn"], arch["attr_dim"],
                                arch["num_levels"])
    except KeyError as e:
        raise SerializationError(f"checkpoint {path}: architecture is missing {e}")
    if header.get("config_hash") != arch_hash(arch):
        raise SerializationError(f"checkpoint {path}: config hash does not match its architecture")
    if expected is not None:
        wanted = model_arch(expected)
        for key, value in wanted.items():
            if int(arch.get(key, -1)) != int(value):
                raise SerializationError(
                    f"checkpoint {path}: {key}={arch.get(key)} but the config expects {value}")

    stored = header.get("model_dtype", "float32")
    if stored not in BLOCK_DTYPES:
        raise SerializationError(f"checkpoint {path}: unknown dtype '{stored}'")
    layout = np.dtype(BLOCK_DTYPES[stored])
    params = params.to(TORCH_DTYPES[stored])

    state = {}
    reference = params.state_dict()
    for block in header["blocks"]:
        name = block["name"]
        if name not in reference:
            raise SerializationError(f"checkpoint {path}: unexpected block '{name}'")
        shape = tuple(block["shape"])
        if shape != tuple(reference[name].shape):
            raise SerializationError(f"checkpoint {path}: block '{name}' has shape {shape}, "
                                     f"model expects {tuple(reference[name].shape)}")
        start, nbytes = int(block["offset"]), int(block["nbytes"])
        if start + nbytes > len(body) or nbytes != layout.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise SerializationError(f"checkpoint {path}: block '{name}' is out of bounds")
        values = np.frombuffer(body[start:start + nbytes], dtype=layout).reshape(shape)
        state[name] = torch.from_numpy(values.astype(layout.newbyteorder("=")))
    missing = set(reference) - set(state)
    if missing:
        raise SerializationError(f"checkpoint {path}: missing blocks {sorted(missing)}")
    params.load_state_dict(state)
    dtype = expected.dtype if expected is not None else stored
    return params.to(TORCH_DTYPES[dtype])
