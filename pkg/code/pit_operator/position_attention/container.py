"""
PITD binary container for datasets and checkpoints.

Layout, all integers little-endian:
    magic "PITD" | version u32 | array count u32
    per array: name length u16 | UTF-8 name | ndim u32 |
               dims u64 * ndim | dtype code u8 | raw values
Dtype code 1 is float64 little-endian. Text (configuration
echo, metadata) is stored as float64 arrays of UTF-8 bytes.
"""

import logging
import struct
from dataclasses import dataclass
from typing import BinaryIO, Dict

import numpy as np

from ._shared.errors import ContainerFormatError
from ._shared.types import PathLike
from .datasets import OperatorDataset
from .geometry import GRID, POINT_CLOUD, Mesh
from .model import PiTModel

logger = logging.getLogger(__name__)

MAGIC = b"PITD"
VERSION = 1
DTYPE_FLOAT64 = 1
_LE_FLOAT64 = np.dtype("<f8")

PARAM_PREFIX = "param."


def text_to_array(text: str) -> np.ndarray:
    """UTF-8 bytes of ``text`` as a float64 vector"""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_to_text(values: np.ndarray) -> str:
    """Inverse of ``text_to_array``"""
    codes = np.asarray(values).reshape(-1)
    if np.any((codes < 0) | (codes > 255) | (codes != np.round(codes))):
        raise ContainerFormatError("Text array holds values that are not byte codes")
    return codes.astype(np.uint8).tobytes().decode("utf-8")


def write_container(path: PathLike, arrays: Dict[str, np.ndarray]) -> None:
    """
    Writes named float64 arrays in insertion order.

    Parameters
    ----------
    path: PathLike
        Output file.

    arrays: Dict[str, np.ndarray]
        Arrays by name.
    """
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(struct.pack("<II", VERSION, len(arrays)))
        for name, value in arrays.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"Array name too long: {name[:40]}...")
            value = np.ascontiguousarray(value, dtype=_LE_FLOAT64)
            fp.write(struct.pack("<H", len(encoded)))
            fp.write(encoded)
            fp.write(struct.pack("<I", value.ndim))
            fp.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fp.write(struct.pack("<B", DTYPE_FLOAT64))
            fp.write(value.tobytes())


def _read_exact(fp: BinaryIO, size: int) -> bytes:
    data = fp.read(size)
    if len(data) != size:
        raise ContainerFormatError(f"Truncated container: expected {size} bytes, got {len(data)}")
    return data


def read_container(path: PathLike) -> Dict[str, np.ndarray]:
    """
    Reads every array of a PITD file.

    Raises
    ------
    ContainerFormatError
        On a bad magic, an unsupported version or dtype, or a
        truncated file.
    """
    arrays = {}
    with open(path, "rb") as fp:
        if _read_exact(fp, 4) != MAGIC:
            raise ContainerFormatError(f"{path} is not a PITD container")
        version, count = struct.unpack("<II", _read_exact(fp, 8))
        if version != VERSION:
            raise ContainerFormatError(f"Unsupported PITD version {version}")

        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fp, 2))
            name = _read_exact(fp, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fp, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fp, 8 * ndim))
            (dtype,) = struct.unpack("<B", _read_exact(fp, 1))
            if dtype != DTYPE_FLOAT64:
                raise ContainerFormatError(f"Array {name}: unknown dtype code {dtype}")
            size = int(np.prod(shape, dtype=np.int64)) * _LE_FLOAT64.itemsize
            values = np.frombuffer(_read_exact(fp, size), dtype=_LE_FLOAT64)
            arrays[name] = values.reshape(shape).astype(np.float64)

        if fp.read(1):
            raise ContainerFormatError(f"Trailing bytes after {count} arrays")
    return arrays


def _mesh_arrays(prefix: str, mesh: Mesh) -> Dict[str, np.ndarray]:
    shape = np.asarray(mesh.grid_shape if mesh.is_grid else (), dtype=np.float64)
    return {f"{prefix}.points": mesh.points, f"{prefix}.grid_shape": shape}


def _mesh_from_arrays(prefix: str, arrays: Dict[str, np.ndarray]) -> Mesh:
    try:
        points = arrays[f"{prefix}.points"]
        shape = arrays[f"{prefix}.grid_shape"]
    except KeyError as e:
        raise ContainerFormatError(f"Missing mesh array {e}") from e
    if shape.size:
        return Mesh(points=points, kind=GRID, grid_shape=tuple(int(s) for s in shape))
    return Mesh(points=points, kind=POINT_CLOUD)


def _metadata_text(metadata: Dict[str, str]) -> str:
    return "".join(f"{key} = {value}\n" for key, value in metadata.items())


def _metadata_from_text(text: str) -> Dict[str, str]:
    metadata = {}
    for line in text.splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            metadata[key.strip()] = value.strip()
    return metadata


def write_dataset(path: PathLike, ds: OperatorDataset) -> None:
    """Writes an operator dataset as a PITD container"""
    arrays = {}
    arrays.update(_mesh_arrays("input_mesh", ds.input_mesh))
    arrays.update(_mesh_arrays("output_mesh", ds.output_mesh))
    arrays["inputs"] = ds.inputs
    arrays["outputs"] = ds.outputs
    arrays["split.text"] = text_to_array(ds.split)
    arrays["metadata.text"] = text_to_array(_metadata_text(ds.metadata))
    write_container(path, arrays)
    logger.info(f"Wrote {len(ds)} samples to {path}")


def read_dataset(path: PathLike) -> OperatorDataset:
    """Reads an operator dataset written by ``write_dataset``"""
    arrays = read_container(path)
    try:
        return OperatorDataset(
            input_mesh=_mesh_from_arrays("input_mesh", arrays),
            output_mesh=_mesh_from_arrays("output_mesh", arrays),
            inputs=arrays["inputs"],
            outputs=arrays["outputs"],
            split=array_to_text(arrays["split.text"]),
            metadata=_metadata_from_text(array_to_text(arrays["metadata.text"])),
        )
    except KeyError as e:
        raise ContainerFormatError(f"{path} is not a dataset container, missing {e}") from e


@dataclass
class Checkpoint:
    """Contents of a model checkpoint"""

    config_text: str
    latent_mesh: Mesh
    state: Dict[str, np.ndarray]


def write_checkpoint(path: PathLike, model: PiTModel, config_text: str = "") -> None:
    """
    Writes the configuration echo, the latent mesh and every
    Param by canonical name.
    """
    arrays = {"config.text": text_to_array(config_text)}
    arrays.update(_mesh_arrays("latent_mesh", model.latent_mesh))
    for name, value in model.state_dict().items():
        arrays[PARAM_PREFIX + name] = value
    write_container(path, arrays)


def read_checkpoint(path: PathLike) -> Checkpoint:
    """Reads a checkpoint written by ``write_checkpoint``"""
    arrays = read_container(path)
    if "config.text" not in arrays:
        raise ContainerFormatError(f"{path} is not a checkpoint, missing config.text")
    state = {
        name[len(PARAM_PREFIX) :]: value
        for name, value in arrays.items()
        if name.startswith(PARAM_PREFIX)
    }
    return Checkpoint(
        config_text=array_to_text(arrays["config.text"]),
        latent_mesh=_mesh_from_arrays("latent_mesh", arrays),
        state=state,
    )
