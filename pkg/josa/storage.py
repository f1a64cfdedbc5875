"""JOSA tensor containers and run directories.

Container layout, little-endian throughout::

    magic "JOSA" | u16 version | u32 tensor count
    per tensor: u8 dtype (1 = f32) | u8 rank | u32 dims[rank]
                | u16 name length | utf-8 name | f32 payload
"""

import csv
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from datetime import date, datetime
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .deform import VelocityField
from .model import Atlas, SubjectRecord
from .sphere_grid import make_grid
from .synth import Cohort, GroundTruth

logger = logging.getLogger("josa.storage")

MAGIC = b"JOSA"
VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sHI")
_TENSOR = struct.Struct("<BB")
_NAME_LENGTH = struct.Struct("<H")


class ContainerError(ValueError):
    pass


class CorruptContainerError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class PathMissingError(FileNotFoundError):
    pass


def require_path(path: str, what: str = "path") -> str:
    if not os.path.exists(path):
        raise PathMissingError(f"{what} does not exist: {path}")
    return path


def write_container(path: str, tensors: Mapping[str, np.ndarray]):
    """Write named arrays as float32. Non-finite values are rejected."""
    chunks = [_HEADER.pack(MAGIC, VERSION, len(tensors))]
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"Tensor {name} contains non-finite values")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or data.ndim > 0xFF:
            raise ValueError(f"Tensor {name} cannot be stored")
        chunks.append(_TENSOR.pack(DTYPE_F32, data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(_NAME_LENGTH.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(data.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, buffer: bytes, path: str):
        self.buffer = buffer
        self.path = path
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.buffer) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise TruncatedPayloadError(
                f"{self.path}: needed {n} bytes at offset {self.offset}, "
                f"{self.remaining} left"
            )
        out = self.buffer[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt) -> Tuple:
        fmt = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return fmt.unpack(self.take(fmt.size))


def read_container(path: str, names: Optional[List[str]] = None) -> Dict[str, np.ndarray]:
    """Read a container. With ``names``, only those tensors are decoded."""
    require_path(path, "container")
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)

    if reader.remaining < 4 or reader.buffer[:4] != MAGIC:
        raise CorruptContainerError(f"{path}: not a JOSA container")
    _, version, count = reader.unpack(_HEADER)
    if version != VERSION:
        raise UnsupportedVersionError(
            f"{path}: container version {version}, this reader supports {VERSION}"
        )

    tensors = {}
    for _ in range(count):
        dtype, rank = reader.unpack(_TENSOR)
        if dtype != DTYPE_F32:
            raise CorruptContainerError(f"{path}: unknown dtype tag {dtype}")
        dims = reader.unpack(f"<{rank}I")
        (length,) = reader.unpack(_NAME_LENGTH)
        try:
            name = reader.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptContainerError(f"{path}: tensor name is not utf-8") from e
        payload = reader.take(4 * int(np.prod(dims, dtype=np.int64)))
        if names is None or name in names:
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(float)
    if reader.remaining:
        raise CorruptContainerError(
            f"{path}: {reader.remaining} trailing bytes not described by the header"
        )
    if names is not None:
        missing = set(names) - set(tensors)
        if missing:
            raise CorruptContainerError(f"{path}: missing tensors {sorted(missing)}")
    return tensors


def _grid_of(image: np.ndarray):
    return make_grid(image.shape[0], image.shape[1])


def save_atlas(path: str, atlas: Atlas):
    write_container(path, {"geom": atlas.geom, "func": atlas.func})


def load_atlas(path: str) -> Atlas:
    tensors = read_container(path, ["geom", "func"])
    return Atlas(tensors["geom"], tensors["func"], _grid_of(tensors["geom"]))


def save_subject(path: str, record: SubjectRecord):
    tensors = {"geom": record.geom}
    if record.has_func:
        tensors["func"] = record.func
    write_container(path, tensors)


def load_subject(path: str, subject_id: str, geom_only: bool = False) -> SubjectRecord:
    tensors = read_container(path, ["geom"] if geom_only else None)
    if "geom" not in tensors:
        raise CorruptContainerError(f"{path}: subject has no geometric features")
    return SubjectRecord(
        subject_id, tensors["geom"], _grid_of(tensors["geom"]), tensors.get("func")
    )


def save_velocities(path: str, velocities: Mapping[str, Tuple[VelocityField, ...]]):
    tensors = {}
    for subject_id, fields in velocities.items():
        for name, v in zip(("v_j", "v_g", "v_f"), fields):
            tensors[f"{subject_id}/{name}"] = v.v
    write_container(path, tensors)


def load_velocities(path: str) -> Dict[str, Dict[str, VelocityField]]:
    out: Dict[str, Dict[str, VelocityField]] = {}
    for key, array in read_container(path).items():
        subject_id, name = key.rsplit("/", 1)
        out.setdefault(subject_id, {})[name] = VelocityField(array, _grid_of(array))
    return out


def save_fields(path: str, fields: Mapping[str, Mapping[str, np.ndarray]]):
    """Displacement fields keyed ``<subject>/<name>``."""
    write_container(
        path,
        {f"{sid}/{name}": u for sid, named in fields.items() for name, u in named.items()},
    )


def load_fields(path: str) -> Dict[str, Dict[str, np.ndarray]]:
    out: Dict[str, Dict[str, np.ndarray]] = {}
    for key, array in read_container(path).items():
        subject_id, name = key.rsplit("/", 1)
        out.setdefault(subject_id, {})[name] = array
    return out


def json_custom(obj: Any):
    """JSON serializer for extra types."""

    if isinstance(obj, (datetime, date)):
        return obj.isoformat()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError("Type {} not serializable".format(type(obj)))


def write_json(path: str, body):
    with open(path, "w") as f:
        json.dump(body, f, indent=2, sort_keys=True, default=json_custom)
        f.write("\n")


def read_json(path: str):
    require_path(path, "JSON file")
    with open(path, "r") as f:
        return json.load(f)


def write_csv(path: str, header: List[str], rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in row])


def write_pgm(path: str, image: np.ndarray):
    """16-bit binary PGM, min-max scaled."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        image = image.mean(axis=-1)
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.rint(scaled * 65535).astype(">u2")
    height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n65535\n".encode("ascii"))
        f.write(pixels.tobytes())


class RunStorage:
    """Files of one run directory: a cohort, a fit, a registration or an
    evaluation."""

    def __init__(self, directory: str, create: bool = False):
        self.directory = directory
        if create:
            os.makedirs(directory, exist_ok=True)
        else:
            require_path(directory, "run directory")

    def path(self, *parts) -> str:
        return os.path.join(self.directory, *parts)

    # Cohorts

    def save_cohort(self, cohort: Cohort, config: Dict, threads: int = 1):
        os.makedirs(self.path("subjects"), exist_ok=True)
        os.makedirs(self.path("truth"), exist_ok=True)
        save_atlas(self.path("atlas_true.josa"), cohort.atlas)

        def save_one(pair):
            record, truth = pair
            save_subject(self.path("subjects", f"{record.id}.josa"), record)
            write_container(
                self.path("truth", f"{truth.id}.josa"),
                {"v_j": truth.v_j.v, "v_g": truth.v_g.v, "v_f": truth.v_f.v},
            )

        with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
            list(executor.map(save_one, zip(cohort.subjects, cohort.truths)))

        write_json(
            self.path("manifest.json"),
            {
                "format_version": VERSION,
                "config": config,
                "subjects": [
                    {"id": t.id, "offset": t.offset, "has_func": r.has_func}
                    for r, t in zip(cohort.subjects, cohort.truths)
                ],
            },
        )
        logger.info("Wrote %d subjects to %s", len(cohort.subjects), self.directory)

    def manifest(self) -> Dict:
        return read_json(self.path("manifest.json"))

    def subject_ids(self) -> List[str]:
        return [s["id"] for s in self.manifest()["subjects"]]

    def load_subjects(self, threads: int = 1, geom_only: bool = False) -> List[SubjectRecord]:
        """Observations only; ground truth stays on disk."""
        ids = self.subject_ids()
        with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
            return list(
                executor.map(
                    lambda sid: load_subject(
                        self.path("subjects", f"{sid}.josa"), sid, geom_only
                    ),
                    ids,
                )
            )

    def load_truth(self) -> Dict[str, GroundTruth]:
        out = {}
        for entry in self.manifest()["subjects"]:
            tensors = read_container(self.path("truth", f"{entry['id']}.josa"))
            grid = _grid_of(tensors["v_j"])
            out[entry["id"]] = GroundTruth(
                entry["id"],
                *(VelocityField(tensors[n], grid) for n in ("v_j", "v_g", "v_f")),
                bool(entry["offset"]),
            )
        return out

    def load_true_atlas(self) -> Atlas:
        return load_atlas(self.path("atlas_true.josa"))
