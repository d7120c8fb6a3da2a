"""
Trajectory dataset container and its on-disk format

A dataset holds four splits, `train`, `test`, `ood_train` and `ood_test`. Each
split is a time grid `t: float64[N]` and a tensor `X: float64[envs, trajs, N, d]`.

On disk a dataset is a directory::

    manifest.json        UTF-8 JSON, keys sorted, two-space indent, trailing newline
    <split>.t.bin        raw little-endian float64, row-major
    <split>.X.bin        raw little-endian float64, row-major

The manifest records, for each split and array, the blob file name, its shape
and the CRC-64/XZ checksum of the blob bytes as 16 lowercase hex digits, plus
the dtype tag `"f64le"` and the dataset metadata. Nothing time-dependent is
written, so saving the same dataset twice yields identical bytes.
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import *

import numpy as np

from .core import ChecksumError, DtypeError, ManifestError, SizeMismatchError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "ood_train", "ood_test")
DTYPE_TAG = "f64le"
FORMAT_NAME = "ncflow-dataset"
FORMAT_VERSION = 1

_CRC64_POLY = 0xC96C5795D7870F42
_CRC64_MASK = 0xFFFFFFFFFFFFFFFF


def _crc64_table() -> List[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes) -> str:
    """CRC-64/XZ (ECMA-182, reflected) of `data` as 16 hex digits"""
    crc = _CRC64_MASK
    table = _CRC64_TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return f"{crc ^ _CRC64_MASK:016x}"


@dataclass
class Split:
    t: np.ndarray
    """`float64[N]`"""
    X: np.ndarray
    """`float64[envs, trajs, N, d]`"""

    @property
    def nb_envs(self) -> int:
        return self.X.shape[0]

    @property
    def nb_trajs(self) -> int:
        return self.X.shape[1]


@dataclass
class TrajectoryDataset:
    """Four-split trajectory container

    Attributes:
        splits (Dict[str, Split]): One entry per name in `SPLITS`
        metadata (Dict[str, Any]): System name, per-split environment assignments
            (`environments`), generator `seed` and `solver` spec; JSON-serializable
    """

    splits: Dict[str, Split]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]

    @property
    def state_size(self) -> int:
        return self.splits["train"].X.shape[-1]

    @property
    def system(self) -> Optional[str]:
        return self.metadata.get("system")

    def environments(self, split: str) -> List[Dict[str, float]]:
        return list(self.metadata.get("environments", {}).get(split, []))


class Violation(NamedTuple):
    """A broken dataset invariant"""

    split: str
    index: Tuple[int, ...]
    rule: str


def validate(ds: TrajectoryDataset) -> List[Violation]:
    """Check every dataset invariant

    Returns:
        List[Violation]: Empty iff the dataset is well-formed
    """
    violations: List[Violation] = []
    sizes = {}
    for name in SPLITS:
        if name not in ds.splits:
            violations.append(Violation(name, (), "missing_split"))
            continue
        split = ds.splits[name]
        t, X = np.asarray(split.t), np.asarray(split.X)
        if t.ndim != 1:
            violations.append(Violation(name, (), "time_grid_not_1d"))
            continue
        if X.ndim != 4:
            violations.append(Violation(name, (), "tensor_not_4d"))
            continue
        if X.shape[2] != t.size:
            violations.append(Violation(name, (), "steps_mismatch"))
        for step in np.flatnonzero(np.diff(t) <= 0):
            violations.append(Violation(name, (int(step) + 1,), "time_not_increasing"))
        for index in np.argwhere(~np.isfinite(X)):
            violations.append(Violation(name, tuple(int(i) for i in index), "non_finite"))
        sizes[name] = X.shape[-1]
    if len(set(sizes.values())) > 1:
        for name, size in sizes.items():
            if size != sizes.get("train", size):
                violations.append(Violation(name, (), "state_size_mismatch"))
    for support, query in (("train", "test"), ("ood_train", "ood_test")):
        if support not in ds.splits or query not in ds.splits:
            continue
        same_count = ds.splits[support].X.shape[0] == ds.splits[query].X.shape[0]
        if not same_count or ds.environments(support) != ds.environments(query):
            violations.append(Violation(query, (), f"environments_differ_from_{support}"))
    return violations


def _blob(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


def save(ds: TrajectoryDataset, path: Union[str, os.PathLike]):
    """Write `ds` into directory `path`, creating it if needed"""
    os.makedirs(path, exist_ok=True)
    entries: Dict[str, Dict[str, Any]] = {}
    for name in SPLITS:
        split = ds.splits[name]
        entries[name] = {}
        for key, array in (("t", split.t), ("X", split.X)):
            data = _blob(array)
            filename = f"{name}.{key}.bin"
            with open(os.path.join(path, filename), "wb") as fh:
                fh.write(data)
            entries[name][key] = {"crc64": crc64(data), "file": filename, "shape": list(np.shape(array))}

    manifest = {
        "dtype": DTYPE_TAG,
        "format": FORMAT_NAME,
        "metadata": ds.metadata,
        "splits": entries,
        "version": FORMAT_VERSION,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    logger.info("Saved dataset to %s", path)


def _read_manifest(path: Union[str, os.PathLike]) -> Dict[str, Any]:
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ManifestError(f"Cannot read manifest in {path}: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise ManifestError(f"{path} does not hold an {FORMAT_NAME} manifest")
    if manifest.get("dtype") != DTYPE_TAG:
        raise DtypeError(f"Unknown dtype tag {manifest.get('dtype')!r}")
    missing = [name for name in SPLITS if name not in manifest.get("splits", {})]
    if missing:
        raise ManifestError(f"Manifest lacks splits {missing}")
    return manifest


def _read_array(path: Union[str, os.PathLike], entry: Mapping[str, Any]) -> np.ndarray:
    try:
        shape = tuple(int(extent) for extent in entry["shape"])
        filename, expected_crc = entry["file"], entry["crc64"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"Malformed array entry {entry}: {exc}") from None
    with open(os.path.join(path, filename), "rb") as fh:
        data = fh.read()
    expected_size = 8 * int(np.prod(shape, dtype=np.int64))
    if len(data) != expected_size:
        raise SizeMismatchError(f"{filename} is {len(data)} bytes, shape {list(shape)} needs {expected_size}")
    if crc64(data) != expected_crc:
        raise ChecksumError(f"{filename} fails its CRC-64 check")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)


def load(path: Union[str, os.PathLike]) -> TrajectoryDataset:
    """Read a dataset written by `save`

    Raises:
        ManifestError: Missing, malformed or internally inconsistent manifest, or a time grid that is not strictly increasing
        DtypeError: Unknown dtype tag
        SizeMismatchError: A blob's size disagrees with its declared shape
        ChecksumError: A blob's CRC-64 disagrees with the manifest
    """
    manifest = _read_manifest(path)
    splits = {}
    for name in SPLITS:
        entry = manifest["splits"][name]
        try:
            t_entry, x_entry = entry["t"], entry["X"]
        except (KeyError, TypeError):
            raise ManifestError(f"Split {name} lacks its t/X entries") from None
        t_shape, x_shape = t_entry.get("shape", []), x_entry.get("shape", [])
        if len(t_shape) != 1 or len(x_shape) != 4 or x_shape[2] != t_shape[0]:
            raise ManifestError(f"Split {name}: X shape {x_shape} is inconsistent with t shape {t_shape}")
        t = _read_array(path, t_entry)
        steps = np.flatnonzero(np.diff(t) <= 0)
        if steps.size:
            raise ManifestError(f"Split {name}: time grid is not strictly increasing at step {int(steps[0]) + 1}")
        splits[name] = Split(t, _read_array(path, x_entry))
    logger.debug("Loaded dataset from %s", path)
    return TrajectoryDataset(splits, manifest.get("metadata", {}))


def export_csv(ds: TrajectoryDataset, path: Union[str, os.PathLike], splits: Sequence[str] = SPLITS):
    """Write one row per (split, env, traj, step) with the time and every state component"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "env", "traj", "step", "t"] + [f"x{i}" for i in range(ds.state_size)])
        for name in splits:
            split = ds.splits[name]
            for env, traj, step in np.ndindex(*split.X.shape[:3]):
                writer.writerow([name, env, traj, step, repr(float(split.t[step]))] + [repr(float(v)) for v in split.X[env, traj, step]])
