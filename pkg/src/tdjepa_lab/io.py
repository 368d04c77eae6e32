"""File formats: matrices (CSV / .npy), MDP JSON, dataset CSV, checkpoints.

Every writer goes through a temp-file-then-rename so readers never see a
partial file. CSV floats use ``repr`` so they round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .envs import Dataset
from .mdp import TabularMDP

CHECKPOINT_FORMAT = "tdjepa-lab-checkpoint/1"
MANIFEST = "manifest.json"


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write_text(path, dumps_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# matrices


def matrix_to_csv(m) -> str:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if not np.all(np.isfinite(m)):
        raise ValueError("only finite matrices can be serialized")
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in m)


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [line for line in text.splitlines() if line.strip()]
    data = [[float(v) for v in line.split(",")] for line in rows]
    if len({len(r) for r in data}) > 1:
        raise ValueError("ragged matrix CSV")
    return np.array(data, dtype=float)


def write_matrix_csv(path, m) -> Path:
    return atomic_write_text(path, matrix_to_csv(m))


def read_matrix_csv(path) -> np.ndarray:
    return matrix_from_csv(Path(path).read_text())


def write_matrix_npy(path, m) -> Path:
    buf = io.BytesIO()
    np.save(buf, np.asarray(m, dtype=float), allow_pickle=False)
    return atomic_write_bytes(path, buf.getvalue())


def read_matrix_npy(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


# --------------------------------------------------------------------------
# MDPs and datasets


def mdp_to_dict(mdp: TabularMDP) -> dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "rho": mdp.rho.tolist(),
        "d_rho_mode": mdp.d_rho_mode,
        "P": mdp.P.tolist(),
        "walls": sorted(list(w) for w in mdp.walls),
        "shape": list(mdp.shape) if mdp.shape else None,
    }


def mdp_from_dict(d: dict) -> TabularMDP:
    P = np.array(d["P"], dtype=float)
    if P.shape != (d["n_actions"], d["n_states"], d["n_states"]):
        raise ValueError(f"kernel shape {P.shape} disagrees with declared sizes")
    return TabularMDP(
        P,
        float(d["gamma"]),
        d.get("rho"),
        d.get("d_rho_mode", "unnormalized"),
        frozenset(tuple(w) for w in d.get("walls", [])),
        tuple(d["shape"]) if d.get("shape") else None,
    )


def write_mdp(path, mdp: TabularMDP) -> Path:
    return write_json(path, mdp_to_dict(mdp))


def read_mdp(path) -> TabularMDP:
    return mdp_from_dict(read_json(path))


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["s", "a", "s_next"])
    w.writerows(zip(ds.s.tolist(), ds.a.tolist(), ds.s_next.tolist()))
    return buf.getvalue()


def dataset_from_csv(text: str, source_seed: int = 0, behavior: str = "file") -> Dataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["s", "a", "s_next"]:
        raise ValueError(f"dataset CSV must start with header s,a,s_next, got {header}")
    rows = np.array([[int(v) for v in r] for r in reader if r], dtype=int).reshape(-1, 3)
    return Dataset(rows[:, 0], rows[:, 1], rows[:, 2], source_seed, behavior)


def write_dataset(path, ds: Dataset) -> Path:
    return atomic_write_text(path, dataset_to_csv(ds))


def read_dataset(path, mdp: TabularMDP | None = None) -> Dataset:
    ds = dataset_from_csv(Path(path).read_text())
    if mdp is not None:
        for name, arr, hi in (("s", ds.s, mdp.n_states), ("a", ds.a, mdp.n_actions), ("s_next", ds.s_next, mdp.n_states)):
            if arr.size and (arr.min() < 0 or arr.max() >= hi):
                raise ValueError(f"dataset column {name} out of range for the MDP")
    return ds


# --------------------------------------------------------------------------
# checkpoints: a directory with manifest.json plus one .npy per array


def save_checkpoint(directory, arrays: dict, meta: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(arrays):
        fname = f"{name}.npy"
        write_matrix_npy(directory / fname, arrays[name])
        files[name] = fname
    manifest = {"format": CHECKPOINT_FORMAT, "arrays": files, "meta": meta}
    write_json(directory / MANIFEST, manifest)
    return directory


def load_checkpoint(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = read_json(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    arrays = {name: read_matrix_npy(directory / fname) for name, fname in manifest["arrays"].items()}
    return arrays, manifest["meta"]
