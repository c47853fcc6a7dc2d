"""Bit-exact persistence: tensor containers, checkpoints, results tables.

The container format ("ETLT", version 1) is little-endian and
platform-independent:

    magic   4 bytes ASCII "ETLT"
    version u32 = 1
    count   u32 number of sections
    per section:
        name_len u16, name UTF-8
        dtype    u8 (1 = float32, 2 = float64, 3 = uint8)
        rank     u8
        dims     rank * u64
        payload  row-major, product(dims) * dtype-size bytes

Canonical section names: features (n x d), logits (n x C), labels (n,
uint8, 0 = in / 1 = out), source_tags (newline-joined UTF-8 as uint8),
and optionally scores, scores_calibrated, logits_perturbed.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Mapping, Sequence

import numpy as np

from oodlinear import calibrate, linalg, mlp
from oodlinear.datasets import FeatureRecord, records_from_arrays
from oodlinear.errors import CorruptionError, FormatError

MAGIC = b"ETLT"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file in the same directory plus one rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".etlt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path: str, sections: Mapping[str, np.ndarray]) -> None:
    """Serialize named arrays; atomic (temp file + rename)."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, arr in sections.items():
        arr = np.asarray(arr)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # would promote 0-d to 1-d, hence the guard
        if arr.dtype not in _DTYPE_CODES:
            if np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype("<f8")
            elif arr.dtype == np.uint8:
                arr = arr.astype("u1")
            else:
                raise FormatError(f"section {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"section name too long: {len(encoded)} bytes")
        if arr.ndim > 0xFF:
            raise FormatError(f"section {name!r} rank {arr.ndim} exceeds format limit")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    atomic_write_bytes(path, b"".join(parts))


def read_container(path: str) -> dict[str, np.ndarray]:
    """Parse a container, validating structure before returning arrays.

    Arrays come back in their stored dtype; callers widen 32-bit
    payloads to float64 for computation (an exact conversion).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise CorruptionError("header truncated", len(blob))
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    offset = 12
    sections: dict[str, np.ndarray] = {}

    def need(nbytes: int, what: str) -> None:
        if offset + nbytes > len(blob):
            raise CorruptionError(f"truncated while reading {what}", offset)

    for _ in range(count):
        need(2, "section name length")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        need(name_len, "section name")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        if name in sections:
            raise FormatError(f"duplicate section name {name!r}")
        need(2, "dtype/rank")
        code, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} in section {name!r}")
        need(8 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        dtype = _CODE_DTYPES[code]
        n_items = 1
        for d in dims:  # exact Python ints, immune to overflow on damaged dims
            n_items *= d
        payload_len = n_items * dtype.itemsize
        need(payload_len, f"payload of section {name!r}")
        flat = np.frombuffer(blob, dtype=dtype, count=n_items, offset=offset)
        offset += payload_len
        sections[name] = flat.reshape(dims).copy()
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after the last section")
    return sections


def encode_tags(tags: Sequence[str]) -> np.ndarray:
    """String table: newline-joined UTF-8 stored as a uint8 vector."""
    for t in tags:
        if "\n" in t:
            raise FormatError(f"source tag {t!r} contains a newline")
    return np.frombuffer("\n".join(tags).encode("utf-8"), dtype="u1").copy()


def decode_tags(arr: np.ndarray, n: int) -> list[str]:
    if arr.size == 0 and n == 0:
        return []
    tags = bytes(arr.astype("u1")).decode("utf-8").split("\n")
    if len(tags) != n:
        raise FormatError(f"source_tags holds {len(tags)} entries for {n} records")
    return tags


def records_to_sections(records: Sequence[FeatureRecord], feature_dtype: str = "<f8") -> dict[str, np.ndarray]:
    """Canonical sections for a record list.

    feature_dtype may be "<f4" for compact storage; everything else
    stays float64.  logits / logits_perturbed sections appear only when
    every record carries them.
    """
    from oodlinear import datasets  # local import keeps module load order simple

    feats = datasets.features_of(records).astype(feature_dtype)
    sections: dict[str, np.ndarray] = {"features": feats}
    if records and all(r.logits is not None for r in records):
        sections["logits"] = datasets.logits_of(records)
    sections["labels"] = datasets.labels_of(records)
    sections["source_tags"] = encode_tags(datasets.tags_of(records))
    if records and all(r.logits_perturbed is not None for r in records):
        sections["logits_perturbed"] = np.stack(
            [np.asarray(r.logits_perturbed, dtype=np.float64) for r in records]
        )
    return sections


def sections_to_records(sections: Mapping[str, np.ndarray]) -> list[FeatureRecord]:
    """Rebuild records from canonical sections.

    Missing labels default to all-in; missing tags default to the
    origin name.  32-bit features widen exactly to float64.
    """
    if "features" not in sections:
        raise FormatError("container has no 'features' section")
    feats = np.asarray(sections["features"], dtype=np.float64)
    n = feats.shape[0]
    labels = np.asarray(sections.get("labels", np.zeros(n, dtype="u1")))
    logits = sections.get("logits")
    if logits is not None:
        logits = np.asarray(logits, dtype=np.float64)
    perturbed = sections.get("logits_perturbed")
    if perturbed is not None:
        perturbed = np.asarray(perturbed, dtype=np.float64)
    tags = decode_tags(sections["source_tags"], n) if "source_tags" in sections else None
    return records_from_arrays(feats, logits, labels, tags, perturbed)


def save_regression_model(path: str, model: calibrate.RegressionModel) -> None:
    prep = model.preprocessor
    sections: dict[str, np.ndarray] = {
        "beta": np.asarray(model.beta, dtype="<f8"),
        "prep": np.array(
            [float(prep.unit_normalize), float(prep.add_bias), float(prep.input_dim)], dtype="<f8"
        ),
        "fit": np.array([model.residual_norm, float(model.gram_rank)], dtype="<f8"),
    }
    if prep.pca is not None:
        sections["pca_mean"] = np.asarray(prep.pca.mean, dtype="<f8")
        sections["pca_components"] = np.asarray(prep.pca.components, dtype="<f8")
        sections["pca_variance"] = np.asarray(prep.pca.explained_variance, dtype="<f8")
    write_container(path, sections)


def load_regression_model(path: str) -> calibrate.RegressionModel:
    sections = read_container(path)
    for required in ("beta", "prep", "fit"):
        if required not in sections:
            raise FormatError(f"model checkpoint missing section {required!r}")
    unit_norm, add_bias, input_dim = sections["prep"]
    basis = None
    if "pca_components" in sections:
        basis = linalg.PcaBasis(
            mean=np.asarray(sections["pca_mean"], dtype=np.float64),
            components=np.asarray(sections["pca_components"], dtype=np.float64),
            explained_variance=np.asarray(sections["pca_variance"], dtype=np.float64),
        )
    prep = calibrate.Preprocessor(
        unit_normalize=bool(unit_norm),
        pca=basis,
        add_bias=bool(add_bias),
        input_dim=int(input_dim),
    )
    residual_norm, rank = sections["fit"]
    return calibrate.RegressionModel(
        beta=np.asarray(sections["beta"], dtype=np.float64),
        preprocessor=prep,
        residual_norm=float(residual_norm),
        gram_rank=int(rank),
    )


def save_online_state(path: str, state: calibrate.OnlineState) -> None:
    write_container(
        path,
        {
            "gram": np.asarray(state.a, dtype="<f8"),
            "moment": np.asarray(state.b, dtype="<f8"),
            "samples_seen": np.array([float(state.samples_seen)], dtype="<f8"),
        },
    )


def load_online_state(path: str) -> calibrate.OnlineState:
    sections = read_container(path)
    for required in ("gram", "moment", "samples_seen"):
        if required not in sections:
            raise FormatError(f"state checkpoint missing section {required!r}")
    return calibrate.OnlineState(
        a=np.asarray(sections["gram"], dtype=np.float64),
        b=np.asarray(sections["moment"], dtype=np.float64),
        samples_seen=int(sections["samples_seen"][0]),
    )


def save_mlp(path: str, model: mlp.Mlp) -> None:
    sections: dict[str, np.ndarray] = {"dims": np.asarray(model.dims, dtype="<f8")}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        sections[f"w{i}"] = np.asarray(w, dtype="<f8")
        sections[f"b{i}"] = np.asarray(b, dtype="<f8")
    write_container(path, sections)


def load_mlp(path: str) -> mlp.Mlp:
    sections = read_container(path)
    if "dims" not in sections:
        raise FormatError("model checkpoint missing section 'dims'")
    dims = [int(v) for v in sections["dims"]]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        for key in (f"w{i}", f"b{i}"):
            if key not in sections:
                raise FormatError(f"model checkpoint missing section {key!r}")
        weights.append(np.asarray(sections[f"w{i}"], dtype=np.float64))
        biases.append(np.asarray(sections[f"b{i}"], dtype=np.float64))
    return mlp.Mlp(dims, weights, biases)


RESULT_COLUMNS = (
    "fpr95_mean",
    "fpr95_std",
    "auroc_mean",
    "auroc_std",
    "aupr_mean",
    "aupr_std",
)


def render_results_table(rows) -> str:
    """Tab-separated aggregate table, rows sorted lexicographically by key.

    Wall-clock timings are deliberately absent: the rendered bytes are
    a pure function of the data and seeds.
    """
    header = ["in_dataset", "ood_dataset", "scorer", "method", "repeats", *RESULT_COLUMNS]
    lines = ["\t".join(header)]
    for row in sorted(rows, key=lambda r: (r.in_dataset, r.ood_dataset, r.scorer, r.method)):
        cells = [row.in_dataset, row.ood_dataset, row.scorer, row.method, str(row.repeats)]
        cells.extend(f"{getattr(row, col):.6f}" for col in RESULT_COLUMNS)
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def render_results_json(rows) -> str:
    """Machine-readable twin of the text table, identically ordered."""
    payload = []
    for row in sorted(rows, key=lambda r: (r.in_dataset, r.ood_dataset, r.scorer, r.method)):
        entry = {
            "in_dataset": row.in_dataset,
            "ood_dataset": row.ood_dataset,
            "scorer": row.scorer,
            "method": row.method,
            "repeats": row.repeats,
        }
        for col in RESULT_COLUMNS:
            entry[col] = round(float(getattr(row, col)), 12)
        payload.append(entry)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def parse_config(text: str) -> dict[str, str]:
    """Flat key = value lines; '#' starts a comment; blank lines skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError(f"config line {lineno}: empty key")
        out[key] = value.strip()
    return out


def load_config(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
