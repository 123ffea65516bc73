"""File formats: embedding matrices, dataset manifests, checkpoints, loss logs.

Embedding files hold one matrix each: magic ``MKDE``, little-endian u32
version (= 1), u32 rows, u32 cols, then rows*cols float32 values row-major.
Values are widened to float64 on load. A JSON manifest ties per-sample
pathology/genomic files to labels and optional survival info.

Checkpoints are a versioned binary container (magic ``MKDC``) holding every
parameter tensor by name as float64 plus the model/run configuration, so a
write-read cycle is bit-exact. All writers go through write-temp-then-rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import GenomicMatrix, Model, ModelConfig, PathologyBag
from .errors import IngestionError

EMBEDDING_MAGIC = b"MKDE"
CHECKPOINT_MAGIC = b"MKDC"
EMBEDDING_VERSION = 1
CHECKPOINT_VERSION = 1

LABEL_KEYS = ("er", "pr", "her2")


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# embedding matrices


def write_embedding(path, matrix: np.ndarray) -> None:
    """Write one feature matrix as an MKDE file (stored float32, row-major)."""
    m = np.ascontiguousarray(matrix, dtype=np.float32)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise IngestionError(f"{path}: refusing to write matrix of shape {m.shape}")
    header = EMBEDDING_MAGIC + struct.pack("<III", EMBEDDING_VERSION, m.shape[0], m.shape[1])
    _atomic_write(Path(path), header + m.tobytes())


def read_embedding(path) -> np.ndarray:
    """Read an MKDE file, validating structure; returns float64 matrix."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != EMBEDDING_MAGIC:
        raise IngestionError(f"{path}: bad magic at offset 0 (expected {EMBEDDING_MAGIC!r})")
    if len(blob) < 16:
        raise IngestionError(f"{path}: truncated header, file ends at offset {len(blob)} of 16")
    version, rows, cols = struct.unpack("<III", blob[4:16])
    if version != EMBEDDING_VERSION:
        raise IngestionError(f"{path}: unsupported version {version} at offset 4")
    if rows < 1 or cols < 1:
        raise IngestionError(f"{path}: invalid shape {rows}x{cols} at offset 8")
    expected = 16 + 4 * rows * cols
    if len(blob) < expected:
        raise IngestionError(f"{path}: truncated payload, file ends at offset {len(blob)} of {expected}")
    if len(blob) > expected:
        raise IngestionError(f"{path}: {len(blob) - expected} trailing bytes after offset {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(rows, cols)
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise IngestionError(f"{path}: non-finite value at element {bad} (offset {16 + 4 * bad})")
    return data.astype(np.float64)


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class SurvivalInfo:
    time_days: float
    event: int


@dataclass
class Sample:
    sample_id: str
    bag: PathologyBag
    genomic: GenomicMatrix | None
    labels: dict[str, int | None]
    survival: SurvivalInfo | None = None

    @property
    def pathology_only(self) -> bool:
        return self.genomic is None

    def label(self, task: str) -> int | None:
        return self.labels.get(task.lower())


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def d_in(self) -> int:
        return self.samples[0].bag.features.shape[1]

    def labeled(self, task: str) -> list[Sample]:
        """Samples carrying a 0/1 label for the given biomarker."""
        return [s for s in self.samples if s.label(task) is not None]


def write_manifest(path, entries: list[dict]) -> None:
    """Write the dataset manifest; file paths are relative to the manifest."""
    doc = {"version": 1, "samples": entries}
    _atomic_write(Path(path), (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


def load_manifest(path) -> Dataset:
    """Materialize every sample listed in a manifest, validating as we go."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise IngestionError(f"{path}: not valid JSON ({e})") from None
    if doc.get("version") != 1:
        raise IngestionError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    base = path.parent
    samples: list[Sample] = []
    d_in = None
    genomic_shape = None
    for entry in doc.get("samples", []):
        sid = entry.get("id")
        if not sid or "pathology" not in entry:
            raise IngestionError(f"{path}: sample entry missing id or pathology file: {entry!r}")
        bag = PathologyBag(sid, read_embedding(base / entry["pathology"]))
        if d_in is None:
            d_in = bag.features.shape[1]
        elif bag.features.shape[1] != d_in:
            raise IngestionError(f"{path}: sample {sid!r} pathology width {bag.features.shape[1]} != {d_in}")
        genomic = None
        if entry.get("genomic"):
            genomic = GenomicMatrix(sid, read_embedding(base / entry["genomic"]))
            if genomic_shape is None:
                genomic_shape = genomic.features.shape
            elif genomic.features.shape != genomic_shape:
                raise IngestionError(
                    f"{path}: sample {sid!r} genomic shape {genomic.features.shape} != {genomic_shape}")
        raw_labels = entry.get("labels", {})
        labels: dict[str, int | None] = {}
        for key in LABEL_KEYS:
            v = raw_labels.get(key)
            if v not in (0, 1, None):
                raise IngestionError(f"{path}: sample {sid!r} label {key}={v!r} not in {{0, 1, null}}")
            labels[key] = v
        survival = None
        if entry.get("survival") is not None:
            s = entry["survival"]
            survival = SurvivalInfo(time_days=float(s["time_days"]), event=int(s["event"]))
        samples.append(Sample(sid, bag, genomic, labels, survival))
    return Dataset(samples=samples)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    """Versioned container: config JSON plus every named parameter as float64."""
    cfg = {
        "d_in": model.config.d_in,
        "d": model.config.d,
        "n_classes": model.config.n_classes,
        "dropout": model.config.dropout,
        "compress_activation": model.config.compress_activation,
        "detach_fusion_inputs": model.config.detach_fusion_inputs,
    }
    if extra:
        cfg.update(extra)
    cfg_blob = json.dumps(cfg, sort_keys=True).encode()
    params = model.parameters()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg_blob)), cfg_blob,
             struct.pack("<I", len(params))]
    for name, tensor in params.items():
        nb = name.encode()
        rows, cols = tensor.data.shape
        parts.append(struct.pack("<III", len(nb), rows, cols))
        parts.append(nb)
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    _atomic_write(Path(path), b"".join(parts))


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    blob = path.read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if len(blob) < off + n:
            raise IngestionError(f"{path}: truncated while reading {what}, file ends at offset {len(blob)}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise IngestionError(f"{path}: bad magic at offset 0 (expected {CHECKPOINT_MAGIC!r})")
    version, cfg_len = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    cfg = json.loads(take(cfg_len, "config").decode())
    model = Model(ModelConfig(
        d_in=int(cfg["d_in"]), d=int(cfg["d"]), n_classes=int(cfg.get("n_classes", 2)),
        dropout=float(cfg.get("dropout", 0.25)),
        compress_activation=cfg.get("compress_activation", "relu"),
        detach_fusion_inputs=bool(cfg.get("detach_fusion_inputs", False))))
    (n_params,) = struct.unpack("<I", take(4, "parameter count"))
    params = model.parameters()
    if n_params != len(params):
        raise IngestionError(f"{path}: holds {n_params} parameters, model expects {len(params)}")
    for _ in range(n_params):
        name_len, rows, cols = struct.unpack("<III", take(12, "parameter header"))
        name = take(name_len, "parameter name").decode()
        if name not in params:
            raise IngestionError(f"{path}: unknown parameter {name!r}")
        target = params[name]
        if target.data.shape != (rows, cols):
            raise IngestionError(f"{path}: parameter {name!r} has shape {(rows, cols)}, "
                                 f"expected {target.data.shape}")
        raw = take(8 * rows * cols, f"parameter {name!r}")
        target.data[...] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols)
    if off != len(blob):
        raise IngestionError(f"{path}: {len(blob) - off} trailing bytes after offset {off}")
    return model, cfg


# ---------------------------------------------------------------------------
# loss log


def format_loss_record(step: int, epoch: int, losses: dict[str, float]) -> str:
    """One log line: step, epoch, then the seven loss fields at 17 significant digits."""
    fields = [f'"step": {step}', f'"epoch": {epoch}']
    fields += [f'"{k}": {v:.17g}' for k, v in losses.items()]
    return "{" + ", ".join(fields) + "}"


def write_loss_log(path, lines: list[str]) -> None:
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode() if lines else b"")


def read_loss_log(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out
