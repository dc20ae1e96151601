"""Datasets: cue-task generation, IDX ingestion, splits, binary container.

The container format used for checkpoints and persisted datasets is a
simple versioned layout: an 8-byte magic, a u32 version, a table of
named arrays (name, dtype code, shape, raw little-endian payload), and a
trailing crc32 over everything before it.  Loads are bit-exact round
trips; loading a float32 payload into a float64 slot is an explicit
widening, never the reverse.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

CONTAINER_MAGIC = b"HYPRBIN\x01"
CONTAINER_VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float64): 0,
    np.dtype(np.float32): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
    np.dtype(np.bool_): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Dataset:
    """Input sequences plus targets and loss masking.

    ``inputs``: (N, T, d); ``targets``: (N,) int64 or (N, T) int64 when
    ``per_step_targets``; ``loss_mask``: optional (T,) bool restricting
    which steps carry loss (e.g. a recall window).
    """

    inputs: np.ndarray
    targets: np.ndarray
    n_classes: int
    per_step_targets: bool = False
    loss_mask: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ConfigError(f"inputs must be (N, T, d), got {self.inputs.shape}")
        if len(self.targets) != len(self.inputs):
            raise ConfigError("targets and inputs disagree on sample count")
        if self.per_step_targets and self.targets.shape[1] != self.inputs.shape[1]:
            raise ConfigError("per-step targets must cover every step")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[2]

    def subset(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])


@dataclass(frozen=True)
class CueTaskSpec:
    """Cue / delay / recall spike-pattern classification task."""

    n_samples: int = 256
    t_pat: int = 20
    t_delay: int = 1000
    p_active: float = 0.5
    n_channels: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2 or self.n_samples % 2:
            raise ConfigError("cue task needs an even, positive sample count")
        if self.t_pat < 1 or self.t_delay < 0:
            raise ConfigError("cue task needs t_pat >= 1 and t_delay >= 0")
        if not 0.0 < self.p_active <= 1.0:
            raise ConfigError("cue activation probability must be in (0, 1]")
        if self.n_channels < 15:
            raise ConfigError("cue task uses 15 input channels")

    @property
    def seq_len(self) -> int:
        return 2 * self.t_pat + self.t_delay


def generate_cue_dataset(spec: CueTaskSpec) -> Dataset:
    """Balanced two-class cue dataset, deterministic per seed.

    Channels 0-4 carry the class-A cue, 5-9 the class-B cue, 10-14 the
    recall marker; the delay period is silent.  Targets apply only
    during the recall window (loss mask).
    """
    rng = np.random.default_rng(spec.seed)
    n, t_pat, total = spec.n_samples, spec.t_pat, spec.seq_len
    labels = np.repeat(np.arange(2), n // 2)
    labels = labels[rng.permutation(n)]
    x = np.zeros((n, total, spec.n_channels), dtype=np.float32)
    cue = rng.random((n, t_pat, 5)) < spec.p_active
    recall = rng.random((n, t_pat, 5)) < spec.p_active
    for i in range(n):
        lo = 0 if labels[i] == 0 else 5
        x[i, :t_pat, lo : lo + 5] = cue[i]
        x[i, total - t_pat :, 10:15] = recall[i]
    mask = np.zeros(total, dtype=bool)
    mask[total - t_pat :] = True
    return Dataset(
        inputs=x,
        targets=labels.astype(np.int64),
        n_classes=2,
        loss_mask=mask,
        name=f"cue-delay{spec.t_delay}-seed{spec.seed}",
    )


def split_dataset(ds: Dataset, fractions, seed: int) -> list[Dataset]:
    """Seeded shuffle, then contiguous slices.

    All but the last split are floored; the remainder goes to the last.
    """
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    n = len(ds)
    sizes = [int(np.floor(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if any(s < 1 for s in sizes):
        raise ConfigError(f"split sizes {sizes} leave an empty split for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    out = []
    start = 0
    for size in sizes:
        out.append(ds.subset(order[start : start + size]))
        start += size
    return out


# ---------------------------------------------------------------------------
# IDX files (big-endian header, unsigned-byte payload)
# ---------------------------------------------------------------------------


def _read_idx(path: str, expected_magic: int, expected_dims: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = 4 + 4 * expected_dims
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated header at byte {len(blob)}")
    magic = struct.unpack(">i", blob[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}"
        )
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated dimension table at byte {len(blob)}")
    dims = struct.unpack(f">{expected_dims}i", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) != header + count:
        raise DataFormatError(
            f"{path}: payload ends at byte {len(blob)}, expected {header + count}"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_images(path: str) -> np.ndarray:
    """(N, rows, cols) uint8 image tensor from an IDX image file."""
    return _read_idx(path, IDX_MAGIC_IMAGES, 3)


def load_idx_labels(path: str) -> np.ndarray:
    """(N,) uint8 label vector from an IDX label file."""
    return _read_idx(path, IDX_MAGIC_LABELS, 1)


def pixel_sequence_dataset(
    images: np.ndarray, labels: np.ndarray, n_classes: int = 10, name: str = ""
) -> Dataset:
    """Flatten images to pixel-by-pixel sequences scaled to [0, 1]."""
    if len(images) != len(labels):
        raise DataFormatError(
            f"{name or 'dataset'}: {len(images)} images but {len(labels)} labels"
        )
    n, rows, cols = images.shape
    seq = images.reshape(n, rows * cols, 1).astype(np.float32) / 255.0
    return Dataset(
        inputs=seq, targets=labels.astype(np.int64), n_classes=n_classes, name=name
    )


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------


def save_arrays(path: str, arrays: dict) -> None:
    """Write named arrays in the versioned container layout."""
    chunks = [CONTAINER_MAGIC, struct.pack("<II", CONTAINER_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ConfigError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        enc = name.encode()
        chunks.append(struct.pack("<H", len(enc)))
        chunks.append(enc)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_arrays(path: str) -> dict:
    """Read a container; verifies magic, version, and checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CONTAINER_MAGIC) + 12:
        raise DataFormatError(f"{path}: truncated container ({len(blob)} bytes)")
    if blob[: len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise DataFormatError(f"{path}: bad container magic at byte 0")
    body, footer = blob[:-4], blob[-4:]
    crc = struct.unpack("<I", footer)[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise DataFormatError(f"{path}: checksum mismatch at byte {len(body)}")
    off = len(CONTAINER_MAGIC)
    version, count = struct.unpack_from("<II", body, off)
    if version != CONTAINER_VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    off += 8
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode()
        off += name_len
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        if code not in _CODE_DTYPES:
            raise DataFormatError(f"{path}: unknown dtype code {code} in {name!r}")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(body, dtype=dtype.newbyteorder("<"), count=max(
            int(np.prod(shape)), 1) if ndim else 1, offset=off)
        arr = arr.astype(dtype).reshape(shape)
        off += nbytes
        out[name] = arr
    if off != len(body):
        raise DataFormatError(f"{path}: {len(body) - off} trailing bytes at {off}")
    return out


def save_dataset(path: str, ds: Dataset) -> None:
    arrays = {
        "inputs": ds.inputs,
        "targets": ds.targets,
        "meta": np.array(
            [ds.n_classes, int(ds.per_step_targets), 1 if ds.loss_mask is not None else 0],
            dtype=np.int64,
        ),
    }
    if ds.loss_mask is not None:
        arrays["loss_mask"] = ds.loss_mask
    save_arrays(path, arrays)


def load_dataset_file(path: str, name: str = "") -> Dataset:
    arrays = load_arrays(path)
    for key in ("inputs", "targets", "meta"):
        if key not in arrays:
            raise DataFormatError(f"{path}: missing dataset entry {key!r}")
    n_classes, per_step, has_mask = (int(v) for v in arrays["meta"])
    return Dataset(
        inputs=arrays["inputs"],
        targets=arrays["targets"],
        n_classes=n_classes,
        per_step_targets=bool(per_step),
        loss_mask=arrays["loss_mask"] if has_mask else None,
        name=name or path,
    )
