"""File formats, per-instance rescaling, CP cache and the synthetic generator.

Binary layouts are little-endian. Every file starts with a 4-byte magic and
a u16 format version.

DTEN (dataset)::

    "DTEN" u16 version  u32 N  u32 dims[N]  u32 M
    M x ( i8 label, f64 values[prod(dims)] )         # row-major

DTEN text (hand-written fixtures)::

    dten/1 N=3 dims=2x3x4 M=2
    1 0.5 0.25 ...
    -1 ...

DCPC (CP cache)::

    "DCPC" u16 version  32s dataset sha256  32s options sha256
    u32 rank  i64 seed  u32 N  u32 dims[N]  u32 M
    M x N x f64 factor[dims[n], rank]                 # row-major

DSVM (trained model)::

    "DSVM" u16 version  u8 kernel (0 linear, 1 rbf, 255 none)  f64 sigma
    u32 rank  f64 C  f64 bias  u32 M  f64 alphas[M]  i8 labels[M]
    u32 S  [u32 N  u32 dims[N]  S x N x f64 factor[dims[n], rank]]

DGRM (Gram matrix)::

    "DGRM" u16 version  u8 kernel  f64 sigma  u32 rank  32s dataset sha256
    u32 M  f64 entries[M, M]
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cp as cp_mod
from .cp import CpModel, CpOptions
from .errors import (
    ArgumentError,
    DataError,
    FormatError,
    LabelError,
    MagicError,
    NonFinitePayloadError,
    ShapeError,
    TruncationError,
    VersionError,
)
from .kernels import GramMatrix, KernelSpec
from .svm import SvmModel
from .tensor import DenseTensor, as_array

log = logging.getLogger(__name__)

VERSION = 1
_KIND_CODE = {"linear": 0, "rbf": 1, None: 255}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def atomic_write(path, payload: bytes | str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode() if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def need(self, n: int) -> None:
        if self.pos + n > len(self.buf):
            raise TruncationError(self.pos + n, len(self.buf), self.what)

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        self.need(size)
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def one(self, fmt: str):
        return self.unpack(fmt)[0]

    def floats(self, count: int) -> np.ndarray:
        self.need(8 * count)
        start = self.pos
        out = np.frombuffer(self.buf, dtype="<f8", count=count, offset=start).astype(np.float64)
        self.pos += 8 * count
        bad = np.flatnonzero(~np.isfinite(out))
        if bad.size:
            raise NonFinitePayloadError(f"non-finite value in {self.what}", offset=start + 8 * int(bad[0]))
        return out

    def header(self, magic: bytes) -> int:
        self.need(4)
        if self.buf[:4] != magic:
            raise MagicError(f"bad magic {self.buf[:4]!r}, expected {magic!r}", offset=0)
        self.pos = 4
        version = self.one("<H")
        if version != VERSION:
            raise VersionError(f"unsupported {self.what} version {version}", offset=4)
        return version

    def dims(self) -> tuple[int, ...]:
        start = self.pos
        order = self.one("<I")
        if order < 1:
            raise FormatError(f"{self.what}: tensor order must be >= 1", offset=start)
        dims = self.unpack(f"<{order}I")
        if any(d < 1 for d in dims):
            raise FormatError(f"{self.what}: zero mode dimension in {dims}", offset=start + 4)
        return tuple(dims)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(
                f"{self.what}: {len(self.buf) - self.pos} trailing bytes", offset=self.pos
            )


def _dims_bytes(shape: Sequence[int]) -> bytes:
    return struct.pack(f"<I{len(shape)}I", len(shape), *shape)


# --------------------------------------------------------------------------
# datasets


@dataclass(eq=False)
class TensorDataset:
    """Labelled tensor instances of a common shape.

    ``data`` is stacked as ``(M, I_1, ..., I_N)``.
    """

    data: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    ground_truth: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        labels = np.asarray(self.labels).reshape(-1)
        if data.ndim < 2 or data.shape[0] < 1 or data.size == 0:
            raise ShapeError(f"dataset needs at least one instance of order >= 1, got {data.shape}")
        if len(labels) != data.shape[0]:
            raise ShapeError(f"{len(labels)} labels for {data.shape[0]} instances")
        if not np.all(np.isin(labels, (-1, 1))):
            raise LabelError("labels must be -1 or +1")
        if not np.all(np.isfinite(data)):
            raise DataError("dataset contains NaN or Inf")
        data.setflags(write=False)
        labels = labels.astype(np.int8)
        labels.setflags(write=False)
        self.data, self.labels = data, labels

    @classmethod
    def from_instances(cls, instances, labels, name="dataset"):
        arrays = [as_array(x) for x in instances]
        if not arrays:
            raise ShapeError("no instances")
        shape = arrays[0].shape
        for i, a in enumerate(arrays):
            if a.shape != shape:
                raise ShapeError(f"instance {i} has shape {a.shape}, expected {shape}")
        return cls(np.stack(arrays), np.asarray(labels), name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def m(self) -> int:
        return self.data.shape[0]

    def __len__(self):
        return self.m

    @property
    def instances(self) -> list[DenseTensor]:
        return [DenseTensor(x) for x in self.data]

    def subset(self, idx) -> "TensorDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return TensorDataset(self.data[idx], self.labels[idx], self.name)

    def rescaled(self) -> "TensorDataset":
        return TensorDataset(
            np.stack([rescale_unit(x).array for x in self.data]), self.labels, self.name
        )

    def to_bytes(self) -> bytes:
        m = self.m
        per = int(np.prod(self.shape))
        rec = np.empty(m, dtype=[("label", "i1"), ("values", "<f8", (per,))])
        rec["label"] = self.labels
        rec["values"] = self.data.reshape(m, per)
        head = b"DTEN" + struct.pack("<H", VERSION) + _dims_bytes(self.shape) + struct.pack("<I", m)
        return head + rec.tobytes()

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_text(self) -> str:
        dims = "x".join(str(d) for d in self.shape)
        lines = [f"dten/1 N={len(self.shape)} dims={dims} M={self.m}"]
        for label, x in zip(self.labels, self.data.reshape(self.m, -1)):
            lines.append(" ".join([str(int(label))] + [repr(float(v)) for v in x]))
        return "\n".join(lines) + "\n"


def dataset_from_bytes(buf: bytes, name: str = "dataset") -> TensorDataset:
    r = _Reader(buf, "DTEN dataset")
    r.header(b"DTEN")
    shape = r.dims()
    m = r.one("<I")
    if m < 1:
        raise FormatError("DTEN dataset: M must be >= 1", offset=r.pos - 4)
    per = int(np.prod(shape))
    stride = 1 + 8 * per
    start = r.pos
    expected = start + m * stride
    if len(buf) < expected:
        raise TruncationError(expected, len(buf), "DTEN dataset")
    if len(buf) > expected:
        raise FormatError(f"DTEN dataset: {len(buf) - expected} trailing bytes", offset=expected)
    rec = np.frombuffer(buf, dtype=[("label", "i1"), ("values", "<f8", (per,))], count=m, offset=start)
    labels = rec["label"].astype(np.int8)
    bad = np.flatnonzero(~np.isin(labels, (-1, 1)))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"instance {i}: label {labels[i]} not in {{-1, +1}}", offset=start + i * stride)
    values = rec["values"].astype(np.float64)
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        i, j = (int(v) for v in bad[0])
        raise NonFinitePayloadError(
            f"instance {i}: non-finite value", offset=start + i * stride + 1 + 8 * j
        )
    return TensorDataset(values.reshape((m,) + shape), labels, name)


def dataset_from_text(text: str, name: str = "dataset") -> TensorDataset:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or not lines[0].startswith("dten/"):
        raise MagicError("text dataset must start with a 'dten/1' header line")
    head = lines[0].split()
    if head[0] != "dten/1":
        raise VersionError(f"unsupported text dataset version {head[0]!r}")
    try:
        fields = dict(tok.split("=", 1) for tok in head[1:])
        order = int(fields["N"])
        shape = tuple(int(d) for d in fields["dims"].split("x"))
        m = int(fields["M"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"malformed text header {lines[0]!r}: {e}") from e
    if len(shape) != order or order < 1 or any(d < 1 for d in shape) or m < 1:
        raise FormatError(f"inconsistent text header {lines[0]!r}")
    body = lines[1:]
    if len(body) < m:
        raise TruncationError(m, len(body), "text dataset", unit="instance lines")
    if len(body) > m:
        raise FormatError(f"text dataset: {len(body) - m} extra instance lines")
    per = int(np.prod(shape))
    labels = np.empty(m, dtype=np.int64)
    data = np.empty((m, per))
    for i, ln in enumerate(body):
        toks = ln.split()
        try:
            label = int(toks[0])
            vals = [float(t) for t in toks[1:]]
        except ValueError as e:
            raise FormatError(f"line {i + 2}: {e}") from e
        if label not in (-1, 1):
            raise LabelError(f"line {i + 2}: label {label} not in {{-1, +1}}")
        if len(vals) != per:
            raise FormatError(f"line {i + 2}: {len(vals)} values, expected {per}")
        if not all(np.isfinite(vals)):
            raise NonFinitePayloadError(f"line {i + 2}: non-finite value")
        labels[i] = label
        data[i] = vals
    return TensorDataset(data.reshape((m,) + shape), labels, name)


def load_dataset(path) -> TensorDataset:
    """Read a DTEN file; binary or text is detected from the first bytes."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:5] == b"dten/":
        return dataset_from_text(buf.decode(), path.stem)
    return dataset_from_bytes(buf, path.stem)


def save_dataset(dataset: TensorDataset, path, fmt: str = "binary") -> None:
    if fmt == "binary":
        atomic_write(path, dataset.to_bytes())
    elif fmt == "text":
        atomic_write(path, dataset.to_text())
    else:
        raise ArgumentError(f"unknown dataset format {fmt!r}")


def rescale_unit(x) -> DenseTensor:
    """Linear map of the entries onto [0, 1]; constant tensors become zeros."""
    a = as_array(x)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return DenseTensor(np.zeros_like(a))
    return DenseTensor((a - lo) / (hi - lo))


def synth_lowrank(
    shape: Sequence[int],
    rank_signal: int,
    m_per_class: int,
    noise_sigma: float,
    seed: int = 0,
    name: str | None = None,
) -> TensorDataset:
    """Two-class dataset of noisy low-rank tensors.

    Each class has its own CP factors, drawn once with unit-variance
    columns scaled by ``1/sqrt(I_n)``; instances are the class signal plus
    i.i.d. Gaussian noise whose expected Frobenius norm is ``noise_sigma``
    times the signal's. Class +1 instances come first. The drawn factors
    are kept in ``ground_truth``.
    """
    shape = tuple(int(s) for s in shape) if len(shape) else ()
    if not shape or any(s < 1 for s in shape):
        raise ArgumentError(f"invalid shape {shape}")
    if rank_signal < 1:
        raise ArgumentError("rank_signal must be >= 1")
    if m_per_class < 1:
        raise ArgumentError("m_per_class must be >= 1")
    if not (np.isfinite(noise_sigma) and noise_sigma >= 0):
        raise ArgumentError("noise_sigma must be finite and >= 0")
    rng = np.random.default_rng(seed)
    truth = {}
    blocks, labels = [], []
    size = int(np.prod(shape))
    for label in (1, -1):
        factors = tuple(rng.standard_normal((d, rank_signal)) / np.sqrt(d) for d in shape)
        truth[label] = factors
        signal = cp_mod.reconstruct(CpModel(factors)).array
        scale = noise_sigma * np.linalg.norm(signal) / np.sqrt(size)
        noise = rng.standard_normal((m_per_class,) + shape)
        blocks.append(signal[None] + scale * noise)
        labels += [label] * m_per_class
    name = name or f"synth-r{rank_signal}-s{seed}"
    ds = TensorDataset(np.concatenate(blocks), np.array(labels), name)
    ds.ground_truth = truth
    return ds


# --------------------------------------------------------------------------
# CP cache


def options_digest(opts: CpOptions) -> str:
    return hashlib.sha256(repr(opts.digest_fields()).encode()).hexdigest()


@dataclass(eq=False)
class CpCache:
    dataset_hash: str
    rank: int
    options_digest: str
    seed: int
    models: list

    def matches(self, dataset_hash: str, rank: int, digest: str) -> bool:
        return (self.dataset_hash, self.rank, self.options_digest) == (dataset_hash, rank, digest)

    def to_bytes(self) -> bytes:
        shape = self.models[0].shape if self.models else ()
        out = [
            b"DCPC",
            struct.pack("<H", VERSION),
            bytes.fromhex(self.dataset_hash),
            bytes.fromhex(self.options_digest),
            struct.pack("<Iq", self.rank, self.seed),
            _dims_bytes(shape) if shape else struct.pack("<I", 0),
            struct.pack("<I", len(self.models)),
        ]
        for m in self.models:
            for f in m.factors:
                out.append(np.ascontiguousarray(f, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CpCache":
        r = _Reader(buf, "DCPC cache")
        r.header(b"DCPC")
        r.need(64)
        dhash = buf[r.pos:r.pos + 32].hex()
        digest = buf[r.pos + 32:r.pos + 64].hex()
        r.pos += 64
        rank, seed = r.unpack("<Iq")
        shape = r.dims()
        m = r.one("<I")
        models = []
        for _ in range(m):
            models.append(CpModel(tuple(r.floats(d * rank).reshape(d, rank) for d in shape)))
        r.done()
        return cls(dhash, rank, digest, seed, models)


def cache_path(cache_dir, dataset: TensorDataset, rank: int, opts: CpOptions) -> Path:
    return Path(cache_dir) / f"{dataset.content_hash[:16]}-r{rank}-{options_digest(opts)[:12]}.dcpc"


def cache_store(cache: CpCache, path) -> None:
    atomic_write(path, cache.to_bytes())


def cache_load(
    dataset: TensorDataset,
    rank: int,
    opts: CpOptions | None = None,
    cache_dir=None,
    threads: int = 1,
) -> CpCache:
    """CP representations of ``dataset`` at ``rank``, from disk when possible.

    A hit needs the same dataset hash, rank and CP options. Unreadable or
    mismatching cache files are replaced.
    """
    opts = opts or CpOptions()
    dhash, digest = dataset.content_hash, options_digest(opts)
    path = cache_path(cache_dir, dataset, rank, opts) if cache_dir is not None else None
    if path is not None and path.exists():
        try:
            cache = CpCache.from_bytes(path.read_bytes())
            if cache.matches(dhash, rank, digest) and len(cache.models) == dataset.m:
                return cache
            log.warning("stale CP cache %s, recomputing", path)
        except DataError as e:
            log.warning("corrupt CP cache %s (%s), recomputing", path, e)
    models = cp_mod.factorize_dataset(list(dataset.data), rank, opts, threads=threads)
    cache = CpCache(dhash, rank, digest, opts.seed, models)
    if path is not None:
        cache_store(cache, path)
    return cache


# --------------------------------------------------------------------------
# models and Gram matrices


def _models_bytes(models: Sequence[CpModel]) -> bytes:
    out = [struct.pack("<I", len(models))]
    if models:
        out.append(_dims_bytes(models[0].shape))
        for m in models:
            for f in m.factors:
                out.append(np.ascontiguousarray(f, dtype="<f8").tobytes())
    return b"".join(out)


def _read_models(r: _Reader, rank: int) -> list[CpModel]:
    count = r.one("<I")
    if count == 0 or rank == 0:
        return [None] * count
    shape = r.dims()
    return [
        CpModel(tuple(r.floats(d * rank).reshape(d, rank) for d in shape)) for _ in range(count)
    ]


def svm_to_bytes(model: SvmModel) -> bytes:
    kind = model.spec.kind if model.spec is not None else None
    sigma = model.spec.sigma if model.spec is not None and model.spec.sigma is not None else np.nan
    m = len(model.alphas)
    return b"".join([
        b"DSVM",
        struct.pack("<HBdIddI", VERSION, _KIND_CODE[kind], sigma, model.rank or 0, model.C, model.bias, m),
        np.asarray(model.alphas, dtype="<f8").tobytes(),
        np.asarray(model.labels, dtype="i1").tobytes(),
        _models_bytes(model.support_models),
    ])


def svm_from_bytes(buf: bytes) -> SvmModel:
    r = _Reader(buf, "DSVM model")
    r.header(b"DSVM")
    code, sigma, rank, C, bias, m = r.unpack("<BdIddI")
    if code not in _CODE_KIND:
        raise FormatError(f"unknown kernel code {code}", offset=6)
    kind = _CODE_KIND[code]
    alphas = r.floats(m)
    r.need(m)
    labels = np.frombuffer(buf, dtype="i1", count=m, offset=r.pos).astype(np.int64)
    if not np.all(np.isin(labels, (-1, 1))):
        raise LabelError("DSVM model: label outside {-1, +1}", offset=r.pos)
    r.pos += m
    support = _read_models(r, rank)
    if support and not rank:
        raise FormatError("DSVM model: support representations without a rank")
    r.done()
    spec = None if kind is None else KernelSpec(kind, sigma if kind == "rbf" else None)
    return SvmModel(alphas, labels, bias, C, spec, rank or None, tuple(support))


def gram_to_bytes(g: GramMatrix) -> bytes:
    dhash = bytes.fromhex(g.dataset_hash) if g.dataset_hash else bytes(32)
    sigma = g.spec.sigma if g.spec.sigma is not None else np.nan
    return b"".join([
        b"DGRM",
        struct.pack("<HBdI", VERSION, _KIND_CODE[g.spec.kind], sigma, g.rank),
        dhash,
        struct.pack("<I", g.size),
        np.ascontiguousarray(g.entries, dtype="<f8").tobytes(),
    ])


def gram_from_bytes(buf: bytes) -> GramMatrix:
    r = _Reader(buf, "DGRM matrix")
    r.header(b"DGRM")
    code, sigma, rank = r.unpack("<BdI")
    if _CODE_KIND.get(code) not in ("linear", "rbf"):
        raise FormatError(f"unknown kernel code {code}", offset=6)
    r.need(32)
    dhash = buf[r.pos:r.pos + 32]
    r.pos += 32
    m = r.one("<I")
    entries = r.floats(m * m).reshape(m, m)
    r.done()
    kind = _CODE_KIND[code]
    spec = KernelSpec(kind, sigma if kind == "rbf" else None)
    return GramMatrix(entries, spec, rank, None if dhash == bytes(32) else dhash.hex())


def save_svm(model: SvmModel, path) -> None:
    atomic_write(path, svm_to_bytes(model))


def load_svm(path) -> SvmModel:
    return svm_from_bytes(Path(path).read_bytes())


def save_gram(g: GramMatrix, path) -> None:
    atomic_write(path, gram_to_bytes(g))


def load_gram(path) -> GramMatrix:
    return gram_from_bytes(Path(path).read_bytes())
