"""Synthetic embedding streams and the dataset / manifest file formats.

Binary dataset layout (little-endian)::

    "HVST" | u16 version=1 | u32 d | u32 K | u32 n_targets | u32 target[n_targets]
    | K x (u32 len, utf-8 name) | u64 n | n x (u64 id, u32 label, f32[d] embedding)
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"HVST"
VERSION = 1


class DatasetFormatError(ValueError):
    """A dataset, header, or manifest file failed validation.

    ``offset`` is the byte offset (binary) or 1-based data row (CSV) of the
    offending record, when one can be named.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at record offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class SensorSample:
    id: int
    round: int
    t: int
    embedding: np.ndarray
    true_label: int


@dataclass(frozen=True)
class DatasetHeader:
    d: int
    K: int
    class_names: tuple[str, ...]
    target_classes: tuple[int, ...]

    def __post_init__(self):
        if len(self.class_names) != self.K:
            raise DatasetFormatError(
                f"class_names has {len(self.class_names)} entries, expected K={self.K}"
            )
        if not self.target_classes:
            raise DatasetFormatError("target_classes must be nonempty")
        for c in self.target_classes:
            if not 0 <= c < self.K:
                raise DatasetFormatError(f"target class {c} out of range for K={self.K}")


@dataclass(frozen=True)
class StreamManifest:
    rounds: tuple[tuple[int, ...], ...]

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)


@dataclass(frozen=True)
class SynthConfig:
    d: int = 64
    K: int = 5
    n_per_class: int = 100_000
    target_prevalence: float = 0.02
    cluster_spread: float = 1.0
    drift_per_round: float = 0.0
    n_rounds: int = 10
    steps_per_round: int = 1000
    stride: int = 1
    seed: int = 0
    target_classes: tuple[int, ...] = (0,)
    class_margin: float = 3.0
    n_seed_per_class: int = 18
    # a large pool of common examples and a few target seeds
    n_seed_nontarget: int | None = 200
    test_size: int = 1000
    test_target_fraction: float = 0.5
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        checks = [
            ("d", self.d >= 1),
            ("K", self.K >= 2),
            ("n_per_class", self.n_per_class >= 1),
            ("target_prevalence", 0.0 < self.target_prevalence < 1.0),
            ("cluster_spread", self.cluster_spread >= 0.0),
            ("drift_per_round", self.drift_per_round >= 0.0),
            ("n_rounds", self.n_rounds >= 1),
            ("steps_per_round", self.steps_per_round >= 1),
            ("stride", self.stride >= 1),
            ("seed", 0 <= self.seed < 2**64),
            ("class_margin", self.class_margin > 0.0),
            ("n_seed_per_class", self.n_seed_per_class >= 0),
            ("test_size", self.test_size >= 1),
            ("test_target_fraction", 0.0 <= self.test_target_fraction <= 1.0),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"invalid synth config value for {key!r}: {getattr(self, key)!r}")
        if not self.target_classes or any(not 0 <= c < self.K for c in self.target_classes):
            raise ConfigError(f"invalid synth config value for 'target_classes': {self.target_classes!r}")
        if len(set(self.target_classes)) == self.K:
            raise ConfigError("invalid synth config value for 'target_classes': no non-target class left")
        if self.n_seed_nontarget is not None and self.n_seed_nontarget < 0:
            raise ConfigError("invalid synth config value for 'n_seed_nontarget'")
        if self.class_names is not None and len(self.class_names) != self.K:
            raise ConfigError("invalid synth config value for 'class_names': need K entries")


def class_means(cfg: SynthConfig) -> np.ndarray:
    """Class means at ``class_margin`` along distinct coordinate axes."""
    means = np.zeros((cfg.K, cfg.d))
    if cfg.d >= cfg.K:
        means[np.arange(cfg.K), np.arange(cfg.K)] = cfg.class_margin
    else:
        # not enough axes: fixed pseudo-random directions
        dirs = np.random.default_rng(0x5EED).standard_normal((cfg.K, cfg.d))
        means = cfg.class_margin * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return means


def drift_direction(cfg: SynthConfig) -> np.ndarray:
    """Unit vector from the first target mean toward the first non-target mean."""
    means = class_means(cfg)
    t = cfg.target_classes[0]
    other = next(c for c in range(cfg.K) if c not in cfg.target_classes)
    u = means[other] - means[t]
    return u / np.linalg.norm(u)


def gen_synthetic(cfg: SynthConfig):
    """Generate a labelled dataset, its per-round stream, seed set and test set.

    Returns ``(header, samples, manifest, seed_ids, test_ids)``. Ids are
    assigned sequentially: seed set, then final test set, then the stream.
    The final test set is drawn at the last round's drift position.
    """
    rng = np.random.default_rng(cfg.seed)
    means = class_means(cfg)
    u = drift_direction(cfg)
    targets = tuple(sorted(set(cfg.target_classes)))
    nontargets = tuple(c for c in range(cfg.K) if c not in targets)
    n0_target = cfg.n_seed_per_class
    n0_other = cfg.n_seed_per_class if cfg.n_seed_nontarget is None else cfg.n_seed_nontarget

    seed_labels = np.concatenate(
        [np.full(n0_target if c in targets else n0_other, c, dtype=np.int64) for c in range(cfg.K)]
    )
    n_test_target = int(round(cfg.test_size * cfg.test_target_fraction))
    test_labels = np.concatenate(
        [
            np.asarray(targets)[np.arange(n_test_target) % len(targets)],
            np.asarray(nontargets)[np.arange(cfg.test_size - n_test_target) % len(nontargets)],
        ]
    ).astype(np.int64)

    T, R = cfg.steps_per_round, cfg.n_rounds
    is_target = rng.random((R, T)) < cfg.target_prevalence
    pick_t = rng.integers(0, len(targets), size=(R, T))
    pick_o = rng.integers(0, len(nontargets), size=(R, T))
    stream_labels = np.where(
        is_target, np.asarray(targets)[pick_t], np.asarray(nontargets)[pick_o]
    ).reshape(-1)

    counts = np.bincount(
        np.concatenate([seed_labels, test_labels, stream_labels]), minlength=cfg.K
    )
    if counts.max() > cfg.n_per_class:
        c = int(counts.argmax())
        raise ConfigError(
            f"class {c} needs {int(counts[c])} samples but n_per_class={cfg.n_per_class}"
        )
    n_total = int(counts.sum())
    if n_total >= 2**64 - 1:
        raise ConfigError("requested sample count exceeds the 64-bit id space")

    stream_rounds = np.repeat(np.arange(R), T)
    all_labels = np.concatenate([seed_labels, test_labels, stream_labels])
    all_rounds = np.concatenate(
        [np.zeros(len(seed_labels), dtype=np.int64), np.full(len(test_labels), R - 1), stream_rounds]
    )
    mu = means[all_labels]
    shift = np.isin(all_labels, targets)[:, None] * (all_rounds * cfg.drift_per_round)[:, None] * u
    noise = rng.standard_normal((n_total, cfg.d)) * cfg.cluster_spread
    # store values that are exactly representable in the f32 file format
    emb = (mu + shift + noise).astype(np.float32).astype(np.float64)

    ids = np.arange(1, n_total + 1, dtype=np.uint64)
    n_seed, n_test = len(seed_labels), len(test_labels)
    stream_t = np.tile(np.arange(T), R)
    samples = []
    for j in range(n_total):
        if j < n_seed + n_test:
            rnd, t = (0 if j < n_seed else R - 1), 0
        else:
            k = j - n_seed - n_test
            rnd, t = int(stream_rounds[k]), int(stream_t[k])
        samples.append(SensorSample(int(ids[j]), rnd, t, emb[j], int(all_labels[j])))

    names = cfg.class_names or tuple(
        (f"target_{c}" if c in targets else f"class_{c}") for c in range(cfg.K)
    )
    header = DatasetHeader(cfg.d, cfg.K, tuple(names), targets)
    seed_ids = [int(i) for i in ids[:n_seed]]
    test_ids = [int(i) for i in ids[n_seed:n_seed + n_test]]
    stream_ids = ids[n_seed + n_test:].reshape(R, T)
    manifest = StreamManifest(tuple(tuple(int(i) for i in row) for row in stream_ids))
    return header, samples, manifest, seed_ids, test_ids


def validate_samples(header: DatasetHeader, samples: Iterable[SensorSample]) -> None:
    seen = set()
    for k, s in enumerate(samples):
        if s.embedding.shape != (header.d,):
            raise DatasetFormatError(
                f"dimension mismatch: id {s.id} has {s.embedding.shape[0]} values, header d={header.d}", k
            )
        if s.id in seen:
            raise DatasetFormatError(f"duplicate id {s.id}", k)
        if not 0 <= s.true_label < header.K:
            raise DatasetFormatError(f"label {s.true_label} out of range for id {s.id}", k)
        seen.add(s.id)


# -- binary format ---------------------------------------------------------------

def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("emb", "<f4", (d,))])


def write_dataset(header: DatasetHeader, samples: Sequence[SensorSample], path) -> None:
    """Write ``samples`` in the binary format, or CSV if ``path`` ends in ``.csv``."""
    path = Path(path)
    validate_samples(header, samples)
    if path.suffix.lower() == ".csv":
        _write_csv(header, samples, path)
        return
    parts = [MAGIC, struct.pack("<HIII", VERSION, header.d, header.K, len(header.target_classes))]
    parts.append(struct.pack(f"<{len(header.target_classes)}I", *header.target_classes))
    for name in header.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(struct.pack("<Q", len(samples)))
    rec = np.zeros(len(samples), dtype=_record_dtype(header.d))
    for k, s in enumerate(samples):
        rec[k] = (s.id, s.true_label, s.embedding)
    parts.append(rec.tobytes())
    path.write_bytes(b"".join(parts))


def load_dataset(path):
    """Read a dataset written by :func:`write_dataset`.

    Loaded samples carry ``round=0, t=0``; stream positions live in the manifest.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise DatasetFormatError("file truncated in header", pos)
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<H")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    d, K, n_targets = take("<III")
    targets = take(f"<{n_targets}I")
    names = []
    for _ in range(K):
        (ln,) = take("<I")
        if pos + ln > len(buf):
            raise DatasetFormatError("file truncated in class names", pos)
        names.append(buf[pos:pos + ln].decode("utf-8"))
        pos += ln
    header = DatasetHeader(d, K, tuple(names), tuple(targets))
    (n,) = take("<Q")
    dt = _record_dtype(d)
    expected = n * dt.itemsize
    remaining = len(buf) - pos
    if remaining != expected:
        base = struct.calcsize("<QI")
        if n and remaining % n == 0 and (remaining // n - base) % 4 == 0:
            # every record has the same wrong width: the first one is already off
            raise DatasetFormatError(
                f"dimension mismatch: record holds {(remaining // n - base) // 4} floats, header d={d}", pos
            )
        bad = pos + (min(remaining, expected) // dt.itemsize) * dt.itemsize
        raise DatasetFormatError(
            f"dimension mismatch: {n} records of d={d} need {expected} bytes, found {remaining}", bad
        )
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=pos)
    samples = []
    seen = {}
    for k in range(n):
        sid = int(rec["id"][k])
        off = pos + k * dt.itemsize
        if sid in seen:
            raise DatasetFormatError(f"duplicate id {sid}", off)
        seen[sid] = k
        label = int(rec["label"][k])
        if label >= K:
            raise DatasetFormatError(f"label {label} out of range for id {sid}", off)
        samples.append(SensorSample(sid, 0, 0, rec["emb"][k].astype(np.float64), label))
    return header, samples


# -- CSV format ------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".header.json")


def _write_csv(header: DatasetHeader, samples, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"e{k}" for k in range(header.d)])
        for s in samples:
            w.writerow([s.id, s.true_label] + [format(float(np.float32(v)), ".9g") for v in s.embedding])
    _sidecar(path).write_text(
        json.dumps(
            {
                "d": header.d,
                "K": header.K,
                "class_names": list(header.class_names),
                "target_classes": list(header.target_classes),
            },
            indent=2,
        )
    )


def _load_csv(path: Path):
    side = _sidecar(path)
    if not side.exists():
        raise DatasetFormatError(f"missing CSV header sidecar {side.name}")
    meta = json.loads(side.read_text())
    header = DatasetHeader(
        int(meta["d"]), int(meta["K"]), tuple(meta["class_names"]), tuple(meta["target_classes"])
    )
    samples = []
    seen = set()
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        head = next(rows, None)
        expected_head = ["id", "label"] + [f"e{k}" for k in range(header.d)]
        if head != expected_head:
            raise DatasetFormatError(
                f"CSV header does not match d={header.d}: got {len(head or []) - 2} embedding columns", 0
            )
        for row_no, row in enumerate(rows, start=1):
            if len(row) != header.d + 2:
                raise DatasetFormatError(
                    f"dimension mismatch: row has {len(row) - 2} embedding values, header d={header.d}",
                    row_no,
                )
            sid = int(row[0])
            if sid in seen:
                raise DatasetFormatError(f"duplicate id {sid}", row_no)
            seen.add(sid)
            label = int(row[1])
            if not 0 <= label < header.K:
                raise DatasetFormatError(f"label {label} out of range for id {sid}", row_no)
            emb = np.array([float(v) for v in row[2:]], dtype=np.float32).astype(np.float64)
            samples.append(SensorSample(sid, 0, 0, emb, label))
    return header, samples


# -- manifest --------------------------------------------------------------------

def write_manifest(path, manifest: StreamManifest, seed_ids, test_ids) -> None:
    doc = {
        "rounds": [list(r) for r in manifest.rounds],
        "seed_ids": list(seed_ids),
        "test_ids": list(test_ids),
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_manifest(path):
    doc = json.loads(Path(path).read_text())
    extra = set(doc) - {"rounds", "seed_ids", "test_ids"}
    if extra:
        raise DatasetFormatError(f"unknown manifest keys: {sorted(extra)}")
    try:
        manifest = StreamManifest(tuple(tuple(int(i) for i in r) for r in doc["rounds"]))
        return manifest, [int(i) for i in doc["seed_ids"]], [int(i) for i in doc["test_ids"]]
    except KeyError as exc:
        raise DatasetFormatError(f"manifest missing key {exc.args[0]!r}") from None


def check_manifest(manifest: StreamManifest, seed_ids, test_ids, known_ids) -> None:
    """Raise if the manifest references unknown ids or mixes stream, seed and test ids."""
    known = set(known_ids)
    stream = [i for r in manifest.rounds for i in r]
    for name, ids in (("stream", stream), ("seed_ids", seed_ids), ("test_ids", test_ids)):
        missing = [i for i in ids if i not in known]
        if missing:
            raise DatasetFormatError(f"{name} references unknown id {missing[0]}")
    s, a, b = set(stream), set(seed_ids), set(test_ids)
    if len(s) != len(stream):
        raise DatasetFormatError("stream contains a repeated id")
    for x, y, label in ((s, b, "stream/test"), (a, b, "seed/test"), (s, a, "stream/seed")):
        both = x & y
        if both:
            raise DatasetFormatError(f"{label} id sets overlap at id {min(both)}")
    if len({len(r) for r in manifest.rounds}) > 1:
        raise DatasetFormatError("rounds have unequal lengths")
