"""Synthetic modulated-signal datasets, preprocessing, and the neutral file format.

Signals are complex baseband waveforms stored as two real rows (I then Q).
The generator covers ten digital schemes with rectangular pulse shaping and
AWGN; every record is normalized to unit average power and stored as float32,
so file round trips are bit-exact.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    CountMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC = b"DTCSIG01"
FORMAT_VERSION = 1

_LABEL_NONE = 0xFFFF
_SNR_NONE = 0x7FFF


@dataclass
class SignalRecord:
    """One radio signal: 2 x L real samples plus optional label and SNR tag."""

    iq: np.ndarray
    label: int | None = None
    snr_db: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.iq = np.asarray(self.iq)
        if self.iq.ndim != 2 or self.iq.shape[0] != 2 or self.iq.shape[1] < 1:
            raise ValueError(f"iq must be 2 x L with L >= 1, got shape {self.iq.shape}")
        if not np.all(np.isfinite(self.iq)):
            raise ValueError("iq contains non-finite values")


@dataclass
class SignalDataset:
    """Ordered collection of SignalRecords plus class metadata."""

    records: list[SignalRecord]
    class_names: list[str]
    signal_length: int
    labeled: bool

    def __len__(self):
        return len(self.records)

    @property
    def num_classes(self):
        return len(self.class_names)

    def validate(self):
        for i, rec in enumerate(self.records):
            if rec.iq.shape[1] != self.signal_length:
                raise ValueError(
                    f"record {i} has length {rec.iq.shape[1]}, dataset declares {self.signal_length}"
                )
            if self.labeled and rec.label is None:
                raise ValueError(f"dataset is labeled but record {i} has no label")
            if rec.label is not None and not (0 <= rec.label < self.num_classes):
                raise ValueError(
                    f"record {i} label {rec.label} out of range [0, {self.num_classes})"
                )
        return self

    def stacked(self):
        """All signals as one (n, 2, L) float64 array."""
        return np.stack([rec.iq for rec in self.records]).astype(np.float64)

    def labels(self):
        """Label vector, or None when any record is unlabeled."""
        if any(rec.label is None for rec in self.records):
            return None
        return np.array([rec.label for rec in self.records], dtype=np.int64)


def dataset_equal(a: SignalDataset, b: SignalDataset) -> bool:
    """Field-wise equality over everything the neutral format stores."""
    if (
        a.signal_length != b.signal_length
        or a.labeled != b.labeled
        or a.class_names != b.class_names
        or len(a) != len(b)
    ):
        return False
    for ra, rb in zip(a.records, b.records):
        if ra.label != rb.label or ra.snr_db != rb.snr_db:
            return False
        if ra.iq.dtype != rb.iq.dtype or not np.array_equal(ra.iq, rb.iq):
            return False
    return True


# ---------------------------------------------------------------------------
# Modulation schemes
# ---------------------------------------------------------------------------

@dataclass
class ModulationScheme:
    """A named modulator: maps a random symbol stream to complex baseband samples."""

    name: str
    samples_per_symbol: int
    parameters: dict = field(default_factory=dict)

    def constellation(self):
        return self.parameters.get("constellation")


def _psk(order, phase0=0.0):
    return np.exp(1j * (phase0 + 2.0 * np.pi * np.arange(order) / order))


def _qam(side):
    levels = np.arange(-(side - 1), side, 2, dtype=np.float64)
    pts = (levels[:, None] + 1j * levels[None, :]).ravel()
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def _pam(order):
    levels = np.arange(-(order - 1), order, 2, dtype=np.float64).astype(complex)
    return levels / np.sqrt(np.mean(np.abs(levels) ** 2))


SCHEME_NAMES = (
    "BPSK",
    "QPSK",
    "8PSK",
    "16QAM",
    "64QAM",
    "4PAM",
    "8ASK",
    "CPFSK",
    "GFSK-approx",
    "OQPSK",
)


def make_scheme(name: str, samples_per_symbol: int = 8) -> ModulationScheme:
    """Build one of the supported schemes by name."""
    if samples_per_symbol < 1:
        raise ValueError("samples_per_symbol must be >= 1")
    key = name.upper() if name.lower() != "gfsk-approx" else "GFSK-approx"
    params: dict = {}
    if key == "BPSK":
        params["constellation"] = np.array([1.0 + 0j, -1.0 + 0j])
    elif key == "QPSK":
        params["constellation"] = _psk(4, np.pi / 4)
    elif key == "8PSK":
        params["constellation"] = _psk(8)
    elif key == "16QAM":
        params["constellation"] = _qam(4)
    elif key == "64QAM":
        params["constellation"] = _qam(8)
    elif key == "4PAM":
        params["constellation"] = _pam(4)
    elif key == "8ASK":
        params["constellation"] = _pam(8)
    elif key == "CPFSK":
        params["modulation_index"] = 0.5
    elif key == "GFSK-approx":
        params["modulation_index"] = 0.5
        params["freq_smoothing"] = np.array([0.25, 0.5, 0.25])
    elif key == "OQPSK":
        pass
    else:
        raise ValueError(f"unknown modulation scheme: {name!r}")
    return ModulationScheme(name=key, samples_per_symbol=samples_per_symbol,
                            parameters=params)


def _modulate(scheme: ModulationScheme, length: int, rng: np.random.Generator):
    """One noiseless complex waveform of `length` samples, unit nominal power."""
    sps = scheme.samples_per_symbol
    nsym = math.ceil(length / sps)
    name = scheme.name
    if name in ("BPSK", "QPSK", "8PSK", "16QAM", "64QAM", "4PAM", "8ASK"):
        const = scheme.constellation()
        syms = const[rng.integers(0, len(const), size=nsym)]
        wave = np.repeat(syms, sps)
    elif name in ("CPFSK", "GFSK-approx"):
        h = scheme.parameters["modulation_index"]
        syms = 2.0 * rng.integers(0, 2, size=nsym) - 1.0
        freq = np.repeat(syms, sps) * (np.pi * h / sps)
        kernel = scheme.parameters.get("freq_smoothing")
        if kernel is not None:
            freq = np.convolve(freq, kernel, mode="same")
        wave = np.exp(1j * np.cumsum(freq))
    elif name == "OQPSK":
        amp = 1.0 / np.sqrt(2.0)
        i_syms = (2.0 * rng.integers(0, 2, size=nsym) - 1.0) * amp
        q_syms = (2.0 * rng.integers(0, 2, size=nsym) - 1.0) * amp
        i_wave = np.repeat(i_syms, sps)
        q_wave = np.repeat(q_syms, sps)
        delay = sps // 2
        q_wave = np.concatenate([np.full(delay, q_wave[0]), q_wave[:-delay] if delay else q_wave])
        wave = i_wave + 1j * q_wave
    else:  # pragma: no cover - make_scheme rejects unknown names
        raise ValueError(f"unknown scheme {name!r}")
    return wave[:length]


def generate_synthetic(
    schemes: list[ModulationScheme],
    per_class: int,
    length: int,
    snr_db: int,
    seed: int,
) -> SignalDataset:
    """Labeled synthetic dataset: per_class records per scheme, class-major order.

    Each record is a random symbol stream through the scheme's modulator with
    rectangular pulses, complex AWGN at snr_db relative to unit signal power,
    then per-record normalization to unit average power. Deterministic in seed.
    """
    if not schemes:
        raise ValueError("scheme list is empty")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    for s in schemes:
        if length < s.samples_per_symbol:
            raise ValueError(
                f"length {length} too small for one {s.name} symbol ({s.samples_per_symbol} samples)"
            )

    rng = np.random.default_rng(seed)
    noise_power = 10.0 ** (-snr_db / 10.0)
    records = []
    for ci, scheme in enumerate(schemes):
        for ri in range(per_class):
            wave = _modulate(scheme, length, rng)
            noise = rng.normal(scale=np.sqrt(noise_power / 2.0), size=(2, length))
            x = wave + noise[0] + 1j * noise[1]
            x = x / np.sqrt(np.mean(np.abs(x) ** 2))
            iq = np.stack([x.real, x.imag]).astype(np.float32)
            records.append(
                SignalRecord(iq=iq, label=ci, snr_db=int(snr_db),
                             source_id=f"synth:{scheme.name}:{ri}")
            )
    return SignalDataset(
        records=records,
        class_names=[s.name for s in schemes],
        signal_length=length,
        labeled=True,
    ).validate()


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def adjust_length(signal: np.ndarray, target_len: int) -> np.ndarray:
    """Resize a 2 x L signal to 2 x target_len.

    Shorter signals are tiled and truncated (column j <- column j mod L);
    longer ones are compressed by equal-interval sampling
    (column j <- column floor(j * L / target_len)).
    """
    signal = np.asarray(signal)
    if signal.ndim != 2 or signal.shape[0] != 2:
        raise ValueError(f"expected a 2 x L signal, got shape {signal.shape}")
    src = signal.shape[1]
    if src < 1 or target_len < 1:
        raise ValueError("signal lengths must be positive")
    if src == target_len:
        return signal
    if src < target_len:
        idx = np.arange(target_len) % src
    else:
        idx = (np.arange(target_len) * src) // target_len
    return signal[:, idx]


def select_categories(ds: SignalDataset, k: int, seed: int) -> SignalDataset:
    """Keep a seeded random choice of k classes, relabeled to [0, k).

    Datasets with at most k classes are returned unchanged. Selected classes
    are re-indexed in ascending original order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not ds.labeled:
        raise ValueError("select_categories needs a labeled dataset")
    if ds.num_classes <= k:
        return ds
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(ds.num_classes, size=k, replace=False))
    remap = {int(old): new for new, old in enumerate(chosen)}
    records = [
        SignalRecord(iq=rec.iq, label=remap[rec.label], snr_db=rec.snr_db,
                     source_id=rec.source_id)
        for rec in ds.records
        if rec.label in remap
    ]
    return SignalDataset(
        records=records,
        class_names=[ds.class_names[int(c)] for c in chosen],
        signal_length=ds.signal_length,
        labeled=True,
    ).validate()


def make_batches(ds: SignalDataset, m: int, seed: int, drop_last: bool = False):
    """Seeded permutation of record indices split into consecutive blocks of m."""
    if m < 2:
        raise ValueError("batch size must be >= 2 (pairwise loss needs a pair)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    batches = [perm[i:i + m] for i in range(0, len(perm), m)]
    if drop_last and batches and len(batches[-1]) < m:
        batches.pop()
    return batches


# ---------------------------------------------------------------------------
# Neutral file format
# ---------------------------------------------------------------------------

def save_neutral(ds: SignalDataset, path) -> None:
    """Write the dataset in the neutral binary format (see load_neutral)."""
    ds.validate()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIII", FORMAT_VERSION, len(ds), ds.signal_length, ds.num_classes)
    for name in ds.class_names:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
    for rec in ds.records:
        label = _LABEL_NONE if rec.label is None else rec.label
        snr = _SNR_NONE if rec.snr_db is None else rec.snr_db
        out += struct.pack("<Hh", label, snr)
        out += rec.iq.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"truncated file: ran out of bytes reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_neutral(path) -> SignalDataset:
    """Read a neutral dataset file.

    Layout (all little-endian): magic "DTCSIG01", u32 version, u32 record count,
    u32 signal length, u32 class count, then class-count length-prefixed UTF-8
    names, then per record: u16 label (0xFFFF = none), i16 snr_db (0x7FFF = none),
    2*L float32 samples (I row then Q row).
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf)
    magic = rd.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {bytes(magic)!r}")
    version = rd.u32("version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: expected {FORMAT_VERSION}, got {version}")
    n = rd.u32("record count")
    length = rd.u32("signal length")
    k = rd.u32("class count")
    names = []
    for i in range(k):
        nlen = rd.u32(f"class name {i} length")
        names.append(rd.take(nlen, f"class name {i}").decode("utf-8"))

    records = []
    for i in range(n):
        label_raw, snr_raw = struct.unpack("<Hh", rd.take(4, f"record {i} header"))
        data = rd.take(8 * length, f"record {i} samples")
        iq = np.frombuffer(data, dtype="<f4").reshape(2, length).copy()
        label = None if label_raw == _LABEL_NONE else int(label_raw)
        snr = None if snr_raw == _SNR_NONE else int(snr_raw)
        if label is not None and label >= k:
            raise CountMismatchError(
                f"record {i} label {label} disagrees with header class count {k}"
            )
        records.append(SignalRecord(iq=iq, label=label, snr_db=snr, source_id=f"rec:{i}"))
    if rd.pos != len(buf):
        raise CountMismatchError(
            f"record/header count disagreement: {len(buf) - rd.pos} bytes beyond "
            f"the {n} records declared in the header"
        )
    labeled = all(rec.label is not None for rec in records)
    return SignalDataset(records=records, class_names=names,
                         signal_length=length, labeled=labeled).validate()
