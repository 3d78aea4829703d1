"""Generate the miniature RML2016-layout fixture archive.

Layout matches the public RML2016 pickles: a dict keyed by
(modulation_name, snr_db) holding float32 arrays of shape (N, 2, 128),
serialized with pickle protocol 2. Also emits an expected-values JSON used by
the converter tests (float32 values are exact in JSON doubles).

Run from this directory: python3 make_fixture.py
"""

import json
import pickle

import numpy as np

MODS = ["QPSK", "BPSK", "GFSK"]
SNRS = [-8, 10]
N = 3
L = 128

rng = np.random.default_rng(20240717)
archive = {}
for mod in MODS:
    for snr in SNRS:
        archive[(mod, snr)] = rng.normal(size=(N, 2, L)).astype(np.float32)

with open("rml_mini.pkl", "wb") as fh:
    pickle.dump(archive, fh, protocol=2)

expected = {
    "mods": MODS,
    "snrs": SNRS,
    "per_key": N,
    "length": L,
    "entries": [
        {
            "mod": mod,
            "snr": snr,
            "shape": list(archive[(mod, snr)].shape),
            "sum": float(archive[(mod, snr)].astype(np.float64).sum()),
            "first_row_head": [float(v) for v in archive[(mod, snr)][0, 0, :4]],
        }
        for mod in MODS
        for snr in SNRS
    ],
}
with open("rml_mini.expected.json", "w") as fh:
    json.dump(expected, fh, indent=2)
print(f"wrote rml_mini.pkl ({len(archive)} keys) and rml_mini.expected.json")


# ---------------------------------------------------------------------------
# Python-2-style pickle: the original RML2016 archives were written by py2's
# cPickle, whose protocol-2 streams carry SHORT_BINSTRING/BINSTRING opcodes
# that python3 never emits. Hand-assemble such a stream so the converter's
# py2 path stays covered, and prove it valid by loading it back here.
# ---------------------------------------------------------------------------

import struct


def p2_str(s: bytes) -> bytes:
    if len(s) < 256:
        return b"U" + struct.pack("<B", len(s)) + s
    return b"T" + struct.pack("<I", len(s)) + s


def p2_int(v: int) -> bytes:
    return b"J" + struct.pack("<i", v)


def p2_dtype_f4() -> bytes:
    return (
        b"cnumpy\ndtype\n"
        + p2_str(b"f4") + b"K\x00K\x01\x87R"
        + b"(K\x03" + p2_str(b"<") + b"NNNJ\xff\xff\xff\xffJ\xff\xff\xff\xffK\x00tb"
    )


def p2_ndarray(arr: np.ndarray) -> bytes:
    shape = b"".join(b"K" + struct.pack("<B", d) for d in arr.shape)
    return (
        b"cnumpy.core.multiarray\n_reconstruct\ncnumpy\nndarray\nK\x00\x85"
        + p2_str(b"b") + b"\x87R"
        + b"(K\x01(" + shape + b"t" + p2_dtype_f4() + b"\x89"
        + p2_str(arr.astype("<f4").tobytes()) + b"tb"
    )


py2_archive = {
    ("AM-DSB", -4): rng.normal(size=(1, 2, 4)).astype(np.float32),
    ("WBFM", 6): rng.normal(size=(2, 2, 4)).astype(np.float32),
}
stream = b"\x80\x02}("
for (mod, snr), arr in py2_archive.items():
    stream += p2_str(mod.encode()) + p2_int(snr) + b"\x86" + p2_ndarray(arr)
stream += b"u."

loaded = pickle.loads(stream, encoding="latin1")
assert set(loaded) == set(py2_archive)
for key, arr in py2_archive.items():
    assert np.array_equal(loaded[key], arr), key
with open("rml_py2_mini.pkl", "wb") as fh:
    fh.write(stream)
py2_expected = {
    "entries": [
        {"mod": mod, "snr": snr, "shape": list(arr.shape),
         "values": [float(v) for v in arr.ravel()]}
        for (mod, snr), arr in py2_archive.items()
    ]
}
with open("rml_py2_mini.expected.json", "w") as fh:
    json.dump(py2_expected, fh, indent=2)
print(f"wrote rml_py2_mini.pkl ({len(py2_archive)} keys, py2-style opcodes)")
