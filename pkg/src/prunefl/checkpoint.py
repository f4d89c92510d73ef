"""Binary checkpoint of a ``MaskedParams``.

Layout (all little-endian)::

    magic     4s   b"PFNN"
    version   u16  1
    flags     u16  bit 0: seed present
    seed      i64  init seed (0 when absent)
    count     u32  number of parameterized layers
    count x layer entry:
        prunable  u8
        ndim      u8
        dims      ndim x u32   weight shape
        n_bias    u32
    count x layer payload:
        mask      ceil(size / 8) bytes, LSB-first bitmap   (prunable layers only)
        weights   size x f64
        bias      n_bias x f64

Values are stored as float64, so a save/load round trip is bit-exact.
"""
import struct

import numpy as np

from .nn import MaskedParams

MAGIC = b"PFNN"
VERSION = 1
_HEAD = struct.Struct("<4sHHqI")


class CheckpointError(ValueError):
    pass


def dumps(params: MaskedParams) -> bytes:
    has_seed = params.seed is not None
    out = [_HEAD.pack(MAGIC, VERSION, int(has_seed), params.seed if has_seed else 0,
                      len(params.weights))]
    for w, b, p in zip(params.weights, params.biases, params.prunable):
        out.append(struct.pack("<BB", int(p), w.ndim))
        out.append(struct.pack(f"<{w.ndim}I", *w.shape))
        out.append(struct.pack("<I", b.size))
    for w, m, b, p in zip(params.weights, params.masks, params.biases, params.prunable):
        if p:
            out.append(np.packbits(m.ravel(), bitorder="little").tobytes())
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> MaskedParams:
    if len(buf) < _HEAD.size:
        raise CheckpointError("truncated header")
    magic, version, flags, seed, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    off = _HEAD.size
    table = []
    try:
        for _ in range(count):
            prunable, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            (nb,) = struct.unpack_from("<I", buf, off)
            off += 4
            table.append((bool(prunable), shape, nb))
    except struct.error as e:
        raise CheckpointError("truncated layer table") from e
    ws, ms, bs, ps = [], [], [], []
    for prunable, shape, nb in table:
        size = int(np.prod(shape))
        need = (-(-size // 8) if prunable else 0) + 8 * size + 8 * nb
        if off + need > len(buf):
            raise CheckpointError("truncated payload")
        if prunable:
            nbytes = -(-size // 8)
            bits = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, off), count=size,
                                 bitorder="little")
            off += nbytes
            mask = bits.astype(bool).reshape(shape)
        else:
            mask = np.ones(shape, dtype=bool)
        w = np.frombuffer(buf, "<f8", size, off).reshape(shape)
        off += 8 * size
        b = np.frombuffer(buf, "<f8", nb, off)
        off += 8 * nb
        ws.append(w)
        ms.append(mask)
        bs.append(b)
        ps.append(prunable)
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes")
    return MaskedParams(ws, ms, bs, ps, seed=seed if flags & 1 else None)


def save(params: MaskedParams, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps(params))


def load(path) -> MaskedParams:
    with open(path, "rb") as f:
        return loads(f.read())
