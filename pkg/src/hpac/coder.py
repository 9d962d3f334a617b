"""Binary-exact entropy coding: a 32-bit range coder plus Exp-Golomb bypass.

The range coder follows the classic carry-free construction with
underflow counting (reference arithmetic coding); it consumes cumulative
16-bit tables (cdf[0] = 0, cdf[-1] = 65536, strictly increasing).  Escape
residuals are written as order-0 exponential Golomb codes through the
coder's bypass path so the payload stays a single stream.
"""

from __future__ import annotations

import numpy as np

STATE_SIZE = 32
MAX_RANGE = 1 << STATE_SIZE
MIN_RANGE = (MAX_RANGE >> 2) + 2
MAX_TOTAL = MIN_RANGE
MASK = MAX_RANGE - 1
TOP_MASK = MAX_RANGE >> 1
SECOND_MASK = TOP_MASK >> 1

_BYPASS_CDF = np.array([0, 1 << 15, 1 << 16], dtype=np.int64)


class BitSink:
    """Growable MSB-first bit buffer."""

    def __init__(self):
        self._bytes = bytearray()
        self._cur = 0
        self._nbits = 0

    def write_bit(self, bit):
        self._cur = (self._cur << 1) | (bit & 1)
        self._nbits += 1
        if self._nbits == 8:
            self._bytes.append(self._cur)
            self._cur = 0
            self._nbits = 0

    def write_uint(self, value, nbits):
        for i in reversed(range(nbits)):
            self.write_bit((value >> i) & 1)

    def __len__(self):
        return len(self._bytes) * 8 + self._nbits

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._nbits:
            out.append(self._cur << (8 - self._nbits))
        return bytes(out)


class BitSource:
    """Reads bits MSB-first; reads past the end yield zeros."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read_bit(self):
        byte_i, bit_i = divmod(self._pos, 8)
        self._pos += 1
        if byte_i >= len(self._data):
            return 0
        return (self._data[byte_i] >> (7 - bit_i)) & 1

    def read_uint(self, nbits):
        v = 0
        for _ in range(nbits):
            v = (v << 1) | self.read_bit()
        return v


def _check_cdf(cdf, sym):
    total = int(cdf[-1])
    if total > MAX_TOTAL:
        raise ValueError("cdf total too large for the coder state")
    lo = int(cdf[sym])
    hi = int(cdf[sym + 1])
    if lo == hi:
        raise ValueError(f"symbol {sym} has zero frequency")
    return lo, hi, total


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.high = MASK
        self._underflow = 0
        self.sink = BitSink()
        self._done = False

    def _shift(self):
        bit = self.low >> (STATE_SIZE - 1)
        self.sink.write_bit(bit)
        for _ in range(self._underflow):
            self.sink.write_bit(bit ^ 1)
        self._underflow = 0

    def encode_symbol(self, sym, cdf):
        if self._done:
            raise RuntimeError("encoder already finished")
        symlow, symhigh, total = _check_cdf(cdf, sym)
        rng = self.high - self.low + 1
        newlow = self.low + symlow * rng // total
        newhigh = self.low + symhigh * rng // total - 1
        self.low, self.high = newlow, newhigh
        while ((self.low ^ self.high) & TOP_MASK) == 0:
            self._shift()
            self.low = (self.low << 1) & MASK
            self.high = ((self.high << 1) & MASK) | 1
        while (self.low & ~self.high & SECOND_MASK) != 0:
            self._underflow += 1
            self.low = (self.low << 1) ^ TOP_MASK
            self.high = ((self.high ^ TOP_MASK) << 1) | TOP_MASK | 1

    def write_bit(self, bit):
        """Bypass path: a raw bit at (almost exactly) one bit of cost."""
        self.encode_symbol(bit & 1, _BYPASS_CDF)

    def finish(self) -> bytes:
        if not self._done:
            self.sink.write_bit(1)
            for _ in range(self._underflow):
                self.sink.write_bit(0)
            self._done = True
        return self.sink.getvalue()


class RangeDecoder:
    def __init__(self, data: bytes):
        self.source = BitSource(data)
        self.low = 0
        self.high = MASK
        self.code = self.source.read_uint(STATE_SIZE)

    def decode_symbol(self, cdf):
        total = int(cdf[-1])
        if total > MAX_TOTAL:
            raise ValueError("cdf total too large for the coder state")
        rng = self.high - self.low + 1
        offset = self.code - self.low
        value = ((offset + 1) * total - 1) // rng
        # binary search: cdf[sym] <= value < cdf[sym + 1]
        sym = int(np.searchsorted(cdf, value, side="right")) - 1
        symlow = int(cdf[sym])
        symhigh = int(cdf[sym + 1])
        newlow = self.low + symlow * rng // total
        newhigh = self.low + symhigh * rng // total - 1
        self.low, self.high = newlow, newhigh
        while ((self.low ^ self.high) & TOP_MASK) == 0:
            self.code = ((self.code << 1) & MASK) | self.source.read_bit()
            self.low = (self.low << 1) & MASK
            self.high = ((self.high << 1) & MASK) | 1
        while (self.low & ~self.high & SECOND_MASK) != 0:
            self.code = (
                (self.code & TOP_MASK)
                | ((self.code << 1) & (MASK >> 1))
                | self.source.read_bit()
            )
            self.low = (self.low << 1) ^ TOP_MASK
            self.high = ((self.high ^ TOP_MASK) << 1) | TOP_MASK | 1
        return sym

    def read_bit(self):
        return self.decode_symbol(_BYPASS_CDF)


def encode_expgolomb(sink, v):
    """Order-0 exponential Golomb; `sink` needs write_bit."""
    if v < 0:
        raise ValueError("value must be nonnegative")
    x = v + 1
    n = x.bit_length()
    for _ in range(n - 1):
        sink.write_bit(0)
    for i in reversed(range(n)):
        sink.write_bit((x >> i) & 1)


def decode_expgolomb(source):
    z = 0
    while source.read_bit() == 0:
        z += 1
        if z > 64:
            raise ValueError("malformed Exp-Golomb code")
    x = 1
    for _ in range(z):
        x = (x << 1) | source.read_bit()
    return x - 1
