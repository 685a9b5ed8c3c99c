"""Channel-tagged picosecond timestamp streams: data model, TTAG1 files, coincidence search.

Times are non-negative integer picoseconds held in ``int64`` arrays. A
coincidence "within window w" always means ``|difference| <= w/2``.
"""
from __future__ import annotations

import builtins
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numba
import numpy as np

from .errors import FormatError, UnsortedError

PS_PER_NS = 1000
PS_PER_S = 10**12

MAGIC = b"TTAG1\x00"
VERSION = 1
FLAG_SORTED = 0x01
# magic, version, channel, flags, 6 reserved bytes, record count, duration
HEADER = struct.Struct("<6sHBB6xQQ")
HEADER_SIZE = HEADER.size  # 32
RECORD_SIZE = 8

TAG_DTYPE = np.dtype([("time", "<i8"), ("channel", "u1")])


class TagRecord(NamedTuple):
    channel: int
    time: int


def _first_unsorted(times: np.ndarray) -> int:
    """Index of the first element smaller than its predecessor, or -1."""
    if times.size < 2:
        return -1
    bad = np.flatnonzero(times[1:] < times[:-1])
    return int(bad[0]) + 1 if bad.size else -1


def require_sorted(times: np.ndarray, name: str = "stream") -> None:
    i = _first_unsorted(times)
    if i >= 0:
        raise UnsortedError(f"{name} is not time-sorted at index {i}", index=i)


@dataclass(frozen=True)
class TagStream:
    """Sorted timestamps of one channel plus provenance metadata."""

    channel: int
    times: np.ndarray
    duration: int
    origin: str = "simulated"
    seed: int | None = None

    def __post_init__(self):
        t = np.ascontiguousarray(self.times, dtype=np.int64)
        if not 0 <= self.channel <= 255:
            raise ValueError(f"channel id must fit in 8 bits, got {self.channel}")
        if self.origin not in ("simulated", "imported"):
            raise ValueError(f"origin must be 'simulated' or 'imported', got {self.origin!r}")
        require_sorted(t, f"channel {self.channel}")
        if t.size and t[0] < 0:
            raise ValueError("timestamps must be non-negative")
        if self.duration < 0 or (t.size and self.duration < t[-1]):
            raise ValueError(f"duration {self.duration} ps is shorter than the last timestamp")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "duration", int(self.duration))

    def __len__(self):
        return self.times.size

    @property
    def rate(self) -> float:
        """Mean count rate in counts per second."""
        return self.times.size / (self.duration / PS_PER_S) if self.duration > 0 else 0.0

    def records(self):
        return [TagRecord(self.channel, int(t)) for t in self.times]

    def shifted(self, offset_ps: int) -> "TagStream":
        """Copy with every timestamp (and the duration) moved by ``offset_ps``."""
        return TagStream(self.channel, self.times + offset_ps, self.duration + max(offset_ps, 0), self.origin, self.seed)

    def __eq__(self, other):
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.channel == other.channel
            and self.duration == other.duration
            and self.origin == other.origin
            and self.seed == other.seed
            and np.array_equal(self.times, other.times)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# TTAG1 files


def encode_tags(stream: TagStream, sorted_flag: bool = True) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, stream.channel, FLAG_SORTED if sorted_flag else 0, len(stream), stream.duration)
    return header + stream.times.astype("<u8").tobytes()


def decode_tags(buf: bytes, origin: str = "imported") -> TagStream:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes", offset=len(buf))
    magic, version, channel, flags, count, duration = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=6)
    expected = HEADER_SIZE + RECORD_SIZE * count
    if len(buf) < expected:
        whole = (len(buf) - HEADER_SIZE) // RECORD_SIZE
        raise FormatError(f"truncated record {whole} of {count}", offset=HEADER_SIZE + whole * RECORD_SIZE)
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after {count} records", offset=expected)
    raw = np.frombuffer(buf, dtype="<u8", count=count, offset=HEADER_SIZE)
    if raw.size and raw.max() > np.iinfo(np.int64).max:
        i = int(np.argmax(raw > np.iinfo(np.int64).max))
        raise FormatError("timestamp exceeds the signed 64-bit range", offset=HEADER_SIZE + i * RECORD_SIZE)
    times = raw.astype(np.int64)
    if flags & FLAG_SORTED:
        i = _first_unsorted(times)
        if i >= 0:
            raise FormatError(f"sorted flag set but record {i} precedes record {i - 1}", offset=HEADER_SIZE + i * RECORD_SIZE)
    else:
        times = np.sort(times, kind="stable")
    if times.size and duration < times[-1]:
        raise FormatError(f"duration {duration} ps shorter than last timestamp", offset=24)
    return TagStream(channel, times, duration, origin=origin)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to a sibling temp file, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tags(stream: TagStream, destination) -> None:
    """Write a TTAG1 file (atomically if ``destination`` is a path)."""
    data = encode_tags(stream)
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        atomic_write_bytes(destination, data)


def read_tags(source) -> TagStream:
    if hasattr(source, "read"):
        buf = source.read()
    else:
        with open(source, "rb") as fh:
            buf = fh.read()
    return decode_tags(buf)


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, nogil=True)
def _count_pairs(a, b, lo2, hi2):
    # pairs with lo2 <= 2*(b - a) <= hi2
    n = 0
    j0 = 0
    nb = b.size
    for i in range(a.size):
        ai = a[i]
        while j0 < nb and 2 * (b[j0] - ai) < lo2:
            j0 += 1
        j = j0
        while j < nb and 2 * (b[j] - ai) <= hi2:
            n += 1
            j += 1
    return n


@numba.njit(cache=True, nogil=True)
def _fill_pairs(a, b, lo2, hi2, out):
    n = 0
    j0 = 0
    nb = b.size
    for i in range(a.size):
        ai = a[i]
        while j0 < nb and 2 * (b[j0] - ai) < lo2:
            j0 += 1
        j = j0
        while j < nb and 2 * (b[j] - ai) <= hi2:
            out[n, 0] = i
            out[n, 1] = j
            n += 1
            j += 1
    return n


@numba.njit(cache=True, nogil=True)
def _correlate(a, b, lo, bw, nbins, counts):
    # histogram b - a into [lo + k*bw, lo + (k+1)*bw); out-of-range differences are skipped
    hi = lo + nbins * bw
    j0 = 0
    nb = b.size
    for i in range(a.size):
        ai = a[i]
        while j0 < nb and b[j0] - ai < lo:
            j0 += 1
        j = j0
        while j < nb:
            d = b[j] - ai
            if d >= hi:
                break
            counts[(d - lo) // bw] += 1
            j += 1


def _as_times(x):
    if isinstance(x, TagStream):
        return x.times
    return np.ascontiguousarray(x, dtype=np.int64)


def coincidence_indices(a, b, window: int, offset: int = 0) -> np.ndarray:
    """Index pairs (i, j) with |b[j] - a[i] - offset| <= window/2, ordered by i then j."""
    ta, tb = _as_times(a), _as_times(b)
    require_sorted(ta, "a")
    require_sorted(tb, "b")
    if window <= 0:
        raise ValueError("window must be > 0")
    # compare doubled integers so odd windows keep the exact half-window rule
    lo2 = 2 * int(offset) - int(window)
    hi2 = 2 * int(offset) + int(window)
    n = _count_pairs(ta, tb, lo2, hi2)
    out = np.empty((n, 2), dtype=np.int64)
    _fill_pairs(ta, tb, lo2, hi2, out)
    return out


def coincidences(a, b, window: int, offset: int = 0) -> np.ndarray:
    """Every (time_a, time_b) with |time_b - time_a - offset| <= window/2.

    Single forward two-pointer sweep; result is an (n, 2) int64 array ordered by time_a.
    """
    ta, tb = _as_times(a), _as_times(b)
    idx = coincidence_indices(ta, tb, window, offset)
    return np.column_stack([ta[idx[:, 0]], tb[idx[:, 1]]]) if idx.size else np.empty((0, 2), dtype=np.int64)


# ---------------------------------------------------------------------------
# histograms


@dataclass
class Histogram:
    """Counts of ``time_b - time_a`` in bins ``[lo + k*bin_width, lo + (k+1)*bin_width)`` (ps)."""

    bin_width: int
    lo: int
    hi: int
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0
    total: int = 0
    accidental_floor: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be > 0")
        if (self.hi - self.lo) % self.bin_width:
            raise ValueError("range must be a whole number of bins")
        if self.counts.size != (self.hi - self.lo) // self.bin_width:
            raise ValueError("counts length does not match the bin count")

    @property
    def nbins(self) -> int:
        return self.counts.size

    @property
    def edges(self) -> np.ndarray:
        return self.lo + self.bin_width * np.arange(self.nbins + 1, dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        """Bin centers in ps (float)."""
        return self.lo + self.bin_width * (np.arange(self.nbins) + 0.5)

    def __add__(self, other: "Histogram") -> "Histogram":
        if (self.bin_width, self.lo, self.hi) != (other.bin_width, other.lo, other.hi):
            raise ValueError("histograms have different binning")
        return Histogram(
            self.bin_width,
            self.lo,
            self.hi,
            self.counts + other.counts,
            self.underflow + other.underflow,
            self.overflow + other.overflow,
            self.total + other.total,
        )


def snap_range(bin_width: int, lo: int, hi: int) -> tuple[int, int, int]:
    """Grow [lo, hi] outward, symmetrically about its midpoint, to a whole number of bins.

    Returns ``(lo, hi, nbins)``. An odd leftover picosecond goes to the high side.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    if hi <= lo:
        raise ValueError("range must satisfy lo < hi")
    span = hi - lo
    nbins = -(-span // bin_width)
    extra = nbins * bin_width - span
    lo2 = lo - extra // 2
    return lo2, lo2 + nbins * bin_width, nbins


def histogram(pairs, bin_width: int, range: tuple[int, int]) -> Histogram:
    """Bin ``time_b - time_a`` of an (n, 2) pair array; out-of-range values are tallied, not dropped."""
    lo, hi, nbins = snap_range(int(bin_width), int(range[0]), int(range[1]))
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    d = pairs[:, 1] - pairs[:, 0]
    under = int(np.count_nonzero(d < lo))
    over = int(np.count_nonzero(d >= hi))
    inside = d[(d >= lo) & (d < hi)]
    counts = np.bincount((inside - lo) // bin_width, minlength=nbins).astype(np.int64)
    return Histogram(int(bin_width), lo, hi, counts, under, over, int(d.size))


def _threads() -> int:
    env = os.environ.get("HOMLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def correlate(a, b, bin_width: int, range: tuple[int, int], chunks: int | None = None, threads: int | None = None) -> Histogram:
    """Two-fold histogram of ``b - a`` without materializing the pairs.

    ``a`` is split into ``chunks`` contiguous pieces that may run on separate
    threads; per-chunk histograms are summed, so the result is bin-identical
    to a single pass. Only differences inside the range are counted; ``total``
    is left at zero.
    """
    ta, tb = _as_times(a), _as_times(b)
    require_sorted(ta, "a")
    require_sorted(tb, "b")
    lo, hi, nbins = snap_range(int(bin_width), int(range[0]), int(range[1]))
    threads = threads or _threads()
    chunks = chunks or threads
    bounds = np.linspace(0, ta.size, max(1, chunks) + 1).astype(np.int64)

    def run(k):
        counts = np.zeros(nbins, dtype=np.int64)
        sa = ta[bounds[k] : bounds[k + 1]]
        if sa.size:
            # start b at the first element that can pair with this chunk
            j = int(np.searchsorted(tb, sa[0] + lo, side="left"))
            _correlate(sa, tb[j:], lo, int(bin_width), nbins, counts)
        return counts

    if threads > 1 and len(bounds) > 2:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, builtins.range(len(bounds) - 1)))
    else:
        parts = [run(k) for k in builtins.range(len(bounds) - 1)]
    return Histogram(int(bin_width), lo, hi, np.sum(parts, axis=0))



# ---------------------------------------------------------------------------
# merging and n-fold search


def merge_sorted(streams: Sequence[TagStream]) -> np.ndarray:
    """Globally time-ordered structured array of (time, channel); ties go to the lower channel."""
    streams = sorted(streams, key=lambda s: s.channel)
    for s in streams:
        require_sorted(s.times, f"channel {s.channel}")
    total = sum(len(s) for s in streams)
    out = np.empty(total, dtype=TAG_DTYPE)
    if not total:
        return out
    times = np.concatenate([s.times for s in streams])
    chans = np.concatenate([np.full(len(s), s.channel, dtype=np.uint8) for s in streams])
    # inputs are concatenated in channel order, so a stable sort on time keeps channel order on ties
    order = np.argsort(times, kind="stable")
    out["time"] = times[order]
    out["channel"] = chans[order]
    return out


@numba.njit(cache=True, nogil=True)
def _nfold(times, chans, k, window, out):
    # times/chans: merged stream. heads[c] = index into merged stream of channel c's
    # earliest unconsumed tag; we walk each channel's subsequence via next_same.
    n = times.size
    next_same = np.full(n, -1, dtype=np.int64)
    last = np.full(k, -1, dtype=np.int64)
    first = np.full(k, -1, dtype=np.int64)
    for i in range(n):
        c = chans[i]
        if last[c] >= 0:
            next_same[last[c]] = i
        else:
            first[c] = i
        last[c] = i
    heads = first.copy()
    m = 0
    while True:
        # anchor: earliest head (lowest index in merged order breaks time ties by channel)
        anchor = -1
        for c in range(k):
            h = heads[c]
            if h < 0:
                return m
            if anchor < 0 or h < anchor:
                anchor = h
        t0 = times[anchor]
        ok = True
        for c in range(k):
            if times[heads[c]] - t0 > window:
                ok = False
                break
        if ok:
            for c in range(k):
                out[m, c] = times[heads[c]]
                heads[c] = next_same[heads[c]]
            m += 1
        else:
            c = chans[anchor]
            heads[c] = next_same[heads[c]]


def nfold(streams: Sequence[TagStream], window: int) -> np.ndarray:
    """Groups with one tag per channel and max - min <= window.

    Greedy sweep over the merged stream: the earliest unconsumed tag is the
    anchor; if every channel's earliest unconsumed tag lies within ``window``
    of it, those tags form an event and are consumed, otherwise the anchor is
    discarded. Returns an (n, k) int64 array, columns in ascending channel order.
    """
    if len(streams) < 2:
        raise ValueError("nfold needs at least two streams")
    streams = sorted(streams, key=lambda s: s.channel)
    chans = [s.channel for s in streams]
    if len(set(chans)) != len(chans):
        raise ValueError("nfold streams must have distinct channels")
    merged = merge_sorted(streams)
    remap = np.zeros(256, dtype=np.int64)
    remap[chans] = np.arange(len(chans))
    local = remap[merged["channel"]]
    cap = min(len(s) for s in streams)
    out = np.empty((cap, len(streams)), dtype=np.int64)
    m = _nfold(np.ascontiguousarray(merged["time"]), local, len(streams), int(window), out)
    return out[:m].copy()


def half_window_ok(diff: int, window: int) -> bool:
    """The library-wide coincidence rule |diff| <= window/2."""
    return 2 * abs(int(diff)) <= int(window)


def ns_to_ps(x: float) -> int:
    return int(round(x * PS_PER_NS))


def ps_to_ns(x):
    return np.asarray(x) / PS_PER_NS if np.ndim(x) else x / PS_PER_NS
