"""Allocation accounting for benchmark runs.

The harness reports algorithmic memory as the high-water mark of bytes
live in tracked arrays, not process RSS: RSS depends on the allocator,
page cache, and interpreter internals, while this counter is a pure
function of the computation and therefore identical across repeat runs.

Any routine whose memory footprint matters allocates its large arrays
through `new_array` (or registers them with `track`).  Bytes are added on
allocation and removed when the array is garbage collected.  Weights and
small bookkeeping arrays are deliberately left untracked; they are
constant in sequence length.

Arrays bigger than the spill threshold are backed by an unlinked
temporary file instead of RAM, so quadratic-size intermediates can exceed
physical memory.  The backing store never changes the counted bytes.
"""

from __future__ import annotations

import os
import tempfile
import threading
import weakref

import numpy as np

SPILL_BYTES_ENV = "SEQSCALE_SPILL_BYTES"
SPILL_DIR_ENV = "SEQSCALE_SPILL_DIR"


def _available_ram() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return 8 << 30


def spill_threshold() -> int:
    """Bytes above which a tracked array is file-backed.

    Defaults to half the currently available RAM; override with the
    SEQSCALE_SPILL_BYTES environment variable (0 forces everything to
    disk, a huge value disables spilling).
    """
    env = os.environ.get(SPILL_BYTES_ENV)
    if env is not None:
        return int(env)
    return _available_ram() // 2


class AllocationTracker:
    """Byte counter with a high-water mark over the tracked arrays."""

    def __init__(self):
        self._lock = threading.Lock()
        self._epoch = 0
        self.live_bytes = 0
        self.peak_bytes = 0

    def reset(self) -> None:
        """Zero the counters; finalizers of earlier arrays stop counting."""
        with self._lock:
            self._epoch += 1
            self.live_bytes = 0
            self.peak_bytes = 0

    def _add(self, nbytes: int) -> int:
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes
            return self._epoch

    def _release(self, nbytes: int, epoch: int) -> None:
        with self._lock:
            if epoch == self._epoch:
                self.live_bytes -= nbytes

    def track(self, arr: np.ndarray) -> np.ndarray:
        """Count `arr` until it is collected.  Pass owning arrays, not views."""
        nbytes = int(arr.nbytes)
        epoch = self._add(nbytes)
        weakref.finalize(arr, self._release, nbytes, epoch)
        return arr

    def adopt_bytes(self, nbytes: int) -> None:
        """Count bytes of arrays that outlive the measured region (inputs)."""
        self._add(int(nbytes))


tracker = AllocationTracker()


def _spill_array(shape, dtype) -> np.ndarray:
    spill_dir = os.environ.get(SPILL_DIR_ENV) or tempfile.gettempdir()
    fobj = tempfile.NamedTemporaryFile(prefix="seqscale-", dir=spill_dir, delete=False)
    try:
        arr = np.memmap(fobj, dtype=dtype, mode="w+", shape=shape)
    finally:
        # unlink immediately; the mapping keeps the blocks alive until freed
        os.unlink(fobj.name)
        fobj.close()
    return arr


def new_array(shape, dtype=np.float32) -> np.ndarray:
    """Tracked uninitialized array; file-backed above the spill threshold."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
    if nbytes > spill_threshold():
        arr = _spill_array(shape, dtype)
    else:
        arr = np.empty(shape, dtype=dtype)
    return tracker.track(arr)


def zeros(shape, dtype=np.float32) -> np.ndarray:
    arr = new_array(shape, dtype)
    arr[...] = 0
    return arr
