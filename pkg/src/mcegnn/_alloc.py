"""Process-level allocator tuning for many short-lived mid-sized arrays.

glibc serves allocations above its mmap threshold with fresh ``mmap`` calls,
so every temporary of a few hundred kB pays page faults. Raising the
threshold keeps those buffers on the heap. Linux/glibc only; a no-op elsewhere.
"""
import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(mmap_threshold=256 << 20, trim_threshold=512 << 20):
    global _done
    if _done or not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, mmap_threshold) == 1
        ok = libc.mallopt(_M_TRIM_THRESHOLD, trim_threshold) == 1 and ok
    except (OSError, AttributeError):
        return False
    _done = ok
    return ok
