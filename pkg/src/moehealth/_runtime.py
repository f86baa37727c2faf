"""Process-level tuning for the many short-lived multi-megabyte arrays of training."""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def keep_large_allocations_on_heap() -> bool:
    """Stop glibc from mmapping (and page-faulting) every large array afresh.

    Training allocates the same few-MB recurrent buffers thousands of times;
    serving them from the heap roughly halves step time. No-op off glibc.
    Returns True when the allocator settings were applied.
    """
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or None)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, 32 * 1024 * 1024) == 1
    ok = mallopt(_M_TRIM_THRESHOLD, 256 * 1024 * 1024) == 1 and ok
    _done = ok
    return ok
