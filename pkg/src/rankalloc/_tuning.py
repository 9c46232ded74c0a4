"""Process-level allocator tuning.

The tape allocates and frees many multi-megabyte activation buffers per
step. With glibc's default 128 KiB mmap threshold each one is mmap'd and
munmap'd individually, so every op pays page-fault plus zero-fill costs
(measured ~3x slowdown end to end). Raising the threshold keeps those
buffers on the reusable heap. No-op on non-glibc platforms; set
RANKALLOC_NO_MALLOC_TUNING=1 to skip.
"""

import ctypes
import os

_M_MMAP_THRESHOLD = -3
_M_TRIM_THRESHOLD = -1


def tune_allocator() -> bool:
    if os.environ.get("RANKALLOC_NO_MALLOC_TUNING"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 28)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 28)
        return True
    except Exception:
        return False
