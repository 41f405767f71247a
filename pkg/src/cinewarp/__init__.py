"""Deformable cine-volume registration with physics-regularized coordinate networks."""

__version__ = "0.1.0"


def _tune_allocator():
    """Keep large numpy blocks on the heap instead of per-allocation mmap.

    The training loop churns through hundreds of ~0.5 MB arrays per
    iteration; with glibc's default 128 KB mmap threshold every one of them
    pays mmap/munmap page-fault costs.  Raising the threshold roughly halves
    iteration time.  No-op where unavailable.
    """
    import ctypes
    import ctypes.util

    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        m_mmap_threshold = -3
        m_trim_threshold = -1
        libc.mallopt(m_mmap_threshold, 256 * 1024 * 1024)
        libc.mallopt(m_trim_threshold, 256 * 1024 * 1024)
    except (OSError, AttributeError):
        pass


_tune_allocator()
