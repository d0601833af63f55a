"""Process-level runtime knobs."""

import contextlib

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def single_threaded_blas():
    """Limit BLAS pools to one thread for the enclosed block.

    The network math here runs on matrices of at most a few hundred rows,
    where threaded GEMM dispatch costs more than it saves.
    """
    if threadpool_limits is None:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)
