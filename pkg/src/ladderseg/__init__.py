"""ladderseg: ladder-style dense segmentation nets on a checkpointed CPU autodiff core."""

__version__ = "0.1.0"


def set_num_threads(n):
    """Bound BLAS worker pools; n=1 gives the single-threaded baseline."""
    import threadpoolctl

    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    threadpoolctl.threadpool_limits(limits=int(n))
