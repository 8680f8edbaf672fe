"""Salt deposit segmentation."""
import os

if os.environ.get("SALTSEG_THREADS"):
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=max(1, int(os.environ["SALTSEG_THREADS"])))
