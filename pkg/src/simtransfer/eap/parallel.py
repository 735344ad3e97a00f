import logging

import dask

logger = logging.getLogger(__name__)


def compute(tasks, n_workers=1):
    """Evaluate a list of ``dask.delayed`` tasks and return their results in
    order.

    One worker runs everything synchronously in the calling thread. With more
    workers an active ``distributed`` client is used when there is one,
    otherwise the threaded scheduler.
    """
    tasks = list(tasks)
    if not tasks:
        return []
    if int(n_workers) <= 1:
        return list(dask.compute(*tasks, scheduler="synchronous"))
    try:
        from distributed import get_client
        client = get_client()
    except (ImportError, ValueError):
        return list(
            dask.compute(*tasks, scheduler="threads",
                         num_workers=int(n_workers)))
    logger.debug("computing %d tasks on %s", len(tasks), client)
    return list(dask.compute(*tasks, scheduler=client.get))
