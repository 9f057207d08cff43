import asyncio
from concurrent.futures import ThreadPoolExecutor


async def _gather_in_threads(func, items, threads):
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        tasks = [loop.run_in_executor(pool, func, item) for item in items]
        return await asyncio.gather(*tasks)


def run_parallel(func, items, threads=1):
    """Applies ``func`` to every item; results come back in input order.

    With ``threads > 1`` the calls are spread over a thread pool, so ``func``
    must not mutate shared state.
    """
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    return list(asyncio.run(_gather_in_threads(func, items, threads)))
