"""Deadline sleeping shared by the harness, simulator, and replay pacing."""

import time


def sleep_until(deadline: float, spin_window_s: float = 0.002) -> None:
    """Sleep until time.perf_counter() reaches *deadline*.

    Coarse sleep followed by a short spin; plain time.sleep overshoots by
    around a millisecond, which matters for paced emission fidelity.
    """
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        if remaining > spin_window_s:
            time.sleep(remaining - spin_window_s)
        else:
            time.sleep(0)
