"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

from contextlib import contextmanager

RESULTS: dict[int, str] = {}


@contextmanager
def record(number: int, title: str):
    """Run a criterion body; ``detail`` list entries are appended to its line."""
    detail: list[str] = []
    try:
        yield detail
    except BaseException:
        RESULTS[number] = f"criterion {number} FAIL  {title}" + (f"  [{'; '.join(detail)}]" if detail else "")
        print(RESULTS[number])
        raise
    RESULTS[number] = f"criterion {number} PASS  {title}" + (f"  [{'; '.join(detail)}]" if detail else "")
    print(RESULTS[number])
