"""Collects one PASS/FAIL/WARN line per acceptance criterion for the terminal summary."""

import contextlib
import warnings

LINES = []


def record(number, title, status, detail=""):
    line = f"criterion {number:>2} {status:<4} {title}" + (f": {detail}" if detail else "")
    LINES.append(line)
    print(line)
    return line


@contextlib.contextmanager
def criterion(number, title):
    """Record PASS when the block finishes and FAIL when an assertion escapes it.

    The block may set ``info["detail"]`` for the report, or ``info["warn"]`` to
    downgrade the outcome to a logged warning.
    """
    info = {}
    try:
        yield info
    except BaseException as exc:
        message = str(exc).splitlines()[0] if str(exc) else repr(exc)
        record(number, title, "FAIL", info.get("detail") or message)
        raise
    if info.get("warn"):
        record(number, title, "WARN", info["warn"])
        warnings.warn(f"criterion {number}: {info['warn']}", stacklevel=3)
    else:
        record(number, title, "PASS", info.get("detail", ""))
