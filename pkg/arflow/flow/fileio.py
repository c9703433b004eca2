from __future__ import annotations

import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Iterator


@contextmanager
def atomic_write(path: Path | str, mode: str = "wb") -> Iterator[IO]:
    """
    Writes to a temporary file next to `path` and renames it into place on success.

    An exception inside the block removes the temporary file and leaves any existing `path` untouched.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, mode) as handle:
            yield handle
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def write_bytes_atomic(path: Path | str, payload: bytes) -> None:
    with atomic_write(path, "wb") as handle:
        handle.write(payload)


def write_text_atomic(path: Path | str, text: str) -> None:
    with atomic_write(path, "w") as handle:
        handle.write(text)
