import os
import tempfile
from pathlib import Path
from typing import Union

from loguru import logger


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> Path:
    """
    Write bytes to `path` through a temporary file in the same directory.

    A reader never observes a partially written file: the temporary file is
    flushed, fsynced and renamed over the destination.

    Args:
        path: Destination file
        data: Full file contents

    Returns:
        The destination path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug(f"Wrote {len(data)} bytes to {path}")
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))
