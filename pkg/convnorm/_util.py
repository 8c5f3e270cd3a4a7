"""Internal utilities."""

import contextlib
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import IO, Iterator, Union


def get_logger(name: str) -> logging.Logger:
    """Get logger, with fancy format and configured for stdout."""

    logger = logging.getLogger(name)
    if not logger.handlers:
        sh = logging.StreamHandler(sys.stdout)
        f = logging.Formatter(
            "[%(asctime)s] %(levelname)s [%(name)s.%(funcName)s:%(lineno)d] %(message)s",
            datefmt=r"%d-%b-%Y %H:%M:%S",
        )
        sh.setFormatter(f)
        logger.addHandler(sh)

    return logger


def set_debug(logger: logging.Logger, debug: bool) -> None:
    """DEBUG level if `debug`, otherwise defer to the parent loggers."""
    if debug:  # pragma: no cover
        logger.setLevel(logging.DEBUG)
    else:
        logger.setLevel(logging.NOTSET)


@contextlib.contextmanager
def atomic_write(path: Union[str, Path], mode: str = "w") -> Iterator[IO]:
    """Write to a temporary file next to `path`, renaming it into place on success.

    On error the temporary file is removed and `path` is left untouched.
    """
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
