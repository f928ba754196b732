"""Small file helpers shared by the pipeline stages."""
from __future__ import annotations

import os
import tempfile


def atomic_write_text(path, text: str) -> None:
    """Write UTF-8 text via a temp file + rename so readers never see partial output."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt_real(x: float) -> str:
    """Canonical 9-significant-digit text form used by all JSONL artifacts."""
    return format(float(x), ".9g")
