"""Plain-text key=value files, shared by configs, manifests, and checkpoints."""

from __future__ import annotations

import os
from pathlib import Path


def read_kv(path) -> dict[str, str]:
    """Parse ``key=value`` lines; '#' starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, mapping: dict, atomic: bool = True) -> None:
    """Write keys in the given order; atomic=True writes a temp file then renames."""
    path = Path(path)
    body = "".join(f"{k}={v}\n" for k, v in mapping.items())
    if not atomic:
        path.write_text(body, encoding="utf-8")
        return
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(body, encoding="utf-8")
    os.replace(tmp, path)
