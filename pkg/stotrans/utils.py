# stotrans/utils.py
"""
Shared helpers: logging setup, seed derivation, output-directory guards and
text wrapping for printable reports.
"""

import hashlib
import logging
from pathlib import Path
from typing import List, Optional, Union

from stotrans.errors import ConfigError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE = "run.log"


def configure_logging(out_dir: Optional[Union[str, Path]] = None, level: int = logging.INFO) -> None:
    """Log to stderr and, when an output directory is given, to ``out_dir/run.log``."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if out_dir is not None:
        handlers.append(logging.FileHandler(Path(out_dir) / LOG_FILE, encoding="utf-8"))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def derive_seed(seed: int, component: str) -> int:
    """Stable 63-bit seed for ``component`` under the top-level ``seed``."""
    digest = hashlib.sha256(f"{int(seed)}:{component}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def ensure_out_dir(out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    if out.exists() and not out.is_dir():
        raise ConfigError([f"output path {out} exists and is not a directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def output_path(out_dir: Union[str, Path], name: str) -> Path:
    """Path of ``name`` inside ``out_dir``; anything resolving outside it is refused."""
    root = Path(out_dir).resolve()
    target = (root / name).resolve()
    if root != target and root not in target.parents:
        raise ConfigError([f"refusing to write {name} outside the output directory {root}"])
    return target


def text_wrap(text: str, width: int) -> List[str]:
    """Rudimentary word wrap for PDF lines to prevent overflow."""
    words, out, line = str(text).split(), [], ""
    for w in words:
        if line and len(line) + len(w) + 1 > width:
            out.append(line)
            line = w
        else:
            line = f"{line} {w}".strip()
    if line:
        out.append(line)
    return out
