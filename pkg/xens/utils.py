"""
Utility functions for hashing, rounding, formatting and table files.
"""

import hashlib
import logging
import sys
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import DataError

_CHUNK = 1 << 20


def sha256_file(path: Path) -> str:
    """Hex SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    """Hex SHA-256 of a UTF-8 string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def round_half_up(value: float | Decimal) -> int:
    """
    Round to the nearest integer, halves away from zero.

    Examples:
        >>> round_half_up(Decimal("424.5"))
        425
        >>> round_half_up(18.4)
        18
    """
    if not isinstance(value, Decimal):
        value = Decimal(str(value))
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _strip_leading_zero(text: str) -> str:
    if text.startswith("0."):
        return text[1:]
    return text


def format_mean_std(mean: float, std: float) -> str:
    """
    Render a fold aggregate as mean±std, std trimmed to its leading digits.

    Examples:
        >>> format_mean_std(0.955, 0.012)
        '0.955±.01'
        >>> format_mean_std(0.994, 0.004)
        '0.994±.004'
        >>> format_mean_std(1.0, 0.0)
        '1.000'
    """
    if round(std, 3) == 0:
        return f"{mean:.3f}"
    if round(std, 2) == 0:
        return f"{mean:.3f}±{_strip_leading_zero(f'{std:.3f}')}"
    return f"{mean:.3f}±{_strip_leading_zero(f'{std:.2f}')}"


@dataclass
class Table:
    """A line-oriented table: '# key: value' metadata, header row, rows, optional footer."""
    header: list[str]
    rows: list[list[str]]
    meta: list[tuple[str, str]] = field(default_factory=list)
    footer: list[tuple[str, str]] = field(default_factory=list)

    def meta_value(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.meta + self.footer:
            if k == key:
                return v
        return default

    def meta_values(self, key: str) -> list[str]:
        return [v for k, v in self.meta + self.footer if k == key]

    def column(self, name: str) -> list[str]:
        try:
            idx = self.header.index(name)
        except ValueError:
            raise DataError(f"column '{name}' not found (have {', '.join(self.header)})") from None
        return [row[idx] for row in self.rows]


def _meta_lines(pairs: Iterable[tuple[str, str]]) -> list[str]:
    return [f"# {k}: {v}" for k, v in pairs]


def write_table(path: Path, table: Table) -> None:
    """Write a table as tab-separated UTF-8 text with '\\n' line endings."""
    lines = _meta_lines(table.meta)
    lines.append("\t".join(table.header))
    for row in table.rows:
        cells = [str(c) for c in row]
        if any("\t" in c or "\n" in c for c in cells):
            raise DataError(f"cell contains a tab or newline: {cells}")
        lines.append("\t".join(cells))
    lines.extend(_meta_lines(table.footer))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_table(path: Path) -> Table:
    """Read a table written by write_table."""
    if not path.is_file():
        raise DataError(f"table file not found: {path}")
    header: Optional[list[str]] = None
    rows: list[list[str]] = []
    meta: list[tuple[str, str]] = []
    footer: list[tuple[str, str]] = []

    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(": ")
            (meta if header is None else footer).append((key.rstrip(":"), value))
            continue
        cells = line.split("\t")
        if header is None:
            header = cells
        elif len(cells) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
        else:
            rows.append(cells)

    if header is None:
        raise DataError(f"{path}: missing header row")
    return Table(header=header, rows=rows, meta=meta, footer=footer)


def parse_bool(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes")


def ensure_output_dir(path: Path) -> Path:
    """Ensure the output directory exists."""
    path.mkdir(parents=True, exist_ok=True)
    return path


def setup_logging(level: str = "INFO") -> None:
    """Route all xens loggers to stderr; stdout stays reserved for command results."""
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        numeric = logging.INFO
    fmt = "%(asctime)s %(levelname)s %(name)s %(message)s" if numeric <= logging.DEBUG else "%(message)s"
    logging.basicConfig(level=numeric, format=fmt, stream=sys.stderr, force=True)


def chunked(items: Sequence, size: int) -> list[list]:
    """Split a sequence into consecutive chunks; the last may be short."""
    return [list(items[i:i + size]) for i in range(0, len(items), size)]
