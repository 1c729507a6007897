"""
Input decoding and deterministic report output
"""

import csv
import io
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Any, Dict, Iterable, Iterator, List, Sequence, Tuple, Union

from .errors import ArgumentError, ParseError

logger = logging.getLogger(__name__)

Stream = Union[IO[bytes], IO[str]]


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC3339 timestamp (``Z`` suffix allowed) into an aware datetime"""
    value = text.strip()
    if value.endswith(("Z", "z")):
        value = value[:-1] + "+00:00"
    try:
        parsed = datetime.fromisoformat(value)
    except ValueError:
        raise ArgumentError(f"Invalid RFC3339 timestamp {text!r}") from None
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed


def format_timestamp(value: datetime) -> str:
    return value.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def iter_text_lines(stream: Stream) -> Iterator[Tuple[int, str]]:
    """Yield (line_number, stripped_text) for every line of a byte or text stream"""
    for number, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise ParseError(f"not valid UTF-8 at byte {e.start}", number, "input") from None
        yield number, raw.strip()


def iter_data_lines(stream: Stream) -> Iterator[Tuple[int, str]]:
    """Like iter_text_lines but skipping blank lines and ``#`` comments"""
    for number, text in iter_text_lines(stream):
        if not text or text.startswith("#"):
            continue
        yield number, text


def iter_csv_rows(stream: Stream, header: Sequence[str]) -> Iterator[Tuple[int, List[str]]]:
    """Yield (line_number, fields) for CSV data rows, skipping an optional header row"""
    for number, text in iter_data_lines(stream):
        row = next(csv.reader([text]))
        fields = [field.strip() for field in row]
        if [f.lower() for f in fields] == list(header):
            continue
        yield number, fields


class ReportWriter:
    """Writes report files into one output directory"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir).resolve()
        self.ensure_out_dir_exists()

    def ensure_out_dir_exists(self):
        """Ensure output directory exists"""
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """Write a CSV file with a header row"""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
        return self._save(name, buffer.getvalue())

    def write_jsonl(self, name: str, records: Iterable[Dict[str, Any]]) -> Path:
        """Write one JSON object per line"""
        lines = [json.dumps(record, sort_keys=True) for record in records]
        return self._save(name, "".join(line + "\n" for line in lines))

    def write_json(self, name: str, document: Dict[str, Any]) -> Path:
        """Write a JSON document"""
        return self._save(name, json.dumps(document, sort_keys=True, indent=2) + "\n")

    def _save(self, name: str, content: str) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8", newline="") as f:
            f.write(content)
        logger.info("wrote %s (%d bytes)", target, len(content))
        return target


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
