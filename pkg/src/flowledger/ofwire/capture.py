"""Control-channel capture records.

A capture is newline-delimited JSON, one record per relayed message:
{"timestamp_us": ..., "direction": ..., "hex": ...}.  Directions name the
message's travel as seen from the middleware, e.g. "switch->controller".
The same record shape is embedded in on-chain snapshot payloads, so a capture
file can be replayed against chain contents byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterator

DIR_TO_CONTROLLER = "switch->controller"
DIR_TO_SWITCH = "controller->switch"

_DIRECTIONS = {DIR_TO_CONTROLLER, DIR_TO_SWITCH}


@dataclass(frozen=True)
class CaptureRecord:
    timestamp_us: int
    direction: str
    data: bytes

    def to_json(self) -> str:
        return json.dumps(
            {"timestamp_us": self.timestamp_us, "direction": self.direction, "hex": self.data.hex()},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "CaptureRecord":
        doc = json.loads(line)
        direction = doc["direction"]
        if direction not in _DIRECTIONS:
            raise ValueError(f"unknown capture direction: {direction!r}")
        return cls(int(doc["timestamp_us"]), direction, bytes.fromhex(doc["hex"]))


class CaptureWriter:
    """Appends capture records to a file-like object as NDJSON."""

    def __init__(self, fp: IO[str]) -> None:
        self._fp = fp
        self.count = 0

    def write(self, record: CaptureRecord) -> None:
        self._fp.write(record.to_json() + "\n")
        self.count += 1


def read_capture(fp: IO[str]) -> Iterator[CaptureRecord]:
    for line in fp:
        line = line.strip()
        if line:
            yield CaptureRecord.from_json(line)
