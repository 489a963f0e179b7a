"""MetricRecord and the append-only JSON-lines metrics log."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["MetricRecord", "MetricsWriter", "read_metrics"]


@dataclass
class MetricRecord:
    """One named scalar/vector result with provenance tags."""

    name: str
    value: object  # scalar or list
    tags: dict = field(default_factory=dict)
    run_id: str = ""
    timestamp: float = field(default_factory=time.time)

    def key(self) -> tuple:
        return (self.run_id, self.name, tuple(sorted(self.tags.items())))

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "value": self.value,
                "tags": self.tags,
                "run_id": self.run_id,
                "timestamp": self.timestamp,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "MetricRecord":
        d = json.loads(line)
        return cls(
            name=d["name"],
            value=d["value"],
            tags=d.get("tags", {}),
            run_id=d.get("run_id", ""),
            timestamp=d.get("timestamp", 0.0),
        )


class MetricsWriter:
    """Appends records to metrics.jsonl, enforcing (run_id, name, tags)
    uniqueness within this log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._seen = set()
        if self.path.exists():
            records, _ = read_metrics(self.path)
            self._seen = {r.key() for r in records}

    def write(self, record: MetricRecord):
        key = record.key()
        if key in self._seen:
            raise ValueError(f"duplicate metric record: {key}")
        self._seen.add(key)
        with open(self.path, "a") as f:
            f.write(record.to_json() + "\n")

    def write_all(self, records):
        for r in records:
            self.write(r)


def read_metrics(path) -> tuple:
    """Read a metrics log; malformed lines are skipped and counted."""
    records, skipped = [], 0
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(MetricRecord.from_json(line))
            except (json.JSONDecodeError, KeyError):
                skipped += 1
    return records, skipped
