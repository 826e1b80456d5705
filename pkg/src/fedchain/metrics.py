"""Per-round accuracy rows and their CSV form."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .fedavg import combo_label

CSV_HEADER = ("round", "peer", "combo", "accuracy", "selected")

DECENTRALIZED = "decentralized"
CONSIDER = "consider"
NOT_CONSIDER = "not_consider"


@dataclass(frozen=True)
class MetricsRow:
    round: int
    peer_id: int
    members: tuple[int, ...]
    accuracy: float
    selected: bool
    variant: str = DECENTRALIZED

    @property
    def combo(self) -> str:
        return combo_label(self.members)


@dataclass
class MetricsTable:
    rows: list[MetricsRow] = field(default_factory=list)
    # per-peer event counters (rejected updates, blocks mined, ...)
    counters: dict[int, dict[str, int]] = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def bump(self, peer_id: int, name: str, by: int = 1) -> None:
        self.counters[peer_id][name] += by

    def variants(self) -> list[str]:
        return sorted({r.variant for r in self.rows})

    def select(self, variant: str | None = None, peer_id: int | None = None,
               selected: bool | None = None) -> list[MetricsRow]:
        return [r for r in self.rows
                if (variant is None or r.variant == variant)
                and (peer_id is None or r.peer_id == peer_id)
                and (selected is None or r.selected == selected)]

    def accuracy(self, round: int, peer_id: int, members, variant: str = DECENTRALIZED) -> float:
        members = tuple(sorted(members))
        for r in self.rows:
            if (r.variant, r.round, r.peer_id, r.members) == (variant, round, peer_id, members):
                return r.accuracy
        raise KeyError((variant, round, peer_id, members))

    def __len__(self):
        return len(self.rows)


def emit_metrics(table: MetricsTable | list[MetricsRow], path, variant: str | None = None) -> Path:
    rows = table.select(variant) if isinstance(table, MetricsTable) else list(table)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow((r.round, r.peer_id, r.combo, f"{r.accuracy:.4f}", int(r.selected)))
    return path


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
