"""Byte-exact communication accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

BYTES_PER_PARAM = 4
MIB = 1 << 20
GIB = 1 << 30


def round_cost(param_count: int, clients: int) -> int:
    """Single-direction bytes for one round: 4 bytes per parameter per client."""
    if param_count < 0 or clients < 0:
        raise ValueError("param_count and clients must be non-negative")
    return BYTES_PER_PARAM * int(param_count) * int(clients)


def _two_places(x: Decimal) -> str:
    return str(x.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_cost(nbytes: int) -> str:
    """Binary-scaled size with MB/GB labels and two decimals, e.g. ``"5.19MB"``."""
    n = Decimal(int(nbytes))
    if nbytes >= GIB:
        return _two_places(n / GIB) + "GB"
    return _two_places(n / MIB) + "MB"


def rounded_param_count(count: int) -> int:
    """Round a parameter count to 0.01M, the precision used in published tables."""
    return int((Decimal(count) / Decimal(10_000)).quantize(Decimal(1), rounding=ROUND_HALF_UP)) * 10_000


def format_millions(count: int) -> str:
    return _two_places(Decimal(count) / Decimal(1_000_000)) + "M"


def rounded_round_cost(count: int, clients: int) -> str:
    """Per-round cost rendered from the 0.01M-rounded count, as published tables do."""
    return format_cost(round_cost(rounded_param_count(count), clients))


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    mode: str
    param_count: int
    clients: int
    upload_bytes: int
    download_bytes: int
    cumulative_bytes: int
    server_accuracy: float | None = None


CSV_FIELDS = ("round", "mode", "param_count", "clients", "upload_bytes", "download_bytes",
              "cumulative_bytes", "server_accuracy")


@dataclass
class CommLedger:
    """Per-round entries plus exact integer running totals (upload direction)."""

    entries: list[LedgerEntry] = field(default_factory=list)
    total_upload: int = 0
    total_download: int = 0

    def record(self, round_index: int, mode: str, param_count: int, clients: int,
               server_accuracy: float | None = None) -> LedgerEntry:
        cost = round_cost(param_count, clients)
        self.total_upload += cost
        self.total_download += cost
        entry = LedgerEntry(round_index, mode, param_count, clients, cost, cost,
                            self.total_upload, server_accuracy)
        self.entries.append(entry)
        return entry

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for e in self.entries:
            acc = "" if e.server_accuracy is None else repr(float(e.server_accuracy))
            w.writerow([e.round, e.mode, e.param_count, e.clients, e.upload_bytes,
                        e.download_bytes, e.cumulative_bytes, acc])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> CommLedger:
        ledger = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                acc = float(row["server_accuracy"]) if row["server_accuracy"] else None
                ledger.record(int(row["round"]), row["mode"], int(row["param_count"]),
                              int(row["clients"]), acc)
        return ledger


@dataclass(frozen=True)
class TargetCost:
    """Cumulative upload cost up to and including the round that first hit the target."""

    rounds: int
    nbytes: int
    per_round: tuple[int, ...]

    def render(self) -> str:
        return format_cost(self.nbytes)

    def render_rounded(self) -> str:
        """Sum of the rendered per-round figures (published-table convention).

        Stays in the unit of the first round's rendering.
        """
        shown = [format_cost(b) for b in self.per_round]
        unit = shown[0][-2:]
        scale = {"MB": 1, "GB": 1024}
        total = sum(Decimal(s[:-2]) * scale[s[-2:]] / scale[unit] for s in shown)
        return _two_places(total) + unit


def cost_to_target(history, target_accuracy: float) -> TargetCost | None:
    """Upload bytes spent until server accuracy first reaches ``target_accuracy``.

    ``history`` holds objects with ``upload_bytes`` and ``server_accuracy``
    attributes (round records or ledger entries).  Returns ``None`` when the
    target is never reached.
    """
    history = list(history)
    if not history:
        raise ValueError("history is empty")
    spent = []
    for rec in history:
        spent.append(int(rec.upload_bytes))
        if rec.server_accuracy is not None and rec.server_accuracy >= target_accuracy:
            return TargetCost(len(spent), sum(spent), tuple(spent))
    return None
