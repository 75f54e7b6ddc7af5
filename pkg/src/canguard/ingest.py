"""Decoded CAN signal logs: parsing, catalogs and contiguous splits.

Two on-disk layouts are understood. ``canonical_csv`` has one column per
tracked signal (``time,msg_id,label,s0,...``) and leaves cells empty when the
row's message does not carry that signal. ``syncan_csv`` is the public SynCAN
layout (``Label,Time,ID,Signal1_of_ID,...``) with time in milliseconds and
per-ID signal positions that are mapped onto global indices through a layout.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

log = logging.getLogger(__name__)

NORMAL = 0
ATTACK = 1

FORMATS = ("syncan_csv", "canonical_csv")
SYNCAN_HEADER = [
    "Label",
    "Time",
    "ID",
    "Signal1_of_ID",
    "Signal2_of_ID",
    "Signal3_of_ID",
    "Signal4_of_ID",
]


class IngestError(Exception):
    """Base class for data errors raised while reading logs."""


class HeaderMismatch(IngestError):
    pass


class InconsistentId(IngestError):
    pass


class CardinalityMismatch(IngestError):
    pass


class EmptyStream(IngestError):
    pass


class AttackInTraining(IngestError):
    pass


@dataclass(frozen=True)
class SignalRecord:
    time: float
    msg_id: str
    values: tuple[tuple[int, float], ...]
    label: int = NORMAL

    @property
    def is_attack(self) -> bool:
        return self.label == ATTACK


@dataclass(frozen=True)
class MalformedRow:
    line: int
    reason: str


@dataclass
class SignalCatalog:
    m: int
    id_to_signals: dict[str, tuple[int, ...]]
    signal_names: list[str]
    value_range: list[tuple[float, float]]
    constant: list[bool] = field(default_factory=list)

    def signal_of(self) -> dict[int, str]:
        return {i: mid for mid, idx in self.id_to_signals.items() for i in idx}


def natural_key(token: str) -> tuple:
    """Sort key that orders ``id2`` before ``id10``."""
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", token))


def _float(cell: str) -> float:
    v = float(cell)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {cell!r}")
    return v


def syncan_layout(path: str | Path) -> dict[str, tuple[int, ...]]:
    """Assign global signal indices to a SynCAN file by scanning it once.

    IDs are taken in natural order and each receives as many consecutive
    indices as the widest row it ever carries.
    """
    widths: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if len(row) != len(SYNCAN_HEADER):
                continue
            n = sum(1 for c in row[3:] if c.strip() != "")
            widths[row[2]] = max(widths.get(row[2], 0), n)
    layout: dict[str, tuple[int, ...]] = {}
    nxt = 0
    for mid in sorted(widths, key=natural_key):
        layout[mid] = tuple(range(nxt, nxt + widths[mid]))
        nxt += widths[mid]
    return layout


def parse_log(
    path: str | Path,
    fmt: str = "canonical_csv",
    *,
    layout: dict[str, Sequence[int]] | None = None,
    malformed: list[MalformedRow] | None = None,
) -> Iterator[SignalRecord]:
    """Yield records from ``path`` in file order.

    Bad rows are skipped; when ``malformed`` is given each one is appended
    to it with its 1-based line number. A message ID that later carries a
    signal outside the set it was first seen with raises InconsistentId.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    if fmt == "syncan_csv" and layout is None:
        layout = syncan_layout(path)

    def bad(line: int, reason: str) -> None:
        log.warning("%s:%d: %s", path, line, reason)
        if malformed is not None:
            malformed.append(MalformedRow(line, reason))

    seen: dict[str, frozenset[int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if fmt == "syncan_csv":
            if [h.strip() for h in header] != SYNCAN_HEADER:
                raise HeaderMismatch(f"{path}: unexpected SynCAN header {header}")
        elif header[:3] != ["time", "msg_id", "label"] or any(
            h != f"s{i}" for i, h in enumerate(header[3:])
        ):
            raise HeaderMismatch(f"{path}: unexpected canonical header {header}")
        ncol = len(header)

        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != ncol:
                bad(line, f"expected {ncol} columns, got {len(row)}")
                continue
            try:
                if fmt == "syncan_csv":
                    label, t, mid = int(row[0]), _float(row[1]) / 1000.0, row[2]
                    if mid not in layout:
                        raise ValueError(f"unknown message id {mid!r}")
                    slots = layout[mid]
                    values = []
                    for k, cell in enumerate(row[3:]):
                        if cell.strip() == "":
                            continue
                        if k >= len(slots):
                            raise ValueError(f"{mid} has no signal slot {k + 1}")
                        values.append((slots[k], _float(cell)))
                else:
                    t, mid, label = _float(row[0]), row[1], int(row[2])
                    values = [
                        (i, _float(c)) for i, c in enumerate(row[3:]) if c != ""
                    ]
                if label not in (NORMAL, ATTACK):
                    raise ValueError(f"label must be 0 or 1, got {label}")
            except ValueError as exc:
                bad(line, str(exc))
                continue

            idx = frozenset(i for i, _ in values)
            known = seen.get(mid)
            if known is None:
                seen[mid] = idx
            elif not idx <= known:
                raise InconsistentId(
                    f"{path}:{line}: {mid} carries signals {sorted(idx)}, "
                    f"previously {sorted(known)}"
                )
            yield SignalRecord(t, mid, tuple(values), label)


def write_canonical(records: Iterable[SignalRecord], path: str | Path, m: int) -> None:
    """Write records as canonical CSV; floats use shortest round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["time", "msg_id", "label"] + [f"s{i}" for i in range(m)]))
        fh.write("\n")
        for rec in records:
            cells = [""] * m
            for i, v in rec.values:
                cells[i] = repr(float(v))
            fh.write(f"{float(rec.time)!r},{rec.msg_id},{rec.label},")
            fh.write(",".join(cells))
            fh.write("\n")


def build_catalog(records: Iterable[SignalRecord], declared_m: int) -> SignalCatalog:
    sets: dict[str, set[int]] = {}
    lo: dict[int, float] = {}
    hi: dict[int, float] = {}
    n = 0
    for rec in records:
        n += 1
        s = sets.setdefault(rec.msg_id, set())
        for i, v in rec.values:
            s.add(i)
            if i not in lo:
                lo[i] = hi[i] = v
            else:
                lo[i] = min(lo[i], v)
                hi[i] = max(hi[i], v)
    if n == 0:
        raise EmptyStream("cannot build a catalog from an empty stream")

    owner: dict[int, str] = {}
    for mid in sorted(sets, key=natural_key):
        for i in sets[mid]:
            if i in owner:
                raise InconsistentId(f"signal {i} carried by both {owner[i]} and {mid}")
            owner[i] = mid
    if sorted(owner) != list(range(declared_m)):
        raise CardinalityMismatch(
            f"expected signals 0..{declared_m - 1}, found {len(owner)} distinct: "
            f"{sorted(owner)[:10]}..."
        )

    id_to_signals = {mid: tuple(sorted(sets[mid])) for mid in sorted(sets, key=natural_key)}
    names = [""] * declared_m
    for mid, idx in id_to_signals.items():
        for k, i in enumerate(idx):
            names[i] = f"{mid}.{k}"
    ranges = [(lo[i], hi[i]) for i in range(declared_m)]
    return SignalCatalog(
        m=declared_m,
        id_to_signals=id_to_signals,
        signal_names=names,
        value_range=ranges,
        constant=[a == b for a, b in ranges],
    )


def split(
    records: Sequence[SignalRecord],
    fractions: tuple[float, float, float],
    *,
    allow_attack_in_training: bool = False,
) -> tuple[list[SignalRecord], list[SignalRecord], list[SignalRecord]]:
    """Contiguous train/val/test split by position; never shuffles."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(records)
    a = round(fractions[0] * n)
    b = round((fractions[0] + fractions[1]) * n)
    train, val, test = list(records[:a]), list(records[a:b]), list(records[b:])
    if not allow_attack_in_training:
        for part, name in ((train, "train"), (val, "validation")):
            hits = sum(r.is_attack for r in part)
            if hits:
                raise AttackInTraining(f"{hits} attack-labelled records in {name} split")
    return train, val, test
