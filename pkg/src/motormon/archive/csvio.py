"""CSV export of archive queries."""

from __future__ import annotations

import csv

from ..errors import StoreError

SAMPLE_HEADER = ("t", "channel", "value")
SPECTRUM_HEADER = ("t", "channel", "order", "amplitude")


def _fmt(x: float) -> str:
    return format(x, ".17g")


def export_csv(store, path, table: str = "samples", **filters) -> int:
    """Write the rows of ``store.query(**filters)`` to ``path``; returns the row count."""
    rows = store.query(table=table, **filters)
    header = SPECTRUM_HEADER if table == "spectra" else SAMPLE_HEADER
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
            w.writerow(header)
            for row in rows:
                if table == "spectra":
                    _, t, cid, order, amp = row
                    w.writerow((_fmt(t), cid, _fmt(order), _fmt(amp)))
                else:
                    _, t, cid, value = row
                    w.writerow((_fmt(t), cid, _fmt(value)))
    except OSError as exc:
        raise StoreError(f"cannot write {path}: {exc}") from exc
    return len(rows)


def read_csv(path) -> tuple[list[str], list[tuple]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [tuple(int(v) if name == "channel" else float(v) for name, v in zip(header, line)) for line in r]
    return header, rows
