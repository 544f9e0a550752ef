"""Plain-text run artifacts: the event log and the loss ledger."""

from __future__ import annotations

import csv
import json

LEDGER_HEADER = ("outer_iter", "inner_step", "traj", "t", "transport", "energy", "total", "lr")
EVENT_ORDER = ("event", "outer", "inner", "S", "reason", "loss", "lr", "truncated", "reference", "final")


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple, dict)) or value is None:
        return json.dumps(value, separators=(",", ":"))
    return str(value)


def format_event(record):
    """One ``key=value`` line; lists and matrices are compact JSON without spaces."""
    keys = [k for k in EVENT_ORDER if k in record] + sorted(set(record) - set(EVENT_ORDER))
    return " ".join(f"{k}={_fmt(record[k])}" for k in keys)


def _parse(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_event(line):
    out = {}
    for tok in line.split():
        key, _, val = tok.partition("=")
        out[key] = _parse(val)
    return out


def read_events(path):
    with open(path) as fh:
        return [parse_event(ln) for ln in fh if ln.strip()]


class EventWriter:
    def __init__(self, path):
        self.fh = open(path, "w")

    def __call__(self, record):
        self.fh.write(format_event(record) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


class LedgerWriter:
    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(LEDGER_HEADER)

    def __call__(self, rows):
        self.writer.writerows([[int(r[0]), int(r[1]), int(r[2]), int(r[3]),
                                *(repr(float(v)) for v in r[4:])] for r in rows])

    def close(self):
        self.fh.close()


def read_ledger(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != LEDGER_HEADER:
            raise ValueError(f"unexpected ledger header {header}")
        return [tuple(int(v) for v in row[:4]) + tuple(float(v) for v in row[4:]) for row in reader]
