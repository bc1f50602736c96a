"""Score matrix bookkeeping, average performance/forgetting, report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


class ScoreMatrix:
    """A[t][i]: accuracy (percent) on task column i after training stage t.

    Column i becomes defined at stage ``intro[i]``; in a plain stream that is
    stage i, while a joint first stage introduces several columns at once.
    """

    def __init__(self, intro: Sequence[int] | None = None, names: Sequence[str] | None = None):
        self.intro: list[int] = list(intro) if intro is not None else []
        self.names: list[str] = list(names) if names is not None else [f"task{i}" for i in range(len(self.intro))]
        self.rows: list[list[float | None]] = []

    @classmethod
    def stream(cls, n_tasks: int) -> "ScoreMatrix":
        return cls(range(n_tasks))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float | None]]) -> "ScoreMatrix":
        """Build from rows; a column is introduced at its first recorded score."""
        width = max(len(r) for r in rows)
        padded = [list(r) + [None] * (width - len(r)) for r in rows]
        intro = []
        for i in range(width):
            first = [t for t, r in enumerate(padded) if r[i] is not None]
            if not first:
                raise ValueError(f"column task{i} has no scores")
            intro.append(first[0])
        m = cls(intro)
        for r in padded:
            m.add_row(r)
        return m

    @property
    def n_stages(self) -> int:
        return len(self.rows)

    @property
    def n_tasks(self) -> int:
        return len(self.intro)

    def seen(self, t: int) -> list[int]:
        return [i for i, s in enumerate(self.intro) if s <= t]

    def old(self, t: int) -> list[int]:
        return [i for i, s in enumerate(self.intro) if s < t]

    def add_row(self, scores: Sequence[float | None]) -> None:
        t = len(self.rows)
        row = list(scores) + [None] * (self.n_tasks - len(scores))
        if len(row) != self.n_tasks:
            raise ValueError(f"row has {len(scores)} entries for {self.n_tasks} tasks")
        for i, v in enumerate(row):
            if v is None:
                continue
            if self.intro[i] > t:
                raise ValueError(f"task {i} is not seen at stage {t}")
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"score {v} outside [0, 100]")
        self.rows.append([None if v is None else float(v) for v in row])

    def value(self, t: int, i: int) -> float:
        v = self.rows[t][i]
        if v is None:
            raise ValueError(f"A[{t}][{i}] is not recorded")
        return v

    def __eq__(self, other) -> bool:
        return isinstance(other, ScoreMatrix) and self.intro == other.intro and self.rows == other.rows


def _subset(cols: list[int], tasks: Sequence[int] | None) -> list[int]:
    return cols if tasks is None else [i for i in cols if i in set(tasks)]


def avg_performance(m: ScoreMatrix, t: int, tasks: Sequence[int] | None = None) -> float:
    """Mean score over the tasks seen by stage ``t``."""
    if t >= m.n_stages:
        raise ValueError(f"stage {t} has not been recorded")
    cols = _subset(m.seen(t), tasks)
    if not cols:
        raise ValueError(f"no seen tasks at stage {t}")
    if any(m.rows[t][i] is None for i in cols):
        raise ValueError(f"row {t} is incomplete")
    return sum(m.rows[t][i] for i in cols) / len(cols)


def forgetting_terms(m: ScoreMatrix, t: int, tasks: Sequence[int] | None = None) -> dict[int, float]:
    """Per old task: best earlier score minus the score at stage ``t``."""
    if t < 1:
        raise ValueError("forgetting needs at least one earlier stage")
    if t >= m.n_stages:
        raise ValueError(f"stage {t} has not been recorded")
    cols = _subset(m.old(t), tasks)
    if not cols:
        raise ValueError(f"no old tasks at stage {t}")
    return {i: max(m.value(j, i) for j in range(m.intro[i], t)) - m.value(t, i) for i in cols}


def avg_forgetting(m: ScoreMatrix, t: int, tasks: Sequence[int] | None = None) -> float:
    terms = forgetting_terms(m, t, tasks)
    return sum(terms.values()) / len(terms)


def retrieval_accuracy(predictions: Sequence[int], gold: Sequence[int]) -> float:
    if len(predictions) != len(gold):
        raise ValueError(f"prediction/gold lengths differ: {len(predictions)} vs {len(gold)}")
    if not gold:
        raise ValueError("retrieval accuracy of an empty list")
    return sum(int(p == g) for p, g in zip(predictions, gold)) / len(gold)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class RunReport:
    matrix: ScoreMatrix
    config: dict
    seed: int
    label: str = "run"
    stream_tasks: list[int] | None = None
    retrieval: dict[str, float] = field(default_factory=dict)
    stages: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def performance(self) -> list[float]:
        return [avg_performance(self.matrix, t) for t in range(self.matrix.n_stages)]

    def forgetting(self, tasks: Sequence[int] | None = None) -> list[float | None]:
        out = []
        for t in range(self.matrix.n_stages):
            cols = _subset(self.matrix.old(t), tasks) if t >= 1 else []
            out.append(avg_forgetting(self.matrix, t, tasks) if cols else None)
        return out

    def final_forgetting(self) -> float | None:
        return self.forgetting(self.stream_tasks)[-1]

    def summary(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "config_hash": config_hash(self.config),
            "tasks": self.matrix.names,
            "intro": self.matrix.intro,
            "A": self.performance(),
            "F": self.forgetting(),
            "F_stream": self.forgetting(self.stream_tasks) if self.stream_tasks is not None else None,
            "stream_tasks": self.stream_tasks,
            "retrieval_accuracy": self.retrieval,
            "stages": self.stages,
            "config": self.config,
        }


def matrix_to_csv(m: ScoreMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage"] + [f"task{i}" for i in range(m.n_tasks)])
    for t, row in enumerate(m.rows):
        writer.writerow([t] + ["" if v is None else repr(v) for v in row])
    return buf.getvalue()


def matrix_from_csv(text: str) -> ScoreMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "stage":
        raise ValueError("CSV header must start with 'stage'")
    return ScoreMatrix.from_rows([[None if c == "" else float(c) for c in r[1:]] for r in body])


def render_table(summary: dict) -> str:
    """Plain-text table: one column group per stage with A_t and F_t."""
    a, f = summary["A"], summary["F"]
    head1 = ["Method"]
    head2 = [""]
    cells = [summary["label"]]
    for t in range(len(a)):
        if f[t] is None:
            head1.append(f"{t}")
            head2.append(f"A_{t}")
            cells.append(f"{a[t]:.2f}")
        else:
            head1 += [f"{t}", ""]
            head2 += [f"A_{t}", f"F_{t}"]
            cells += [f"{a[t]:.2f}", f"{f[t]:.2f}"]
    widths = [max(len(x), len(y), len(z)) for x, y, z in zip(head1, head2, cells)]
    lines = [" | ".join(s.ljust(w) for s, w in zip(row, widths)) for row in (head1, head2, cells)]
    lines.insert(2, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def export_report(report: RunReport, directory: str | Path) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        summary = report.summary()
        files = {
            "A.csv": matrix_to_csv(report.matrix),
            "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
            "table.txt": render_table(summary),
        }
        for name, text in files.items():
            tmp = directory / f".{name}.tmp"
            tmp.write_text(text, encoding="utf-8")
            tmp.replace(directory / name)
    except OSError as exc:
        raise OSError(f"cannot write report to {directory}: {exc}") from exc
