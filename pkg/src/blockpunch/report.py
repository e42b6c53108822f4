"""Reports written both as JSON (for CI assertions) and as aligned text tables."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class Report:
    title: str
    columns: list
    rows: list = field(default_factory=list)  # dicts keyed by column
    summary: dict = field(default_factory=dict)
    measured: tuple = ()  # columns whose values depend on the machine
    notes: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "columns": list(self.columns),
            "rows": self.rows,
            "summary": self.summary,
            "measured_columns": list(self.measured),
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, default=_jsonable) + "\n"

    def to_text(self) -> str:
        head = [c + (" *" if c in self.measured else "") for c in self.columns]
        body = [[_fmt(row.get(c)) for c in self.columns] for row in self.rows]
        widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(head)]
        lines = [self.title, ""]
        for key, value in self.summary.items():
            lines.append(f"{key}: {_fmt(value)}")
        if self.summary:
            lines.append("")
        lines.append("  ".join(h.rjust(w) for h, w in zip(head, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for r in body:
            lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
        if self.measured:
            lines += ["", "* measured on this machine; not reproducible across environments"]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def save(self, out_dir, name) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        j, t = out / f"{name}.json", out / f"{name}.txt"
        j.write_text(self.to_json())
        t.write_text(self.to_text())
        return j, t


def _jsonable(value):
    if hasattr(value, "item"):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        if math.isinf(value) or math.isnan(value):
            return str(value)
        if value != 0 and (abs(value) >= 1e6 or abs(value) < 1e-3):
            return f"{value:.4g}"
        return f"{value:.4f}".rstrip("0").rstrip(".")
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)
