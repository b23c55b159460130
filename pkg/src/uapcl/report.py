"""Stage x domain EER tables built from run directories.

Scores are negated logits (higher = bona fide).  An EER is computed at the
threshold where the spoof acceptance rate meets the bona fide rejection
rate; all values in reports are percentages.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import config_digest
from .errors import IncompleteRunError, ValidationError

HEADER = "# EER % (score = -logit, higher = bona fide); * best, + second best per column"


@dataclass
class EvalReport:
    rows: list  # row labels, e.g. "stage 1 (d1)"
    domains: list  # eval domain ids as strings
    matrix: list  # [len(rows)][len(domains)] EER %
    averages: list
    strategy: str
    seeds: list
    config_digest: str
    uap: list = field(default_factory=list)
    embedding: dict | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (len(self.rows), len(self.domains)):
            raise ValidationError("report matrix does not match its row and column labels")
        if np.any(m < 0) or np.any(m > 100):
            raise ValidationError("EER outside [0, 100]")

    def cell(self, row: int, domain) -> float:
        return self.matrix[row][self.domains.index(str(domain))]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "domains": self.domains, "matrix": self.matrix, "averages": self.averages,
                "strategy": self.strategy, "seeds": self.seeds, "config_digest": self.config_digest,
                "uap": self.uap, "embedding": self.embedding}

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + [f"eer_d{d}" for d in self.domains] + ["average"])
        for label, vals, avg in zip(self.rows, self.matrix, self.averages):
            w.writerow([label] + [f"{v:.4f}" for v in vals] + [f"{avg:.4f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        return render_table(self.rows, self.domains, self.matrix, self.averages,
                            title=f"strategy={self.strategy} seeds={self.seeds} config={self.config_digest[:12]}")

    def render(self, fmt: str) -> str:
        if fmt == "csv":
            return self.to_csv()
        if fmt == "json":
            return self.to_json()
        if fmt == "table":
            return self.to_table()
        raise ValidationError(f"unknown report format {fmt!r}")

    def write(self, run_dir):
        run_dir = Path(run_dir)
        (run_dir / "report.json").write_text(self.to_json())
        (run_dir / "report.csv").write_text(self.to_csv())


def _marks(col: np.ndarray) -> list[str]:
    """'*' on the lowest value of a column, '+' on the runner-up."""
    marks = [""] * len(col)
    if len(col) < 2:
        return marks
    uniq = np.unique(col)
    for i, v in enumerate(col):
        if v == uniq[0]:
            marks[i] = "*"
        elif len(uniq) > 1 and v == uniq[1]:
            marks[i] = "+"
    return marks


def render_table(rows, domains, matrix, averages, title="") -> str:
    m = np.asarray(matrix, dtype=np.float64)
    cols = np.column_stack([m, np.asarray(averages, dtype=np.float64)]) if len(rows) else m
    heads = [f"d{d}" for d in domains] + ["avg"]
    cells = [[f"{v:.2f}" for v in r] for r in cols]
    for j in range(cols.shape[1]):
        for i, mk in enumerate(_marks(cols[:, j])):
            cells[i][j] += mk or " "
    w0 = max([len("row")] + [len(r) for r in rows])
    widths = [max(len(h), *(len(c[j]) for c in cells)) for j, h in enumerate(heads)]
    lines = [HEADER]
    if title:
        lines.append("# " + title)
    lines.append("  ".join(["row".ljust(w0)] + [h.rjust(w) for h, w in zip(heads, widths)]))
    for label, c in zip(rows, cells):
        lines.append("  ".join([label.ljust(w0)] + [x.rjust(w) for x, w in zip(c, widths)]))
    return "\n".join(lines) + "\n"


def _read_json(path):
    return json.loads(Path(path).read_text())


def build_report(run_dir, write: bool = True) -> EvalReport:
    """Collect every stage's metrics under ``run_dir`` into one report."""
    run_dir = Path(run_dir)
    missing = []
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise IncompleteRunError([str(cfg_path)])
    cfg = _read_json(cfg_path)
    order = cfg.get("order") or []
    n_stages = 1 if cfg.get("strategy") == "joint" else len(order)
    declared = sorted(str(d["domain_id"]) for d in cfg.get("domains", [])) or sorted({str(d) for d in order})
    stages = []
    for t in range(1, n_stages + 1):
        for name in ("metrics.json", "model.ufckpt"):
            if not (run_dir / f"stage_{t}" / name).exists():
                missing.append(f"stage_{t}/{name}")
        mpath = run_dir / f"stage_{t}" / "metrics.json"
        if mpath.exists():
            m = _read_json(mpath)
            gaps = [d for d in declared if d not in m["eer"]]
            missing += [f"stage_{t}/metrics.json:eer[{d}]" for d in gaps]
            stages.append(m)
    if missing:
        raise IncompleteRunError(missing)

    rows, matrix, averages, uap = [], [], [], []
    for m in stages:
        dom = m["trained_domain"]
        tag = "+".join(str(x) for x in dom) if isinstance(dom, list) else str(dom)
        rows.append(f"stage {m['stage']} (d{tag})")
        vals = [float(m["eer"][d]) for d in declared]
        matrix.append(vals)
        averages.append(float(np.mean(vals)))
        if m.get("uap"):
            uap.append(m["uap"])
    emb_path = run_dir / "embedding.json"
    report = EvalReport(rows, declared, matrix, averages, cfg.get("strategy", ""), [cfg.get("seed", 0)],
                        config_digest(cfg), uap, _read_json(emb_path) if emb_path.exists() else None)
    if write:
        report.write(run_dir)
    return report


def prior_domain_eers(report: EvalReport, order) -> list[float]:
    """Mean EER over already-seen domains after each stage from the second on."""
    out = []
    for t in range(1, len(order)):
        out.append(float(np.mean([report.cell(t, d) for d in order[:t]])))
    return out


def compare(reports: dict, title="") -> str:
    """Final-row comparison across runs (one row per system), as a table."""
    if not reports:
        raise ValidationError("nothing to compare")
    names = list(reports)
    domains = reports[names[0]].domains
    for r in reports.values():
        if r.domains != domains:
            raise ValidationError("reports cover different domains")
    matrix = [r.matrix[-1] for r in reports.values()]
    averages = [r.averages[-1] for r in reports.values()]
    return render_table(names, domains, matrix, averages, title)


def compare_csv(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    first = next(iter(reports.values()))
    w.writerow(["system"] + [f"eer_d{d}" for d in first.domains] + ["average"])
    for name, r in reports.items():
        w.writerow([name] + [f"{v:.4f}" for v in r.matrix[-1]] + [f"{r.averages[-1]:.4f}"])
    return buf.getvalue()
