"""Fixed-width text summary of ``aggregate.csv``: one block per training
regime and attack, set metrics and rank correlations in separate tables."""

from __future__ import annotations

from collections import Counter
from pathlib import Path

from ..errors import DataError
from .runner import AGGREGATE_HEADER, ERROR_HEADER, W_FREE, AggregateRow, read_aggregate, read_csv

SET_COLUMNS = (
    ("topk", "top-k"),
    ("lens_recall", "w-LENS-recall@k"),
    ("lens_prec", "w-LENS-prec@k"),
    ("topk_div", "top-k-div"),
    ("lens_recall_div", "w-LENS-recall@k-div"),
    ("lens_prec_div", "w-LENS-prec@k-div"),
    ("lens_distance", "w-LENS-dist@k"),
)
RANK_COLUMNS = (
    ("spearman", "spearman"),
    ("kendall", "kendall"),
    ("lens_spearman", "w-LENS-spearman"),
    ("lens_kendall", "w-LENS-kendall"),
)


def _table(keys: list[str], key_rows: list[tuple], cells: dict, columns) -> list[str]:
    present = [(m, label) for m, label in columns if any(m in cells[r] for r in key_rows)]
    header = keys + [label for _, label in present]
    body = [[f"{v:g}" if isinstance(v, float) else str(v) for v in r]
            + [f"{cells[r][m]:.4f}" if m in cells[r] else "-" for m, _ in present] for r in key_rows]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

    def fmt(row):
        return "  ".join(cell.rjust(width) for cell, width in zip(row, widths)).rstrip()

    return [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]


def _blocks(rows: list[AggregateRow]) -> list[str]:
    out = []
    regimes = list(dict.fromkeys(r.training_regime for r in rows))
    for regime in regimes:
        attacks = list(dict.fromkeys(r.attack_id for r in rows if r.training_regime == regime))
        for attack in attacks:
            sub = [r for r in rows if r.training_regime == regime and r.attack_id == attack]
            out.append(f"== regime: {regime} | attack: {attack} ==")
            set_names = {m for m, _ in SET_COLUMNS}
            set_rows = [r for r in sub if r.metric in set_names]
            if set_rows:
                # w-free metrics fill every window row that shares k and epsilon
                windows = sorted({r.w for r in set_rows if r.metric not in W_FREE}) or [0]
                key_rows = sorted({(r.k, w, r.epsilon) for r in set_rows for w in windows},
                                  key=lambda t: (t[2], t[0], t[1]))
                cells: dict = {kr: {} for kr in key_rows}
                for r in set_rows:
                    for kr in key_rows:
                        if kr[0] == r.k and kr[2] == r.epsilon and (r.w == kr[1] or r.metric in W_FREE):
                            cells[kr][r.metric] = r.mean
                out += _table(["k", "w", "epsilon"], key_rows, cells, SET_COLUMNS)
                out.append("")
            rank_names = {m for m, _ in RANK_COLUMNS}
            rank_rows = [r for r in sub if r.metric in rank_names]
            if rank_rows:
                windows = sorted({r.w for r in rank_rows if r.metric not in W_FREE}) or [0]
                key_rows = sorted({(w, r.epsilon) for r in rank_rows for w in windows}, key=lambda t: (t[1], t[0]))
                cells = {kr: {} for kr in key_rows}
                for r in rank_rows:
                    for kr in key_rows:
                        if kr[1] == r.epsilon and (r.w == kr[0] or r.metric in W_FREE):
                            cells[kr][r.metric] = r.mean
                out += _table(["w", "epsilon"], key_rows, cells, RANK_COLUMNS)
                out.append("")
    return out


def render_report(out_dir) -> str:
    out_dir = Path(out_dir)
    path = out_dir / "aggregate.csv"
    if not path.exists():
        raise DataError(f"{path} missing; run 'evaluate' first")
    rows = read_aggregate(path)
    lines = ["attributional robustness summary (mean over images)", ""]
    if not rows:
        lines.append("no data")
    else:
        lines += _blocks(rows)
    errors = Counter()
    for err_path in sorted(out_dir.glob("errors_*.csv")):
        regime = err_path.stem[len("errors_"):]
        for r in read_csv(err_path, ERROR_HEADER):
            errors[regime, r[6]] += 1
    if errors:
        lines.append("error rows (excluded from means):")
        for (regime, code), n in sorted(errors.items()):
            lines.append(f"  {regime}: {code} x{n}")
    return "\n".join(lines).rstrip("\n") + "\n"


def cmd_report(out_dir) -> str:
    text = render_report(out_dir)
    target = Path(out_dir) / "report.txt"
    try:
        target.write_text(text, encoding="ascii")
    except OSError as exc:
        raise DataError(f"cannot write {target}: {exc}") from exc
    return text


__all__ = ["AGGREGATE_HEADER", "cmd_report", "render_report"]
