"""Across-subject accuracy summaries and result files."""
from __future__ import annotations

import csv
import io

import numpy as np

from .data import DataError


def summarize_accuracy(per_subject, sample_std: bool = False) -> tuple[float, float]:
    """Mean and standard deviation of per-subject accuracies.

    The default is the population (divide-by-N) deviation; sample_std switches
    to the N-1 divisor.
    """
    acc = np.asarray(list(per_subject), dtype=np.float64)
    if acc.size == 0:
        raise DataError("no accuracies to summarise")
    ddof = 1 if sample_std and acc.size > 1 else 0
    return float(acc.mean()), float(acc.std(ddof=ddof))


RESULT_FIELDS = ("subject", "n_test", "accuracy", "mean_cycles", "best_epoch", "val_accuracy")


def results_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in RESULT_FIELDS})
    return buf.getvalue()


def read_results_csv(text: str) -> list:
    return [{k: float(v) if k not in ("subject", "n_test", "best_epoch") else int(v)
             for k, v in row.items()} for row in csv.DictReader(io.StringIO(text))]


def results_text(rows: list, sample_std: bool = False) -> str:
    mean, std = summarize_accuracy([r["accuracy"] for r in rows], sample_std)
    lines = [f"subject_{r['subject']}_accuracy = {_fmt(r['accuracy'])}" for r in rows]
    lines += [f"mean_accuracy = {_fmt(mean)}",
              f"std_accuracy = {_fmt(std)}",
              f"std_convention = {'sample' if sample_std else 'population'}",
              f"mean_cycles = {_fmt(float(np.mean([r['mean_cycles'] for r in rows])))}"]
    return "\n".join(lines) + "\n"


def table(rows: list, sample_std: bool = False) -> str:
    mean, std = summarize_accuracy([r["accuracy"] for r in rows], sample_std)
    out = [f"{'Subject':<8} {'Acc.':>6} {'Cycles':>7}"]
    out += [f"S{r['subject'] + 1:<7} {r['accuracy']:6.3f} {r['mean_cycles']:7.2f}" for r in rows]
    out.append(f"{'Acc.':<8} {mean:6.3f}")
    out.append(f"{'Std.':<8} {std:6.3f}")
    return "\n".join(out)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
