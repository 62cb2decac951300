"""
Tracking-error budget: the triangle bound relating tracking, inversion and
model error, its normalized form with the identification error, and the
data informativity measure ``epsilon``.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .io import atomic_write_text
from .signals import NormSpec, Signal, norm

SLACK_TOL = 1e-12


def _arr(x):
    if isinstance(x, Signal):
        return x.data.reshape(-1)
    return np.asarray(x, dtype=float).reshape(-1)


@dataclass(frozen=True)
class ErrorBudget:
    tracking: float
    inversion: float
    model_error: float
    identification: float
    epsilon: float
    p: int
    normalized: bool
    n_k: int
    n_d: int

    @property
    def bound(self) -> float:
        """Right-hand side ``inversion + identification + epsilon``."""
        return self.inversion + self.identification + self.epsilon

    @property
    def slack(self) -> float:
        return self.bound - self.tracking

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bound"] = self.bound
        d["slack"] = self.slack
        return d


def triangle_slack(R, Y, Y_hat, norm_spec: NormSpec = NormSpec()) -> float:
    """``||R - Yhat|| + ||Y - Yhat|| - ||R - Y||``; never below ``-SLACK_TOL``."""
    R, Y, Y_hat = _arr(R), _arr(Y), _arr(Y_hat)
    return norm(R - Y_hat, norm_spec) + norm(Y - Y_hat, norm_spec) - norm(R - Y, norm_spec)


def compute_budget(R, Y, Y_hat, Y_d, Y_hat_d, norm_spec: NormSpec = NormSpec()) -> ErrorBudget:
    """Budget from operation data ``(R, Y, Yhat)`` and training data ``(Y^d, Yhat^d)``.

    ``Y`` must come from running the designed feedforward on the plant.
    """
    R, Y, Y_hat, Y_d, Y_hat_d = map(_arr, (R, Y, Y_hat, Y_d, Y_hat_d))
    if not (R.size == Y.size == Y_hat.size):
        raise ValueError(f"operation signals differ in length: {R.size}, {Y.size}, {Y_hat.size}")
    if Y_d.size != Y_hat_d.size:
        raise ValueError(f"dataset signals differ in length: {Y_d.size}, {Y_hat_d.size}")
    tracking = norm(R - Y, norm_spec)
    inversion = norm(R - Y_hat, norm_spec)
    model_error = norm(Y - Y_hat, norm_spec)
    identification = norm(Y_d - Y_hat_d, norm_spec)
    budget = ErrorBudget(tracking, inversion, model_error, identification,
                         model_error - identification, norm_spec.p, norm_spec.normalized,
                         R.size, Y_d.size)
    if tracking > inversion + model_error + SLACK_TOL:
        raise ArithmeticError(f"triangle bound violated: {tracking} > {inversion} + {model_error}")
    if budget.slack < -SLACK_TOL:
        raise ArithmeticError(f"normalized bound violated by {-budget.slack}")
    return budget


REPORT_COLUMNS = ("n_1", "gamma", "identification", "inversion", "tracking", "model_error",
                  "epsilon", "bound_slack")


def budget_rows(budgets: Sequence[ErrorBudget], labels: Sequence[dict]) -> list[dict]:
    if not budgets:
        raise ValueError("empty sweep")
    if len(labels) != len(budgets):
        raise ValueError("one label per budget required")
    rows = []
    for b, lab in zip(budgets, labels):
        rows.append({"n_1": lab.get("n_1", ""), "gamma": lab.get("gamma", ""),
                     "identification": b.identification, "inversion": b.inversion,
                     "tracking": b.tracking, "model_error": b.model_error, "epsilon": b.epsilon,
                     "bound_slack": b.slack})
    return rows


def budget_report(budgets: Sequence[ErrorBudget], labels: Sequence[dict], path=None) -> str:
    """CSV table, one row per configuration; written to ``path`` when given."""
    buf = io.StringIO()
    buf.write(",".join(REPORT_COLUMNS) + "\n")
    for row in budget_rows(budgets, labels):
        cells = []
        for col in REPORT_COLUMNS:
            v = row[col]
            cells.append(f"{v:.11e}" if isinstance(v, float) else str(v))
        buf.write(",".join(cells) + "\n")
    text = buf.getvalue()
    if path is not None:
        atomic_write_text(path, text)
    return text


def read_budget_report(path) -> list[dict]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            cells = line.strip().split(",")
            row = {}
            for k, v in zip(header, cells):
                try:
                    row[k] = int(v) if k == "n_1" else float(v)
                except ValueError:
                    row[k] = v
            rows.append(row)
    return rows
