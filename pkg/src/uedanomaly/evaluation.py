"""
Label-aware evaluation: ROC curves, operating points, review lists and the
markdown run report. Anomalous images are the positive class and an image is
flagged when its score exceeds the threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ricemix, scoring
from .errors import EvalError
from .imagio import ANOMALOUS, NORMAL

REVIEW_MARGIN = 0.2


@dataclass
class RocCurve:
    """(threshold, tpr, fpr) points sorted by threshold, from -inf to +inf."""
    points: list[tuple[float, float, float]]
    auc: float

    @property
    def thresholds(self):
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self):
        return np.array([p[1] for p in self.points])

    @property
    def fpr(self):
        return np.array([p[2] for p in self.points])


def _labelled(table):
    scores, positive = [], []
    for row in table.rows:
        if row.label in (NORMAL, ANOMALOUS):
            scores.append(row.log_mse)
            positive.append(row.label == ANOMALOUS)
    return np.asarray(scores, dtype=np.float64), np.asarray(positive, dtype=bool)


def roc_from_scores(scores, positive) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError("ROC needs at least one normal and one anomalous image")
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    pos_sorted = np.sort(scores[positive])
    neg_sorted = np.sort(scores[~positive])
    # counts strictly above each threshold
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="right")
    fp = n_neg - np.searchsorted(neg_sorted, thresholds, side="right")
    tpr, fpr = tp / n_pos, fp / n_neg
    # fpr decreases with threshold; integrate over increasing fpr
    auc = float(np.trapezoid(tpr[::-1], fpr[::-1]))
    points = [(float(t), float(a), float(b)) for t, a, b in zip(thresholds, tpr, fpr)]
    return RocCurve(points=points, auc=auc)


def roc(table) -> RocCurve:
    scores, positive = _labelled(table)
    return roc_from_scores(scores, positive)


def operating_point(curve: RocCurve, e_t: float) -> tuple[float, float]:
    """(tpr, fpr) when flagging every score above ``e_t``."""
    idx = int(np.searchsorted(curve.thresholds, e_t, side="right")) - 1
    _, tpr, fpr = curve.points[max(idx, 0)]
    return tpr, fpr


@dataclass
class Classification:
    table: scoring.ScoreTable
    e_t: float
    flagged: list[bool]
    review: list[scoring.ScoreRow] = field(default_factory=list)


def classify(table, e_t: float, params: ricemix.RiceMixtureParams | None = None,
             margin: float = REVIEW_MARGIN) -> Classification:
    """Flag images with e > e_t and list borderline posteriors for visual review."""
    rows = []
    for row in table.rows:
        post = row.posterior_normal
        if params is not None:
            post = float(ricemix.posterior_normal(row.log_mse, params))
        rows.append(replace(row, posterior_normal=post))
    out = replace(table, rows=rows)
    flagged = [r.log_mse > e_t for r in rows]
    review = [r for r in rows if r.posterior_normal is not None
              and abs(r.posterior_normal - 0.5) < margin]
    return Classification(table=out, e_t=e_t, flagged=flagged, review=review)


def save_roc(curve: RocCurve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,tpr,fpr\n")
        for t, tpr, fpr in curve.points:
            fh.write(f"{t!r},{tpr!r},{fpr!r}\n")


def _csv_block(header, rows):
    lines = ["```csv", header]
    lines += [",".join(_num(v) for v in row) for row in rows]
    lines.append("```")
    return lines


def _num(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


SECTIONS = ("Score histogram", "Fitted components", "Posterior", "Detection threshold",
            "ROC", "Operating point", "Review list")


def report(table=None, params=None, e_t=None, curve=None, classification=None,
           n_grid: int = 200, bins: int = 30) -> str:
    """Render the run report as markdown with embedded CSV blocks.

    ``curve`` may be None when the scores carry no labels; the ROC and
    operating-point sections then say so.
    """
    for name, value in (("scores", table), ("fit", params), ("threshold", e_t),
                        ("classification", classification)):
        if value is None:
            raise EvalError(f"report is missing the {name} artifact")
    scores = table.scores()
    if scores.size == 0:
        raise EvalError("report needs at least one scored image")
    lines = ["# Anomaly detection report", "",
             f"Images scored: {len(table.rows)}; skipped: {len(table.side_report)}", ""]

    lines += [f"## {SECTIONS[0]}", ""]
    lines += _csv_block("bin_left,count", scoring.histogram(scores, bins))
    lines.append("")

    span = scores.max() - scores.min()
    grid = np.linspace(scores.min() - 0.1 * span, scores.max() + 0.1 * span, n_grid)
    dens_n = params.w * np.exp(ricemix.component_logpdf(grid, params.normal, params.family))
    dens_a = (1 - params.w) * np.exp(ricemix.component_logpdf(grid, params.anomal, params.family))
    lines += [f"## {SECTIONS[1]}", "",
              f"w = {_num(params.w)}; normal (mu, nu, alpha) = ({_num(params.normal.mu)}, "
              f"{_num(params.normal.nu)}, {_num(params.normal.alpha)}); anomalous (mu, nu, alpha) = "
              f"({_num(params.anomal.mu)}, {_num(params.anomal.nu)}, {_num(params.anomal.alpha)}); "
              f"NLL = {_num(params.nll)}", ""]
    lines += _csv_block("e,w_p_e_given_N,(1-w)_p_e_given_A", zip(grid, dens_n, dens_a))
    lines.append("")

    post = ricemix.posterior_normal(grid, params)
    lines += [f"## {SECTIONS[2]}", ""]
    lines += _csv_block("e,posterior_normal", zip(grid, post))
    lines.append("")

    lines += [f"## {SECTIONS[3]}", "", f"e_t = {_num(e_t)}",
              f"flagged anomalous: {sum(classification.flagged)} of {len(classification.flagged)}", ""]

    lines += [f"## {SECTIONS[4]}", ""]
    if curve is None:
        lines += ["Labels unavailable: ROC not computed.", ""]
        lines += [f"## {SECTIONS[5]}", "", "Labels unavailable: operating point not computed.", ""]
    else:
        lines += [f"AUC = {_num(curve.auc)}", ""]
        lines += _csv_block("threshold,tpr,fpr", curve.points)
        tpr, fpr = operating_point(curve, e_t)
        lines += ["", f"## {SECTIONS[5]}", "", f"tpr = {_num(tpr)}, fpr = {_num(fpr)} at e_t = {_num(e_t)}", ""]

    lines += [f"## {SECTIONS[6]}", "",
              f"{len(classification.review)} image(s) with posterior within "
              f"{REVIEW_MARGIN} of 0.5", ""]
    lines += _csv_block("id,log_mse,posterior_normal,label",
                        [(r.image_id, r.log_mse, r.posterior_normal, r.label or "unlabeled")
                         for r in classification.review])
    lines.append("")
    return "\n".join(lines)
