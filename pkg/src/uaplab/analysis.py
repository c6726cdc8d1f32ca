"""Agreement metrics, significance testing and report rendering."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .errors import (
    DegenerateMarginals,
    DegenerateVariance,
    LabelOutOfRange,
    LengthMismatch,
    OutOfRange,
    UnsupportedFormat,
)

REPORT_SCHEMA = "uaplab/report/v1"

# agreement bands, checked top-down with strict ">" comparisons
AGREEMENT_BANDS = (
    (0.8, "Almost perfect"),
    (0.6, "Substantial"),
    (0.4, "Moderate"),
    (0.2, "Fair"),
    (0.0, "Slight"),
)
NO_AGREEMENT = "No agreement"


@dataclass(frozen=True)
class KappaScore:
    value: float
    n_samples: int
    n_classes: int

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class SignificanceResult:
    t_statistic: float
    p_value: float
    dof: int
    mean_diff: float


def _labels(y, K, name):
    arr = np.asarray(y, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= K):
        raise LabelOutOfRange(f"{name} contains labels outside 0..{K - 1}")
    return arr


def confusion_matrix(y_true, y_pred, K: int) -> np.ndarray:
    """Return the K x K count matrix with rows = true label, cols = predicted."""
    t = _labels(y_true, K, "y_true")
    p = _labels(y_pred, K, "y_pred")
    if t.shape != p.shape:
        raise LengthMismatch(f"y_true has {t.size} labels, y_pred has {p.size}")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def kappa_from_confusion(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    K = cm.shape[0]
    n = cm.sum()
    if K < 2:
        raise ValueError("kappa needs at least two classes")
    if n <= 0:
        raise DegenerateMarginals("kappa is undefined for an empty sample")
    idx = np.arange(K)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (K - 1) ** 2
    observed = cm / n
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    denom = float((weights * expected).sum())
    if denom <= 0.0:
        raise DegenerateMarginals(
            "both raters put every sample in the same class; kappa is undefined"
        )
    return 1.0 - float((weights * observed).sum()) / denom


def quadratic_kappa(y_true, y_pred, K: int) -> KappaScore:
    """Quadratic weighted Cohen kappa between two ordinal raters."""
    cm = confusion_matrix(y_true, y_pred, K)
    value = kappa_from_confusion(cm)
    return KappaScore(value=value, n_samples=int(cm.sum()), n_classes=K)


def agreement_level(kappa: float) -> str:
    if not -1.0 <= kappa <= 1.0 or math.isnan(kappa):
        raise OutOfRange(f"kappa {kappa} is outside [-1, 1]")
    for lower, label in AGREEMENT_BANDS:
        if kappa > lower:
            return label
    return NO_AGREEMENT


def paired_ttest(a, b) -> SignificanceResult:
    """Two-tailed paired Student t-test on ``a - b``.

    The tail probability uses the regularized incomplete beta identity
    ``P(|T| > t) = I_{dof/(dof + t^2)}(dof/2, 1/2)``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise LengthMismatch(f"paired samples differ in length ({a.size} vs {b.size})")
    n = a.size
    if n < 2:
        raise LengthMismatch("paired t-test needs at least two pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    mean = float(np.mean(d))
    if sd == 0.0:
        raise DegenerateVariance("all paired differences are equal")
    dof = n - 1
    t = mean / (sd / math.sqrt(n))
    p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return SignificanceResult(
        t_statistic=t, p_value=min(max(p, 0.0), 1.0), dof=dof, mean_diff=mean
    )


def format_kappa(value: float) -> str:
    return f"{value:.4f}"


def _markdown_table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def _as_payload(report) -> dict:
    # Local import keeps analysis free of torch at import time.
    from .robustness import TransferMatrixReport

    if isinstance(report, TransferMatrixReport):
        return {"schema": REPORT_SCHEMA, "kind": "transfer_matrix", **report.to_dict()}
    if isinstance(report, SignificanceResult):
        return {"schema": REPORT_SCHEMA, "kind": "significance", **asdict(report)}
    if isinstance(report, KappaScore):
        return {"schema": REPORT_SCHEMA, "kind": "kappa", **asdict(report)}
    if isinstance(report, dict):
        payload = {"schema": REPORT_SCHEMA, "kind": report.get("kind", "metrics")}
        payload.update(report)
        return payload
    raise UnsupportedFormat(f"cannot render objects of type {type(report).__name__}")


def render_report(report, fmt: str = "json") -> str:
    """Serialize a report as JSON (lossless) or a markdown pipe table."""
    if fmt not in ("json", "md", "markdown"):
        raise UnsupportedFormat(f"unknown report format {fmt!r}")
    payload = _as_payload(report)
    if fmt == "json":
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    kind = payload["kind"]
    if kind == "transfer_matrix":
        header = [""] + list(payload["cols"])
        rows = [
            [f"Perturbation vector created by {src}"] + [format_kappa(v) for v in row]
            for src, row in zip(payload["rows"], payload["kappa"])
        ]
        title = payload.get("title") or "Transfer attack matrix (quadratic kappa)"
        return f"### {title}\n\n" + _markdown_table(header, rows)
    if kind == "significance":
        rows = [
            ["t statistic", f"{payload['t_statistic']:.4f}"],
            ["p-value", f"{payload['p_value']:.4e}"],
            ["dof", payload["dof"]],
            ["mean difference", f"{payload['mean_diff']:.4f}"],
        ]
        return _markdown_table(["Quantity", "Value"], rows)
    if kind == "kappa":
        return _markdown_table(
            ["Quadratic Cohen Kappa", "Level of Agreement"],
            [[format_kappa(payload["value"]), agreement_level(payload["value"])]],
        )
    # any other dict renders as a two-column field table
    rows = []
    for key, value in payload.items():
        if key in ("schema", "kind"):
            continue
        if isinstance(value, float):
            value = format_kappa(value)
        elif isinstance(value, (list, dict)):
            value = json.dumps(value, sort_keys=True)
        rows.append([key, value])
    return _markdown_table(["Field", "Value"], rows)


def parse_report(text: str):
    """Inverse of ``render_report(..., "json")``."""
    payload = json.loads(text)
    if payload.get("schema") != REPORT_SCHEMA:
        raise UnsupportedFormat(f"unexpected report schema {payload.get('schema')!r}")
    kind = payload.get("kind")
    body = {k: v for k, v in payload.items() if k not in ("schema", "kind")}
    if kind == "transfer_matrix":
        from .robustness import TransferMatrixReport

        return TransferMatrixReport.from_dict(body)
    if kind == "significance":
        return SignificanceResult(**body)
    if kind == "kappa":
        return KappaScore(**body)
    return payload
