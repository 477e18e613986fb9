"""Posterior summaries of fitted models: mean, sd, 95% credible interval and significance."""

import io
import json
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from crashtype_bayes.diagnostics import MEAN_PHI, diagnose
from crashtype_bayes.exceptions import ReportError, ReportFormatError
from crashtype_bayes.sampler import Trace

logger = logging.getLogger(__name__)

# positive by construction, never tested against zero
POSITIVE_PARAMETERS = ("r", "sigma2_phi")
REPORT_FORMATS = ("text", "csv", "json")
COLUMNS = ("variable", "mean", "sd", "q2.5", "q97.5", "significant", "r_hat", "ess")
INSIGNIFICANT_MARKER = "(ns)"


class PosteriorSummary(BaseModel):
    """Posterior summary row of one parameter

    significant is None for r and σ_φ²; otherwise True when the 95% interval
    excludes zero.
    """

    name: str
    mean: float
    sd: float
    q025: float
    q975: float
    significant: Optional[bool] = None
    r_hat: Optional[float] = None
    ess: Optional[float] = None
    reference: Optional[Tuple[float, float]] = None

    model_config = {"frozen": True}

    def as_row(self) -> Dict[str, object]:
        return {
            "variable": self.name,
            "mean": self.mean,
            "sd": self.sd,
            "q2.5": self.q025,
            "q97.5": self.q975,
            "significant": self.significant,
            "r_hat": self.r_hat,
            "ess": self.ess,
        }


def significance(q025: float, q975: float) -> bool:
    return q025 > 0 or q975 < 0


def summarize(
    traces: Sequence[Trace],
    include_phi: bool = False,
    reference: Optional[Dict[str, Tuple[float, float]]] = None,
) -> List[PosteriorSummary]:
    """
    Pool the chains and summarize every parameter

    Quantiles interpolate linearly between order statistics; sd is the sample
    sd (n−1) of the pooled draws. R̂ and ESS come from diagnostics.

    Raises:
        ReportError: no traces or no draws
    """
    if not traces or all(len(t) == 0 for t in traces):
        raise ReportError("no posterior draws to summarize")
    names = traces[0].names
    if any(t.names != names for t in traces):
        raise ReportError("traces disagree on parameter names")

    diagnostics = {}
    if min(len(t) for t in traces) >= 10:
        report = diagnose(traces, include_phi=include_phi)
        diagnostics = {p.name: p for p in report.parameters}
    else:
        logger.warning("fewer than 10 draws per chain, R-hat and ESS omitted")

    summaries = []
    for name in names:
        if name == MEAN_PHI or (name.startswith("phi[") and not include_phi):
            continue
        pooled = np.concatenate([t[name] for t in traces])
        q025, q975 = np.quantile(pooled, [0.025, 0.975], method="linear")
        diag = diagnostics.get(name)
        summaries.append(
            PosteriorSummary(
                name=name,
                mean=float(np.mean(pooled)),
                sd=float(np.std(pooled, ddof=1)) if pooled.size > 1 else 0.0,
                q025=float(q025),
                q975=float(q975),
                significant=None if name in POSITIVE_PARAMETERS else significance(q025, q975),
                r_hat=diag.r_hat if diag else None,
                ess=diag.ess if diag else None,
                reference=(reference or {}).get(name),
            )
        )
    return summaries


def _format_number(value: Optional[float], digits: int = 4) -> str:
    if value is None:
        return "-"
    return f"{value:.{digits}g}"


def _render_text(summaries: Sequence[PosteriorSummary]) -> str:
    with_reference = any(s.reference is not None for s in summaries)
    header = f"{'variable':<32}{'mean':>11}{'sd':>11}{'q2.5':>11}{'q97.5':>11}{'signif':>8}{'R-hat':>8}{'ESS':>8}"
    if with_reference:
        header += f"{'reference':>22}"
    lines = [header]
    for s in summaries:
        if s.significant is None:
            flag = ""
        else:
            flag = "yes" if s.significant else INSIGNIFICANT_MARKER
        line = (
            f"{s.name:<32}{_format_number(s.mean):>11}{_format_number(s.sd):>11}"
            f"{_format_number(s.q025):>11}{_format_number(s.q975):>11}{flag:>8}"
            f"{_format_number(s.r_hat, 3):>8}{_format_number(s.ess, 4):>8}"
        )
        if with_reference:
            ref = f"{s.reference[0]:g} ({s.reference[1]:g})" if s.reference else "-"
            line += f"{ref:>22}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def render_report(summaries: Sequence[PosteriorSummary], format: str = "text") -> str:
    """
    Render summaries as a text table, CSV or JSON

    Columns are variable, mean, sd, q2.5, q97.5, significant, R̂, ESS in that
    order. Insignificant rows are marked, never dropped.

    Raises:
        ReportError: no summaries
        ReportFormatError: unknown format
    """
    if format not in REPORT_FORMATS:
        raise ReportFormatError(f"unknown report format {format!r}, expected one of {REPORT_FORMATS}")
    if not summaries:
        raise ReportError("nothing to report")

    if format == "text":
        return _render_text(summaries)
    if format == "csv":
        frame = pd.DataFrame([s.as_row() for s in summaries], columns=list(COLUMNS))
        frame["significant"] = frame["significant"].map(
            lambda v: "" if v is None else ("true" if v else "false")
        )
        buffer = io.StringIO()
        frame.to_csv(buffer, index=False, lineterminator="\n", na_rep="")
        return buffer.getvalue()
    rows = []
    for s in summaries:
        row = s.as_row()
        if s.reference is not None:
            row["reference"] = {"mean": s.reference[0], "sd": s.reference[1]}
        rows.append(row)
    return json.dumps({"columns": list(COLUMNS), "rows": rows}, indent=2) + "\n"


def text_histogram(samples: np.ndarray, bins: int = 20, width: int = 50, label: str = "") -> str:
    """Horizontal text histogram of a sample vector"""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ReportError("no samples to plot")
    counts, edges = np.histogram(samples, bins=bins)
    peak = max(int(counts.max()), 1)
    lines = [label] if label else []
    for count, low, high in zip(counts, edges[:-1], edges[1:]):
        bar = "#" * int(round(width * count / peak))
        lines.append(f"[{low:>11.4g}, {high:>11.4g}) {count:>7d} {bar}")
    return "\n".join(lines) + "\n"
