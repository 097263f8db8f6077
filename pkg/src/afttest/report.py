"""JSON result documents and static path plots.

A result document is a JSON object whose array fields keep the stored
process shapes (``n x n`` for omnibus, ``n`` for link and covform).  Floats
are written with ``repr`` precision, so a save/load cycle is lossless.

Plots are rendered as plain SVG polylines with fixed-precision coordinates,
which keeps the output byte-stable.  Every plotted series is also written to
a CSV companion with columns ``panel, series, x, y``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NotAfttestResult, QuantileCountNotFive
from .gof import GofTestResult

CLASS_TAG = "afttest"
DEFAULT_QUANTILES = (10.0, 25.0, 50.0, 75.0, 90.0)

_ARRAY_FIELDS = ("beta", "SE_process", "obs_process", "apprx_process",
                 "obs_std_process", "apprx_std_process")


@dataclass(eq=False)
class ResultDocument:
    beta: np.ndarray
    p_value: float
    p_std_value: float
    SE_process: np.ndarray
    obs_process: np.ndarray
    apprx_process: np.ndarray
    obs_std_process: np.ndarray
    apprx_std_process: np.ndarray
    npath: int
    npath_effective: int
    npathsave: int
    testType: str
    estMethod: str
    eqType: str | None
    seed: int
    data: dict  # time, delta, covariates (as used for fitting)
    covTested: int | None = None
    names: list = field(default_factory=list)
    version: str = __version__
    call: str = ""

    @classmethod
    def from_result(cls, r: GofTestResult, call: str = "") -> "ResultDocument":
        return cls(
            beta=np.asarray(r.beta, float),
            p_value=float(r.p_value),
            p_std_value=float(r.p_std_value),
            SE_process=r.SE_process,
            obs_process=r.obs_process,
            apprx_process=r.apprx_process,
            obs_std_process=r.obs_std_process,
            apprx_std_process=r.apprx_std_process,
            npath=int(r.npath),
            npath_effective=int(r.npath_effective),
            npathsave=int(r.npathsave),
            testType=r.test_type,
            estMethod=r.est_method,
            eqType=r.eq_type,
            seed=int(r.seed),
            data={"time": np.asarray(r.time, float),
                  "delta": np.asarray(r.delta, float),
                  "covariates": np.asarray(r.covariates, float)},
            covTested=r.cov_tested,
            names=list(r.names),
            call=call,
        )

    @property
    def n(self) -> int:
        return self.data["time"].shape[0]

    @property
    def stored_paths(self) -> int:
        return self.apprx_process.shape[0]

    def to_dict(self) -> dict:
        out = {"class": CLASS_TAG}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if name == "data":
                value = {k: np.asarray(v).tolist() for k, v in value.items()}
            elif isinstance(value, np.ndarray):
                value = value.tolist()
            out[name] = value
        return out

    @classmethod
    def from_dict(cls, obj) -> "ResultDocument":
        if not isinstance(obj, dict) or obj.get("class") != CLASS_TAG:
            raise NotAfttestResult()
        try:
            kw = {k: obj[k] for k in cls.__dataclass_fields__ if k in obj}
            for name in _ARRAY_FIELDS:
                kw[name] = np.asarray(obj[name], dtype=float)
            kw["data"] = {k: np.asarray(obj["data"][k], dtype=float)
                          for k in ("time", "delta", "covariates")}
            doc = cls(**kw)
        except (KeyError, TypeError, ValueError):
            raise NotAfttestResult() from None
        doc._check_shapes()
        return doc

    def _check_shapes(self):
        n = self.n
        want = (n, n) if self.testType == "omnibus" else (n,)
        for name in ("obs_process", "SE_process", "obs_std_process"):
            if getattr(self, name).shape != want:
                raise NotAfttestResult()
        for name in ("apprx_process", "apprx_std_process"):
            arr = getattr(self, name)
            if arr.size == 0:
                setattr(self, name, arr.reshape((0,) + want))
            elif arr.shape[1:] != want:
                raise NotAfttestResult()

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ResultDocument":
        try:
            obj = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise NotAfttestResult() from None
        return cls.from_dict(obj)

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ResultDocument":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError:
            raise NotAfttestResult() from None
        return cls.loads(text)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResultDocument):
            return NotImplemented
        return self.dumps() == other.dumps()


def parse_quantiles(spec) -> tuple[float, ...]:
    """Five percentages in [0, 100], given as a sequence or ``"q1,q2,..."``."""
    if spec is None:
        return DEFAULT_QUANTILES
    if isinstance(spec, str):
        parts = [s for s in spec.replace(" ", "").split(",") if s]
        try:
            spec = [float(s) for s in parts]
        except ValueError:
            raise ValueError(f"quantiles must be numbers, got {parts!r}") from None
    q = tuple(float(x) for x in spec)
    if len(q) != 5:
        raise QuantileCountNotFive(len(q))
    if not all(0.0 <= x <= 100.0 for x in q):
        raise ValueError("quantiles must be percentages in [0, 100]")
    return q


def quantile_rows(n: int, quantiles) -> list[int]:
    """0-based anchor rows at the given percentages of the anchor rank."""
    return [min(max(math.ceil(q / 100.0 * n) - 1, 0), n - 1) for q in quantiles]


@dataclass
class Panel:
    title: str
    x: np.ndarray
    observed: np.ndarray
    paths: np.ndarray  # (k, len(x))


def plot_panels(doc: ResultDocument, npath: int = 50, std: bool = True,
                quantiles=None) -> list[Panel]:
    """Series to plot: the observed path plus the first ``npath`` stored paths.

    ``npath`` is capped at the number of stored paths.
    """
    k = min(max(int(npath), 0), doc.stored_paths)
    obs = doc.obs_std_process if std else doc.obs_process
    paths = (doc.apprx_std_process if std else doc.apprx_process)[:k]
    n = doc.n
    x = np.arange(1, n + 1, dtype=float)
    if doc.testType != "omnibus":
        title = doc.testType
        if doc.testType == "covform" and doc.covTested and doc.names:
            title = f"covform: {doc.names[doc.covTested - 1]}"
        return [Panel(title, x, obs, paths)]
    qs = parse_quantiles(quantiles)
    return [Panel(f"z at {q:g}%", x, obs[row], paths[:, row])
            for q, row in zip(qs, quantile_rows(n, qs))]


def panels_csv(panels: list[Panel]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["panel", "series", "x", "y"])
    for p, panel in enumerate(panels, start=1):
        series = [("observed", panel.observed)]
        series += [(f"path{b}", s) for b, s in enumerate(panel.paths, start=1)]
        for name, y in series:
            for xv, yv in zip(panel.x, y):
                w.writerow([p, name, repr(float(xv)), repr(float(yv))])
    return buf.getvalue()


_W, _H, _PAD = 360.0, 260.0, 40.0


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _polyline(xs, ys, color, width) -> str:
    pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(xs, ys))
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{width}" '
            f'points="{pts}"/>')


def panels_svg(panels: list[Panel], ylabel: str) -> str:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(_W * len(panels))}" '
           f'height="{_fmt(_H)}" font-family="sans-serif" font-size="11">']
    for p, panel in enumerate(panels):
        x0 = p * _W
        ys = [panel.observed] + list(panel.paths)
        lo = min(float(np.min(y)) for y in ys)
        hi = max(float(np.max(y)) for y in ys)
        if hi - lo < 1e-12:
            lo, hi = lo - 1.0, hi + 1.0
        xl, xh = float(panel.x[0]), float(panel.x[-1])
        span = xh - xl if xh > xl else 1.0

        def sx(v, x0=x0, xl=xl, span=span):
            return x0 + _PAD + (v - xl) / span * (_W - 2 * _PAD)

        def sy(v, lo=lo, hi=hi):
            return _H - _PAD - (v - lo) / (hi - lo) * (_H - 2 * _PAD)

        left, right = x0 + _PAD, x0 + _W - _PAD
        top, bottom = _PAD, _H - _PAD
        out.append(f'<text x="{_fmt(x0 + _W / 2)}" y="{_fmt(_PAD / 2)}" '
                   f'text-anchor="middle">{panel.title}</text>')
        out.append(f'<path d="M{_fmt(left)},{_fmt(top)} V{_fmt(bottom)} H{_fmt(right)}" '
                   'fill="none" stroke="black"/>')
        if lo < 0 < hi:
            out.append(f'<line x1="{_fmt(left)}" y1="{_fmt(sy(0.0))}" x2="{_fmt(right)}" '
                       f'y2="{_fmt(sy(0.0))}" stroke="#bbbbbb" stroke-dasharray="3,3"/>')
        out.append(f'<text x="{_fmt(left - 4)}" y="{_fmt(top + 4)}" '
                   f'text-anchor="end">{hi:.3g}</text>')
        out.append(f'<text x="{_fmt(left - 4)}" y="{_fmt(bottom)}" '
                   f'text-anchor="end">{lo:.3g}</text>')
        out.append(f'<text x="{_fmt(x0 + _W / 2)}" y="{_fmt(_H - 8)}" '
                   'text-anchor="middle">rank</text>')
        if p == 0:
            out.append(f'<text transform="translate(12,{_fmt(_H / 2)}) rotate(-90)" '
                       f'text-anchor="middle">{ylabel}</text>')
        xs = [sx(v) for v in panel.x]
        for path in panel.paths:
            out.append(_polyline(xs, [sy(v) for v in path], "#999999", "0.6"))
        out.append(_polyline(xs, [sy(v) for v in panel.observed], "#d62728", "1.5"))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(doc: ResultDocument, svg_path, npath: int = 50, std: bool = True,
              quantiles=None) -> Path:
    """Write the SVG plot and its CSV companion; returns the CSV path."""
    panels = plot_panels(doc, npath, std, quantiles)
    svg_path = Path(svg_path)
    ylabel = "standardized process" if std else "process"
    svg_path.write_text(panels_svg(panels, ylabel), encoding="utf-8")
    csv_path = svg_path.with_suffix(".csv")
    csv_path.write_text(panels_csv(panels), encoding="utf-8")
    return csv_path
