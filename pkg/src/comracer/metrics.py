"""Per-case precision/recall/F1 over vulnerable entry functions, with macro/micro
aggregation and best-of-k run selection.

All arithmetic is exact (``Fraction``); values are rounded to three decimals
only when rendered.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

ZERO, ONE = Fraction(0), Fraction(1)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class CaseLabel:
    case_id: str
    entry_functions: tuple[str, ...]
    vulnerable: frozenset[str]
    fixture: str | None = None

    def __post_init__(self) -> None:
        if not self.entry_functions:
            raise MetricsError(f"case {self.case_id}: no entry functions")
        extra = self.vulnerable - set(self.entry_functions)
        if extra:
            raise MetricsError(f"case {self.case_id}: vulnerable names not entry functions: "
                               f"{sorted(extra)}")


@dataclass(frozen=True)
class Prediction:
    case_id: str
    predicted: frozenset[str]


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> Fraction:
        return _prf(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> Fraction:
        return _prf(self.tp, self.fp, self.fn)[1]

    @property
    def f1(self) -> Fraction:
        return _prf(self.tp, self.fp, self.fn)[2]

    def triple(self) -> tuple[Fraction, Fraction, Fraction]:
        return _prf(self.tp, self.fp, self.fn)

    def to_json(self) -> dict:
        p, r, f = self.triple()
        return {"case_id": self.case_id, "tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": round3(p), "recall": round3(r), "f1": round3(f)}


def _prf(tp: int, fp: int, fn: int) -> tuple[Fraction, Fraction, Fraction]:
    if tp == fp == fn == 0:
        return ONE, ONE, ONE  # nothing to find and nothing claimed
    p = Fraction(tp, tp + fp) if tp + fp else ZERO
    r = Fraction(tp, tp + fn) if tp + fn else ZERO
    f = 2 * p * r / (p + r) if p + r else ZERO
    return p, r, f


def round3(value: Fraction) -> float:
    """Round half up to three decimals."""
    scaled = value * 1000 + Fraction(1, 2)
    return (scaled.numerator // scaled.denominator) / 1000


def score_case(label: CaseLabel, prediction: Prediction) -> CaseResult:
    if label.case_id != prediction.case_id:
        raise MetricsError(f"prediction for {prediction.case_id} scored against {label.case_id}")
    foreign = prediction.predicted - set(label.entry_functions)
    if foreign:
        raise MetricsError(f"case {label.case_id}: unknown function names {sorted(foreign)}")
    tp = len(prediction.predicted & label.vulnerable)
    return CaseResult(label.case_id, tp, len(prediction.predicted) - tp, len(label.vulnerable) - tp)


@dataclass
class Metrics:
    per_case: dict[str, CaseResult]
    macro_precision: Fraction
    macro_recall: Fraction
    macro_f1: Fraction
    micro_precision: Fraction
    micro_recall: Fraction
    micro_f1: Fraction
    tp: int
    fp: int
    fn: int

    def to_json(self) -> dict:
        return {"per_case": [r.to_json() for _, r in sorted(self.per_case.items())],
                "macro": {"precision": round3(self.macro_precision),
                          "recall": round3(self.macro_recall), "f1": round3(self.macro_f1)},
                "micro": {"precision": round3(self.micro_precision),
                          "recall": round3(self.micro_recall), "f1": round3(self.micro_f1)},
                "pooled": {"tp": self.tp, "fp": self.fp, "fn": self.fn}}


def aggregate(results: Iterable[CaseResult]) -> Metrics:
    results = list(results)
    if not results:
        raise MetricsError("nothing to aggregate")
    ids = [r.case_id for r in results]
    if len(set(ids)) != len(ids):
        raise MetricsError("duplicate case ids")
    n = len(results)
    tp, fp, fn = (sum(getattr(r, k) for r in results) for k in ("tp", "fp", "fn"))
    mp, mr, mf = _prf(tp, fp, fn)
    return Metrics(
        per_case={r.case_id: r for r in results},
        macro_precision=sum((r.precision for r in results), ZERO) / n,
        macro_recall=sum((r.recall for r in results), ZERO) / n,
        macro_f1=sum((r.f1 for r in results), ZERO) / n,
        micro_precision=mp, micro_recall=mr, micro_f1=mf, tp=tp, fp=fp, fn=fn,
    )


def best_of_k(runs: Sequence[Sequence[CaseResult]]) -> list[CaseResult]:
    """Per case, the result of the run with the highest F1 (earliest run on ties)."""
    if not runs:
        raise MetricsError("no runs")
    keyed = [{r.case_id: r for r in run} for run in runs]
    cases = set(keyed[0])
    for n, run in enumerate(keyed[1:], 1):
        if set(run) != cases:
            raise MetricsError(f"run {n} covers {sorted(set(run) ^ cases)} differently from run 0")
    best = []
    for case in sorted(cases):
        choice = keyed[0][case]
        for run in keyed[1:]:
            if run[case].f1 > choice.f1:
                choice = run[case]
        best.append(choice)
    return best


# -- corpus and prediction files -------------------------------------------------

def load_corpus(doc: Mapping) -> dict[str, CaseLabel]:
    cases = doc.get("cases")
    if not isinstance(cases, list) or not cases:
        raise MetricsError("corpus needs a nonempty 'cases' list")
    labels: dict[str, CaseLabel] = {}
    for raw in cases:
        try:
            label = CaseLabel(str(raw["case_id"]), tuple(raw["entry_functions"]),
                              frozenset(raw["vulnerable"]), raw.get("fixture"))
        except (KeyError, TypeError) as exc:
            raise MetricsError(f"malformed case {raw!r}") from exc
        if label.case_id in labels:
            raise MetricsError(f"duplicate case {label.case_id}")
        labels[label.case_id] = label
    return labels


@dataclass
class Run:
    run_id: str
    predictions: dict[str, Prediction] = field(default_factory=dict)


def load_predictions(doc: Mapping) -> list[Run]:
    raw_runs = doc.get("runs")
    if not isinstance(raw_runs, list) or not raw_runs:
        raise MetricsError("predictions need a nonempty 'runs' list")
    runs = []
    for n, raw in enumerate(raw_runs):
        run = Run(str(raw.get("run_id", n)))
        for case in raw.get("cases", []):
            try:
                pred = Prediction(str(case["case_id"]), frozenset(case["predicted"]))
            except (KeyError, TypeError) as exc:
                raise MetricsError(f"run {run.run_id}: malformed case {case!r}") from exc
            run.predictions[pred.case_id] = pred
        runs.append(run)
    return runs


def score_run(corpus: Mapping[str, CaseLabel], run: Run) -> list[CaseResult]:
    missing = set(corpus) - set(run.predictions)
    extra = set(run.predictions) - set(corpus)
    if missing or extra:
        raise MetricsError(f"run {run.run_id}: case set differs from corpus "
                           f"(missing {sorted(missing)}, unknown {sorted(extra)})")
    return [score_case(corpus[c], run.predictions[c]) for c in sorted(corpus)]


def render_matrix(columns: Mapping[str, Sequence[CaseResult]]) -> str:
    """Markdown table: one row per case, a P/R/F1 triple per column, then MI and MA rows."""
    labels = list(columns)
    cases = sorted({r.case_id for rs in columns.values() for r in rs})
    by = {lab: {r.case_id: r for r in rs} for lab, rs in columns.items()}
    head = "| Case | " + " | ".join(f"{lab} P | {lab} R | {lab} F1" for lab in labels) + " |"
    rule = "|---|" + "---:|" * (3 * len(labels))
    lines = [head, rule]

    def cells(triple) -> str:
        return " | ".join(f"{round3(v):.3f}" for v in triple)

    for case in cases:
        row = [cells(by[lab][case].triple()) if case in by[lab] else " | ".join(["-"] * 3)
               for lab in labels]
        lines.append(f"| {case} | " + " | ".join(row) + " |")
    aggs = {lab: aggregate(columns[lab]) for lab in labels}
    lines.append("| MI | " + " | ".join(
        cells((m.micro_precision, m.micro_recall, m.micro_f1)) for m in aggs.values()) + " |")
    lines.append("| MA | " + " | ".join(
        cells((m.macro_precision, m.macro_recall, m.macro_f1)) for m in aggs.values()) + " |")
    return "\n".join(lines) + "\n"
