"""Command-line entry point: analyze, resolve, oracle, bench and ablate."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .cfg import to_dot
from .isa import BinaryImage, FixtureError, SymbolTag, load_fixture, with_symbol_tags
from .metrics import (MetricsError, Run, Prediction, aggregate, best_of_k, load_corpus,
                      load_predictions, render_matrix, score_run)
from .oracle import OracleError, enumerate_interleavings, parse_scenario
from .races import RaceReport, detect_races, vulnerable_functions
from .symbols import DEFAULT_TAGS
from .taint import AnalysisError, AnalysisOpts, MethodSummary, Mode, analyze_method
from .vtable import recover_virtual_calls

EXIT_OK, EXIT_INPUT, EXIT_ANALYSIS = 0, 1, 2


class ConfigError(ValueError):
    pass


_SCALARS = ("ww_self", "lock_cap", "depth", "format", "rr_filter", "deref_recursion")


@dataclass
class RunConfig:
    mode: Mode = Mode.E4E5
    ww_self: bool = True
    lock_cap: int = 16
    depth: int = 2
    format: str = "json"
    symbols: dict[str, SymbolTag] = field(default_factory=dict)
    rr_filter: Optional[bool] = None        # overrides the mode's read/read filter
    deref_recursion: Optional[bool] = None  # overrides the mode's sub-object following

    def __post_init__(self) -> None:
        if self.lock_cap < 1 or self.depth < 1:
            raise ConfigError("lock_cap and depth must be >= 1")
        if self.format not in ("json", "md"):
            raise ConfigError(f"unknown format {self.format!r}")

    def opts(self) -> AnalysisOpts:
        opts = AnalysisOpts.for_mode(self.mode, ww_self=self.ww_self, lock_cap=self.lock_cap,
                                     depth=self.depth)
        switches = {k: v for k, v in (("rr_filter", self.rr_filter),
                                      ("deref_recursion", self.deref_recursion)) if v is not None}
        return replace(opts, **switches)

    @classmethod
    def load(cls, path: Optional[str], args: argparse.Namespace) -> "RunConfig":
        raw: dict = {}
        if path:
            try:
                raw = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: expected a JSON object")
            unknown = set(raw) - {"mode", "ww_self", "lock_cap", "depth", "format", "symbols",
                                  "rr_filter", "deref_recursion"}
            if unknown:
                raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        try:
            symbols = {str(k): SymbolTag(v) for k, v in raw.get("symbols", {}).items()}
            values = {k: raw[k] for k in _SCALARS if k in raw}
            mode = Mode(raw.get("mode", "e4e5"))
        except (ValueError, AttributeError) as exc:
            raise ConfigError(str(exc)) from exc
        for name in _SCALARS:
            if getattr(args, name, None) is not None:
                values[name] = getattr(args, name)
        if getattr(args, "mode", None) is not None:
            mode = Mode(args.mode)
        return cls(mode=mode, symbols=symbols, **values)


@dataclass
class AnalysisResult:
    image: str
    config: RunConfig
    summaries: list[MethodSummary]
    reports: list[RaceReport]
    diagnostics: list[str]

    @property
    def vulnerable(self) -> list[str]:
        return sorted(vulnerable_functions(self.reports))

    def to_json(self, with_summaries: bool = False) -> dict:
        opts = self.config.opts()
        doc = {"image": self.image, "mode": self.config.mode.value,
               "rr_filter": opts.rr_filter, "deref_recursion": opts.deref_recursion,
               "races": [r.to_json() for r in self.reports],
               "vulnerable": self.vulnerable, "diagnostics": self.diagnostics}
        if with_summaries:
            doc["summaries"] = [s.to_json() for s in self.summaries]
        return doc

    def to_markdown(self) -> str:
        lines = [f"# {self.image} ({self.config.mode.label})", ""]
        if self.reports:
            lines += ["| path | class | self | a | b |", "|---|---|---|---|---|"]
            for r in self.reports:
                a = f"{r.a.method}@0x{r.a.site:x} {r.a.kind.value}"
                b = f"{r.b.method}@0x{r.b.site:x} {r.b.kind.value}"
                lines.append(f"| `{r.path}` | {r.cls.value} | {'yes' if r.self_race else 'no'} "
                             f"| {a} | {b} |")
        else:
            lines.append("No races.")
        lines += ["", "Vulnerable: " + (", ".join(self.vulnerable) or "none")]
        if self.diagnostics:
            lines += ["", "Diagnostics:"] + [f"- {d}" for d in self.diagnostics]
        return "\n".join(lines) + "\n"


def prepare_image(path: str, config: RunConfig) -> BinaryImage:
    image = load_fixture(path)
    return with_symbol_tags(image, {**DEFAULT_TAGS, **config.symbols})


def analyze_image(image: BinaryImage, config: RunConfig, name: str = "") -> AnalysisResult:
    """Resolve virtual calls, summarize every entry method and pair the accesses."""
    if not image.entries:
        raise AnalysisError("fixture declares no .entry methods")
    opts = config.opts()
    recovery = recover_virtual_calls(image, opts)
    summaries = [analyze_method(image, entry, recovery.resolved, opts) for entry in image.entries]
    reports = detect_races(summaries, opts)
    diagnostics = sorted({d for s in summaries for d in s.diagnostics}
                         | {f"0x{u.call_site:x}: unresolved indirect call in {u.function}: {u.reason}"
                            for u in recovery.unresolved})
    return AnalysisResult(name, config, summaries, reports, diagnostics)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def cmd_analyze(args: argparse.Namespace) -> int:
    config = RunConfig.load(args.config, args)
    image = prepare_image(args.fixture, config)
    result = analyze_image(image, config, Path(args.fixture).stem)
    if args.dot:
        from .cfg import build_cfg
        cfgs = [build_cfg(f) for f in sorted(image.functions.values(), key=lambda f: f.entry)]
        Path(args.dot).write_text(to_dot(cfgs))
    if config.format == "md":
        sys.stdout.write(result.to_markdown())
    else:
        sys.stdout.write(_dump(result.to_json(args.summaries)))
    return EXIT_OK


def cmd_resolve(args: argparse.Namespace) -> int:
    config = RunConfig.load(args.config, args)
    image = prepare_image(args.fixture, config)
    sys.stdout.write(_dump(recover_virtual_calls(image, config.opts()).to_json()))
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(args.scenario).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OracleError(f"{args.scenario}: {exc}") from exc
    programs, init = parse_scenario(doc)
    verdict = enumerate_interleavings(programs, init)
    sys.stdout.write(_dump(verdict.to_json(programs)))
    return EXIT_OK


def _read_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MetricsError(f"{path}: {exc}") from exc


def cmd_bench(args: argparse.Namespace) -> int:
    corpus = load_corpus(_read_json(args.corpus))
    runs = load_predictions(_read_json(args.predictions))
    k = args.best_of or len(runs)
    if k < 1 or k > len(runs):
        raise MetricsError(f"--best-of {k} needs at least {k} runs, got {len(runs)}")
    scored = {run.run_id: score_run(corpus, run) for run in runs[:k]}
    best = best_of_k(list(scored.values()))
    label = f"best-of-{k}"
    if args.format == "md":
        sys.stdout.write(render_matrix({**scored, label: best}))
    else:
        doc = {"runs": [{"run_id": rid, **aggregate(res).to_json()} for rid, res in scored.items()],
               "best_of": {"k": k, **aggregate(best).to_json()}}
        sys.stdout.write(_dump(doc))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    corpus_path = Path(args.corpus)
    corpus = load_corpus(_read_json(args.corpus))
    cases = {cid: lab for cid, lab in corpus.items() if lab.fixture}
    if not cases:
        raise MetricsError("no corpus case names a fixture")
    base = RunConfig.load(args.config, args)
    columns = {}
    for mode in Mode:
        config = replace(base, mode=mode, format="json", rr_filter=None, deref_recursion=None)
        run = Run(mode.value)
        for cid, lab in sorted(cases.items()):
            image = prepare_image(str(corpus_path.parent / lab.fixture), config)
            result = analyze_image(image, config, cid)
            predicted = frozenset(result.vulnerable) & set(lab.entry_functions)
            run.predictions[cid] = Prediction(cid, predicted)
        columns[mode.label] = score_run(cases, run)
    if args.format == "md":
        sys.stdout.write(render_matrix(columns))
    else:
        sys.stdout.write(_dump({label: aggregate(res).to_json() for label, res in columns.items()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comracer",
                                     description="Static race detector for COM-style member fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    def analysis_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--mode", choices=[m.value for m in Mode], default=None,
                       help="base: all pairs; e4: drop read/read; e4e5: also follow sub-objects "
                            "(default e4e5)")
        p.add_argument("--ww-self", dest="ww_self", action=argparse.BooleanOptionalAction,
                       default=None, help="report a lone unguarded write racing with itself")
        p.add_argument("--rr-filter", dest="rr_filter", action=argparse.BooleanOptionalAction,
                       default=None, help="override the mode: never pair two reads")
        p.add_argument("--deref-recursion", dest="deref_recursion",
                       action=argparse.BooleanOptionalAction, default=None,
                       help="override the mode: follow member calls on sub-objects")
        p.add_argument("--lock-cap", dest="lock_cap", type=int, default=None)
        p.add_argument("--depth", type=int, default=None, help="longest field path")
        p.add_argument("--config", help="JSON config: mode, ww_self, rr_filter, deref_recursion, "
                                        "lock_cap, depth, format, symbols")

    p = sub.add_parser("analyze", help="report racing field accesses in a fixture")
    p.add_argument("fixture")
    analysis_flags(p)
    p.add_argument("--format", choices=["json", "md"], default=None)
    p.add_argument("--dot", help="write the CFGs of all functions as Graphviz")
    p.add_argument("--summaries", action="store_true", help="include per-method access summaries")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("resolve", help="print recovered virtual-call targets")
    p.add_argument("fixture")
    p.add_argument("--config")
    p.set_defaults(func=cmd_resolve)

    p = sub.add_parser("oracle", help="enumerate interleavings of a scenario")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="score predictions against a labeled corpus")
    p.add_argument("corpus")
    p.add_argument("predictions")
    p.add_argument("--best-of", dest="best_of", type=int, default=None)
    p.add_argument("--format", choices=["json", "md"], default="json")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="analyze every corpus fixture in all three modes and score")
    p.add_argument("corpus")
    analysis_flags(p)
    p.add_argument("--format", choices=["json", "md"], default="md")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FixtureError as exc:
        where = getattr(args, "fixture", "")
        print(f"{where}:{exc.line}:{exc.column}: {exc.message}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, OracleError, MetricsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AnalysisError as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
