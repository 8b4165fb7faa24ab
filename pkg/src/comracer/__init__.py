"""Static detection of racing member-field accesses in COM-style binaries."""
from .domain import FieldPath
from .isa import BinaryImage, FixtureError, load_fixture, parse_fixture, serialize
from .oracle import enumerate_interleavings, summary_to_program
from .races import ConflictClass, RaceReport, detect_races, filter_rr, vulnerable_functions
from .taint import AnalysisOpts, FieldAccess, MethodSummary, Mode, analyze_method
from .vtable import recover_virtual_calls

__all__ = [
    "AnalysisOpts", "BinaryImage", "ConflictClass", "FieldAccess", "FieldPath", "FixtureError",
    "MethodSummary", "Mode", "RaceReport", "analyze_method", "detect_races",
    "enumerate_interleavings", "filter_rr", "load_fixture", "parse_fixture",
    "recover_virtual_calls", "serialize", "summary_to_program", "vulnerable_functions",
]
