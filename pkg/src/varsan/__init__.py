"""Run-time partitioned sanitization over a small interpreted IR.

The package builds multi-variant programs (sanitized, unsanitized,
coverage-instrumented, fast), routes calls through a per-function dispatch
table, and flips active variants at run time under pluggable policies.
Costs are measured in interpreted-instruction units, which makes every
overhead number in the test suite deterministic.
"""

__version__ = "0.1.0"
