"""Stateful grammar-based fuzzer for service-based-interface REST APIs.

The package splits into a spec pipeline (load, bundle, rewrite, validate),
a request-grammar compiler, an OAuth2 client-credentials token subsystem,
a sequence-planning fuzz engine with targeted checkers, a bug detector
with bucketed reports and replay artifacts, and a seeded mock core
testbed used to exercise the whole loop at desk scale.
"""

__version__ = "0.1.0"
