"""
Tests for the FedKACE streaming federated continual learning simulator.

- unit/: model math, schedule and data draws, buffer scoring and
  maintenance, replay weighting, the switching rule, metrics, config
  and the acceptance-suite checks
- integration/: full federated runs across every method variant and
  the command line

Shared fixtures (tiny experiment config, scored-item factory, seeded
generators) live in conftest.py.
"""
