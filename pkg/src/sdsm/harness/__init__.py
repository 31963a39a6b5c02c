"""Run orchestration: configuration, rng streams, comparisons, CLI."""
