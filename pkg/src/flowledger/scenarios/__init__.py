"""Bundled scenario files (JSON), loaded by flowledger.simnet.scenario."""
