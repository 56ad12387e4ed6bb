"""Orchestration: config loading, run manifests, and the stage CLI."""
