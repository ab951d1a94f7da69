"""Run manifests, synthetic data, execution and reporting."""
