"""
System package for the reranking pipeline.
Contains configuration validation, run-manifest state and stage orchestration.
"""
