"""Cluster-aware neural-collapse geometry for prototype tuning at desk scale."""
