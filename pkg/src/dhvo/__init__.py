"""Hybrid-action DAG offloading for vehicles: GAT state encoder + parameterized NAF head."""

__version__ = "0.1.0"
