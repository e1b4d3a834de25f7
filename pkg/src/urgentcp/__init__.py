"""Federated urgent-computing control plane.

Ingests sensor data, orchestrates disaster-response workflows as jobs
across multiple (simulated) batch-scheduled machines, estimates queue
wait times from polled history to pick the fastest machine, and exposes
a decision-maker HTTP API and console.
"""

__version__ = "0.1.0"
