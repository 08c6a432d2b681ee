"""Workload driver, anomaly counting, oracle and fault injection."""
