"""Discrete-event simulator of a multi-cluster SDN control plane."""
