"""Discrete-event simulator for federation topologies."""
