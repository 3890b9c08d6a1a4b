"""Feaspath application: engine, HTTP service and persistence."""
