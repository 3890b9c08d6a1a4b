"""Feasible-path AC OPF engine: case ingestion, phase-adjusted power flow and sequential convex restriction."""
