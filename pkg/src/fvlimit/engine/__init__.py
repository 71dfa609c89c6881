"""Exact event-driven simulation and generator tools."""

from .simulate import InitialLaw, SimConfig, Simulator, TrajectoryRecord, pack, simulate, simulate_replicates

__all__ = ["InitialLaw", "SimConfig", "Simulator", "TrajectoryRecord", "pack", "simulate", "simulate_replicates"]
