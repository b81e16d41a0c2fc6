"""Modeling, simulation, and metastability analysis of request-response server systems."""

from metaq.model import (
    ClientSpec,
    ServerSpec,
    ProgramSpec,
    ParamVector,
    parse_program,
    render_program,
    average_clients,
    substitute_params,
)
from metaq.ctmc import CtmcModel, compile_ctmc
from metaq.des import Trajectory, Schedule, simulate, ensemble_average

__version__ = "0.1.0"

__all__ = [
    "ClientSpec",
    "ServerSpec",
    "ProgramSpec",
    "ParamVector",
    "parse_program",
    "render_program",
    "average_clients",
    "substitute_params",
    "CtmcModel",
    "compile_ctmc",
    "Trajectory",
    "Schedule",
    "simulate",
    "ensemble_average",
]
