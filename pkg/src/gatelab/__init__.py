"""Recurrent cells (LSTM, GRU, MGU) with boundless refined gates, trained with
exact manual BPTT in NumPy, plus the adding, counting and character-level
language-model experiments and gate instrumentation."""
from .cells import Arch, CellConfig, CellParams, ConfigError, RefineMode
from .engine import Model
from .numkit import ContractError, Rng

__all__ = ["Arch", "CellConfig", "CellParams", "ConfigError", "ContractError", "Model",
           "RefineMode", "Rng"]
__version__ = "0.1.0"
