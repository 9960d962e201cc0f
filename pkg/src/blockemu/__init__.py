"""Single-process emulator of public proof-of-work blockchains."""
from .calibration import DifficultyTimeMap, SolveTimeStats, calibrate, load_map, save_map, select_difficulty
from .consensus import ConsensusProvider, NakamotoReal, NakamotoReplay, Proof, register_provider
from .engine import Emulation, RunMetrics, SimConfig, run_emulation
from .ledger import Block, ChainStore, Transaction
from .netqueue import EventQueue, LatencyModel
from .puzzle import Difficulty, parse_difficulty

__version__ = "0.1.0"

__all__ = [
    "DifficultyTimeMap", "SolveTimeStats", "calibrate", "load_map", "save_map", "select_difficulty",
    "ConsensusProvider", "NakamotoReal", "NakamotoReplay", "Proof", "register_provider",
    "Emulation", "RunMetrics", "SimConfig", "run_emulation",
    "Block", "ChainStore", "Transaction", "EventQueue", "LatencyModel", "Difficulty", "parse_difficulty",
]
