"""Continual stereo matching by searching, growing and routing task-specific
network paths."""

from .arch import CellGenotype, NetworkTopology, build_base_topology, validate_genotype
from .config import RunConfig, load_config
from .growth import GrowthLedger, average_reuse_rate, growth_score, init_growth_state
from .harness import RunReport, run_continual, run_finetune_baseline
from .metrics import compute_bwt, compute_fae, d1_all, epe
from .scenes import SceneSpec, generate_scene
from .search import init_search_state, run_cell_search

__version__ = "0.1.0"
