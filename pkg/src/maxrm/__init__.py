"""Random forests that minimize the maximum risk across training environments."""

__version__ = "0.1.0"

from .dataplane import DgpConfig, EnvDataset, default_config, generate, load_csv, write_csv  # noqa: E402
from .cart import Forest, Tree, TreeHyperparams, fit_cart_tree  # noqa: E402
from .risk import RiskSpec, make_risk  # noqa: E402
from .minimax import SolverConfig  # noqa: E402
from .strategies import MaxRmForest, StrategySpec, fit_maxrm_forest, posthoc_adjust  # noqa: E402
from .baselines import fit_magging, fit_rf, oracle_analytic_risks  # noqa: E402

__all__ = [
    "DgpConfig", "EnvDataset", "default_config", "generate", "load_csv", "write_csv",
    "Forest", "Tree", "TreeHyperparams", "fit_cart_tree", "RiskSpec", "make_risk", "SolverConfig",
    "MaxRmForest", "StrategySpec", "fit_maxrm_forest", "posthoc_adjust",
    "fit_magging", "fit_rf", "oracle_analytic_risks",
]
