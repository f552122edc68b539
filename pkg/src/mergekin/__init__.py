"""mergekin: model merging, weight-delta kinship, and iterative merge
evolution over safetensors-style checkpoints."""

from .evaluators import (EvaluatorError, ExternalEvaluator, SyntheticEvaluator,
                         SyntheticTask, evaluator_from_config)
from .evolution import (EvolutionError, EvolutionLog, ModelRecord, Pool,
                        StopCriterion, StrategyConfig, export_family_tree,
                        family_tree, generation_report, report_to_csv,
                        run_random, run_topk_greedy, run_topk_greedy_kinship,
                        select_exploration_partner)
from .kinship import (DeltaVector, KinshipError, KinshipMatrix, METRICS,
                      compute_delta, delta_from_array, kinship_group,
                      kinship_matrix, sim_pair)
from .metrics import (EvalResult, MetricsError, atpd,
                      average_task_performance, merge_gain, pearson_with_p)
from .ops import (MergeError, MergeRecipe, OPERATORS, apply_recipe, dare_drop,
                  merge_dare_ties, merge_linear, merge_slerp, merge_ties)
from .tensorstore import (TensorMap, TensorMeta, TensorStoreError,
                          check_compatible, load_tensor_map, save_tensor_map)

__version__ = "0.1.0"

__all__ = [
    "DeltaVector", "EvalResult", "EvaluatorError", "EvolutionError",
    "EvolutionLog", "ExternalEvaluator", "KinshipError", "KinshipMatrix",
    "METRICS", "MergeError", "MergeRecipe", "MetricsError", "ModelRecord",
    "OPERATORS", "Pool", "StopCriterion", "StrategyConfig", "SyntheticEvaluator",
    "SyntheticTask", "TensorMap", "TensorMeta", "TensorStoreError",
    "apply_recipe", "atpd", "average_task_performance", "check_compatible",
    "compute_delta", "dare_drop", "delta_from_array", "evaluator_from_config",
    "export_family_tree", "family_tree", "generation_report", "kinship_group",
    "kinship_matrix", "load_tensor_map", "merge_dare_ties", "merge_gain",
    "merge_linear", "merge_slerp", "merge_ties", "pearson_with_p",
    "report_to_csv", "run_random", "run_topk_greedy",
    "run_topk_greedy_kinship", "save_tensor_map",
    "select_exploration_partner", "sim_pair",
]
