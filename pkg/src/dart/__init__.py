"""Difficulty-aware early-exit policies over recorded inference traces."""

from .adaptive import (AdaptationConfig, AdaptationEvent, AdaptationManager,
                       BanditState, CoefficientSet, SlidingWindow, WindowEntry,
                       WindowStats, bandit_reward, class_update,
                       performance_signal, temporal_update, ucb_select)
from .difficulty import (DifficultyScore, DifficultyWeights, ImagePlane,
                         difficulty, edge_density, gradient_complexity,
                         pixel_variance, sobel_magnitude, to_grayscale)
from .engine import (ExitOutcome, ExitPolicy, SimulationResult, decide_exit,
                     effective_thresholds, load_policy, read_outcomes,
                     save_policy, simulate, write_outcomes)
from .metrics import (Comparison, RunReport, aggregate, compare, daes, power,
                      power_efficiency, speedup)
from .optimizer import (MdpModel, ObjectiveConfig, QTable, ThresholdVector,
                        build_mdp, evaluate_objective, extract_thresholds,
                        grid_search, quantile_candidates, value_iterate,
                        value_iterate_fixed_point)
from .trace import (ExitProfile, SampleRecord, TraceFormatError, TraceSet,
                    load_image, read_trace, synth_trace, write_trace)

__version__ = "0.1.0"
