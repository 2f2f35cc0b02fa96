from .attack import AttackConfig, MonitorState, TriggerOutcome, accumulative_perturb, craft_trigger, pgd_perturb
from .checkpoints import Checkpoint, CheckpointStore
from .defense import DefenseConfig, DefenseKind, apply_defense
from .discrepancy import Measure, MDReport, ThresholdSchedule, memorization_discrepancy, threshold_at
from .errors import CheckpointLookupError, ConfigError, ContractViolation, GradcheckFailure, NumericalError
from .numcore import Batch, ModelShape, ParamState
from .stream import MetricsRow, StreamConfig, burn_in, victim_phase
