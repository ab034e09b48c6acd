"""Non-transferable prompt learning on frozen vision-language backbones."""

from ntprompt.backbone import BackboneSpec, ImageBatch, MultiScaleFeatures, ToyBackbone, make_backbone
from ntprompt.bank import STAM, FeatureBank, build_feature_bank
from ntprompt.errors import BankConstructionError, ConfigError, DataError, NTPromptError, NumericalAbort
from ntprompt.metrics import (
    AccuracyPair,
    MetricsReport,
    accuracy,
    authorization_score,
    drop_rates,
    ownership_score,
    weighted_drop,
)
from ntprompt.objective import LossBreakdown, total_loss
from ntprompt.prompt import IPProjector, assemble_prompts, style_statistics
from ntprompt.scenarios import ScenarioSpec, WatermarkSpec, build_scenario, generate_unauthorized_domain
from ntprompt.trainer import TrainConfig, predict, train_baseline, train_target_free, train_target_specified

__version__ = "0.1.0"
