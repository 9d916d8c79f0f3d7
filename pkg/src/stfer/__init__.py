"""Text-guided any-time person re-identification on numpy: a transformer
encoder with semantic token filtering, scenario expert routing, a synthetic
RGB/IR dataset and a six-scenario retrieval harness."""
from .backbone import NUM_SCENARIOS, ModelConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .evaluation import EvalReport, any_time_average
from .model import STFER, Batch
from .synth_data import SCENARIOS, generate_dataset, load_dataset, save_dataset
from .training import evaluate, export_heatmap, train

__version__ = "0.1.0"
