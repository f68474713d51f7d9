"""Two-stage orchestration: preprocessing, training, inference, evaluation,
ablations, model summaries and the command-line interface."""
from tgdm.pipeline.ablation import AblationTable, ablation_run
from tgdm.pipeline.config import ABLATIONS, RunConfig, ablation_config, apply_overrides, preset
from tgdm.pipeline.data import SplitSpec, normalize_intensity, preprocess, stage1_target
from tgdm.pipeline.errors import DataError, NumericalError
from tgdm.pipeline.evaluate import evaluate_split
from tgdm.pipeline.infer import Predictor, infer_case, predict_split
from tgdm.pipeline.summary import model_summary, summarize_module
from tgdm.pipeline.train import train_stage1, train_stage2

__all__ = [
    "ABLATIONS", "AblationTable", "DataError", "NumericalError", "Predictor", "RunConfig", "SplitSpec", "ablation_config",
    "ablation_run", "apply_overrides", "evaluate_split", "infer_case", "model_summary", "normalize_intensity",
    "predict_split", "preprocess", "preset", "stage1_target", "summarize_module", "train_stage1", "train_stage2",
]
