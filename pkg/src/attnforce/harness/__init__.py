"""Data, configuration, the two-stage training workflow and the CLI."""
from .config import ExperimentConfig, OptimConfig, apply_overrides, load_config, rnn_defaults, save_config, transformer_defaults
from .data import Corpus, TaskData, build_vocab, gen_task, load_corpus, load_task, save_task
from .runner import RunLog, RunResult, diversity, evaluate_run, mean_std, repeat_runs, train_run

__all__ = [
    "ExperimentConfig", "OptimConfig", "apply_overrides", "load_config", "rnn_defaults", "save_config",
    "transformer_defaults", "Corpus", "TaskData", "build_vocab", "gen_task", "load_corpus", "load_task",
    "save_task", "RunLog", "RunResult", "diversity", "evaluate_run", "mean_std", "repeat_runs", "train_run",
]
