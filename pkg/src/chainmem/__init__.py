"""GUI agent with explicit short- and long-term memory, an offline
evaluation harness and a judged annotation pipeline."""

__version__ = "0.1.0"

from .backend import (Backend, BackendError, Decoding, MockBackend, ModelRequest,
                      ModelResponse, OpenAICompatibleBackend, RecordingBackend)
from .episodes import (Action, Click, CoMAnnotations, DatasetError, Episode, Home, Other,
                       Scroll, Step, Stop, Type, load_dataset, save_annotated, validate_episode)
from .evaluation import EvalReport, MatchConfig, compute_ams, compute_sr, compute_tss, evaluate
from .memory import (ActionResult, LongTermMemory, ShortTermMemory, StorageDecision,
                     ltm_update, stm_update)
from .orchestrator import ABLATIONS, RunConfig, run_corpus, run_episode, run_step

__all__ = [
    "Action", "ActionResult", "ABLATIONS", "Backend", "BackendError", "Click", "CoMAnnotations",
    "DatasetError", "Decoding", "Episode", "EvalReport", "Home", "LongTermMemory", "MatchConfig",
    "MockBackend", "ModelRequest", "ModelResponse", "OpenAICompatibleBackend", "Other",
    "RecordingBackend", "RunConfig", "Scroll", "ShortTermMemory", "Step", "Stop",
    "StorageDecision", "Type", "compute_ams", "compute_sr", "compute_tss", "evaluate",
    "load_dataset", "ltm_update", "run_corpus", "run_episode", "run_step", "save_annotated",
    "stm_update", "validate_episode",
]
