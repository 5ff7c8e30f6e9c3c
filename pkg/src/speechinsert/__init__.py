"""Context-aware text-based speech insertion on a small numpy autodiff engine."""
from .corpus import AlignmentRecord, DurationTrack, EditScript, PhonemeSequence, Utterance
from .dsp import AudioClip, MelSpectrogram
from .model import InsertionModel, ModelConfig
from .training import (Checkpoint, compute_loss, eval_duration, infer_edit, load_checkpoint,
                       resynth_all, save_checkpoint, train)

__version__ = "0.1.0"
