"""Ultrasonic backdoor triggers for speech-command classifiers.

Trigger synthesis, dataset poisoning, MFCC features, a small numpy classifier,
sweep evaluation and a playback-channel simulation.
"""

from .audio import AudioClip, mix, read_wav, resample, write_wav
from .channel import ChannelConfig, low_pass, simulate_attack, transmit
from .classifier import (
    Architecture,
    ModelConfig,
    TrainConfig,
    TrainedModel,
    evaluate_accuracy,
    load_model,
    predict,
    save_model,
    train,
)
from .dataset import FeatureExtractor, LabeledDataset, PoisonConfig, load_dataset, poison, stamp_test_set
from .errors import BackdoorError
from .evaluation import ExperimentReport, SweepSpec, accuracy_drop, attack_success_rate, run_sweep
from .features import FeatureMatrix, MfccConfig, mfcc
from .minidata import generate_mini_dataset
from .trigger import Placement, TriggerSpec, audible_energy_fraction, gen_sine_pulse, stamp

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "mix", "read_wav", "resample", "write_wav",
    "ChannelConfig", "low_pass", "simulate_attack", "transmit",
    "Architecture", "ModelConfig", "TrainConfig", "TrainedModel", "evaluate_accuracy", "load_model",
    "predict", "save_model", "train",
    "FeatureExtractor", "LabeledDataset", "PoisonConfig", "load_dataset", "poison", "stamp_test_set",
    "BackdoorError",
    "ExperimentReport", "SweepSpec", "accuracy_drop", "attack_success_rate", "run_sweep",
    "FeatureMatrix", "MfccConfig", "mfcc",
    "generate_mini_dataset",
    "Placement", "TriggerSpec", "audible_energy_fraction", "gen_sine_pulse", "stamp",
]
