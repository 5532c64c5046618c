"""Data-free backdoor injection by parameter surgery, with the defenses and
measurement harness used to evaluate it."""

from .attack import (AttackConfig, BackdoorPath, FinePruneEvasion, InjectionResult, LipschitzEvasion, Standard,
                     ZeroWeightObfuscation, activation_census, build_pruned, inject, optimize_trigger,
                     select_path)
from .container import load_model, save_model
from .data import Dataset, TriggerSpec, apply_trigger, load_idx, make_trigger, synth_split
from .metrics import metric_asr, metric_ca_ba
from .nn import Model, NeuronRef, cnn, fcn, forward, predict

__version__ = "0.1.0"

__all__ = ["AttackConfig", "BackdoorPath", "FinePruneEvasion", "InjectionResult", "LipschitzEvasion", "Standard",
           "ZeroWeightObfuscation", "activation_census", "build_pruned", "inject", "optimize_trigger",
           "select_path", "load_model", "save_model", "Dataset", "TriggerSpec", "apply_trigger", "load_idx",
           "make_trigger", "synth_split", "metric_asr", "metric_ca_ba", "Model", "NeuronRef", "cnn", "fcn",
           "forward", "predict"]
