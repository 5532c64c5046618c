"""Clean accuracy, backdoored accuracy and attack success rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, TriggerSpec, apply_trigger
from .nn import Model, predict


def metric_asr(model: Model, ds: Dataset, trigger: TriggerSpec, target: int) -> float:
    """Fraction of triggered inputs whose true label is not ``target`` that
    the model assigns to ``target``."""
    eligible = ds.labels != target
    if not eligible.any():
        raise ValueError(f"no eligible inputs: every input is labelled with the target class {target}")
    preds = predict(model, apply_trigger(ds.images[eligible], trigger))
    return float(np.mean(preds == target))


def metric_accuracy(model: Model, ds: Dataset) -> float:
    if len(ds) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, ds.images) == ds.labels))


def metric_ca_ba(clean: Model, backdoored: Model, ds: Dataset):
    """``(CA, BA, CA - BA)``: accuracy of the clean and backdoored models on clean inputs."""
    ca = metric_accuracy(clean, ds)
    ba = metric_accuracy(backdoored, ds)
    return ca, ba, ca - ba


@dataclass
class AttackProbe:
    """What a defense run needs to score the backdoor: a test set, the trigger and target."""

    test: Dataset
    trigger: TriggerSpec
    target: int

    def acc(self, model: Model) -> float:
        return metric_accuracy(model, self.test)

    def asr(self, model: Model) -> float:
        return metric_asr(model, self.test, self.trigger, self.target)
