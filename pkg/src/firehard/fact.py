"""Co-tuning defense: inject label-preserving alternatives into every batch."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from ._seeds import derive_seed
from .model import LossRecord, ToyClassifier, TrainParams, train
from .switch import SwitchEngine, SwitchParams
from .textcore import Dataset, LabeledSample


@dataclass(frozen=True)
class FactParams:
    switch_params: SwitchParams
    train_params: TrainParams


def fact_batch_extender(
    switch_engine: SwitchEngine,
    batch: Sequence[LabeledSample],
    params: FactParams,
    epoch: int = 0,
    step: int = 0,
) -> list[LabeledSample]:
    """Each original followed immediately by its alternatives, labels inherited.

    Alternatives are regenerated fresh per (epoch, step, position) sub-seed, so
    every epoch co-tunes against a new draw rather than a cached one.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    extended: list[LabeledSample] = []
    for i, ls in enumerate(batch):
        extended.append(ls)
        sub = replace(
            params.switch_params,
            seed=derive_seed(params.switch_params.seed, epoch, step, i),
        )
        for alt in switch_engine.generate_alternatives(ls.sample, sub, label=ls.label):
            extended.append(LabeledSample(alt, ls.label))
    return extended


class FactBatchExtender:
    """train()-compatible hook wrapping fact_batch_extender."""

    def __init__(self, switch_engine: SwitchEngine, params: FactParams):
        self.switch_engine = switch_engine
        self.params = params

    def __call__(
        self, batch: list[LabeledSample], epoch: int, step: int
    ) -> list[LabeledSample]:
        return fact_batch_extender(
            self.switch_engine, batch, self.params, epoch=epoch, step=step
        )


def fact_train(
    model: ToyClassifier,
    dataset: Dataset,
    fact_params: FactParams,
    switch_engine: SwitchEngine,
) -> tuple[ToyClassifier, list[LossRecord]]:
    """Run regular training with the injection hook; emits a standard checkpoint.

    `model` may be a fresh init or a previously trained checkpoint; the output
    is format-identical to plain training either way.
    """
    extender = FactBatchExtender(switch_engine, fact_params)
    return train(model, dataset, fact_params.train_params, batch_extender=extender)
