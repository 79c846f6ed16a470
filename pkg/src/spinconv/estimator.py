"""scikit-learn style wrapper around network construction and training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import StructureRecord, train_val_split
from .geometry import AtomicSystem
from .model import FORCE_CENTRIC, ModelConfig, SpinConvNet
from .train import TrainConfig, evaluate, predict, train


def _as_records(X, y=None, forces=None) -> list[StructureRecord]:
    """Accept records, or systems with labels in ``y``/``forces`` or on the systems."""
    records = []
    for i, item in enumerate(X):
        if isinstance(item, StructureRecord):
            records.append(item)
            continue
        if not isinstance(item, AtomicSystem):
            raise TypeError(f"sample {i}: expected AtomicSystem or StructureRecord, got {type(item).__name__}")
        energy = y[i] if y is not None else item.energy
        f = forces[i] if forces is not None else item.forces
        if energy is None or f is None:
            raise ValueError(f"sample {i}: energy and forces labels are required for fitting")
        records.append(StructureRecord(item.positions, item.numbers, float(energy), np.asarray(f)))
    if not records:
        raise ValueError("no samples given")
    return records


def _as_records_unlabelled(X) -> list[StructureRecord]:
    out = []
    for i, item in enumerate(X):
        if isinstance(item, StructureRecord):
            out.append(item)
        elif isinstance(item, AtomicSystem):
            n = len(item)
            out.append(StructureRecord(item.positions, item.numbers, 0.0, np.zeros((n, 3))))
        else:
            raise TypeError(f"sample {i}: expected AtomicSystem or StructureRecord, got {type(item).__name__}")
    return out


class SpinConvRegressor(RegressorMixin, BaseEstimator):
    """Energy and force regressor for small atomic systems.

    ``X`` is a sequence of :class:`AtomicSystem` (labels in ``y`` and
    ``forces`` or attached to the systems) or of :class:`StructureRecord`.
    ``predict`` returns energies in eV; ``predict_forces`` a list of
    ``(n_atoms, 3)`` arrays in eV/Å. ``score`` is R² of the energies.
    """

    def __init__(
        self,
        species=(1, 6),
        variant=FORCE_CENTRIC,
        m=8,
        k=3,
        d=32,
        b=4,
        n_lat=12,
        n_lon=16,
        cutoff=6.0,
        max_neighbors=30,
        n_basis=64,
        rotation_samples=5,
        batch_size=8,
        energy_weight=1.0,
        force_weight=100.0,
        lr=1e-3,
        max_steps=2000,
        eval_every=200,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.species = species
        self.variant = variant
        self.m = m
        self.k = k
        self.d = d
        self.b = b
        self.n_lat = n_lat
        self.n_lon = n_lon
        self.cutoff = cutoff
        self.max_neighbors = max_neighbors
        self.n_basis = n_basis
        self.rotation_samples = rotation_samples
        self.batch_size = batch_size
        self.energy_weight = energy_weight
        self.force_weight = force_weight
        self.lr = lr
        self.max_steps = max_steps
        self.eval_every = eval_every
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            species=tuple(self.species), m=self.m, k=self.k, d=self.d, b=self.b,
            n_lat=self.n_lat, n_lon=self.n_lon, cutoff=self.cutoff,
            max_neighbors=self.max_neighbors, n_basis=self.n_basis, variant=self.variant,
            rotation_samples=self.rotation_samples, seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, energy_weight=self.energy_weight,
            force_weight=self.force_weight, lr=self.lr, max_steps=self.max_steps,
            eval_every=self.eval_every, seed=self.random_state,
        )

    def fit(self, X, y=None, forces=None):
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        records = _as_records(X, y, forces)
        model_config = self._model_config()
        train_config = self._train_config()
        if self.validation_fraction > 0 and len(records) > 1:
            fit_set, val_set = train_val_split(records, self.validation_fraction, self.random_state)
        else:
            fit_set, val_set = records, []
        net = SpinConvNet(model_config)
        result = train(net, fit_set, val_set, train_config)
        self.net_ = net
        self.history_ = result.history
        self.n_features_in_ = 1
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        energies, _ = predict(self.net_, _as_records_unlabelled(X))
        return energies

    def predict_forces(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "net_")
        _, forces = predict(self.net_, _as_records_unlabelled(X))
        return forces

    def metrics(self, X, y=None, forces=None):
        """Energy/force MAE, force cosine and EFwT on labelled samples."""
        check_is_fitted(self, "net_")
        return evaluate(self.net_, _as_records(X, y, forces))

    def score(self, X, y=None, sample_weight=None) -> float:
        if y is None:
            y = [item.energy for item in X]
            if any(e is None for e in y):
                raise ValueError("score needs reference energies in y or on the samples")
        return super().score(X, np.asarray(y, dtype=np.float64), sample_weight)

    def _more_tags(self):
        return {"requires_y": False, "non_deterministic": False}
