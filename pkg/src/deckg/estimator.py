"""Estimator facade over the full simulation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .client import predict_many
from .dataio import Dataset
from .domain import DataError, Hyperparams
from .evaluation import evaluate
from .orchestrator import Ablation, SimulationConfig, simulate
from .validation import check_k


class DecKGRecommender(BaseEstimator):
    """Pretrain, partition, assign neighbours and refine on-device in one ``fit``.

    ``fit(dataset)`` takes a loaded :class:`~deckg.dataio.Dataset`. After
    fitting, ``predict(user, pois)`` gives visit likelihoods from that
    user's device model and ``score()`` the test-split NDCG@10.
    """

    def __init__(self, epsilon=4.0, mu=0.5, gamma=10.0, dim=32, layers=1, rounds=50, epochs_pretrain=50,
                 neighbor_cap=10, hop_limit=None, no_meta_path=False, no_communication=False,
                 no_pretrain=False, validate_every=5, patience=5, random_state=0):
        self.epsilon = epsilon
        self.mu = mu
        self.gamma = gamma
        self.dim = dim
        self.layers = layers
        self.rounds = rounds
        self.epochs_pretrain = epochs_pretrain
        self.neighbor_cap = neighbor_cap
        self.hop_limit = hop_limit
        self.no_meta_path = no_meta_path
        self.no_communication = no_communication
        self.no_pretrain = no_pretrain
        self.validate_every = validate_every
        self.patience = patience
        self.random_state = random_state

    def _config(self) -> SimulationConfig:
        hp = Hyperparams(epsilon=self.epsilon, mu=self.mu, gamma=self.gamma, dim_entity=self.dim,
                         dim_relation=self.dim, dim_user=self.dim, layers=self.layers, rounds_train=self.rounds,
                         epochs_pretrain=self.epochs_pretrain, neighbor_cap=self.neighbor_cap,
                         hop_limit=self.hop_limit, seed=int(self.random_state))
        return SimulationConfig(hp=hp, ablation=Ablation(self.no_meta_path, self.no_communication, self.no_pretrain),
                                validate_every=self.validate_every, patience=self.patience)

    def fit(self, dataset: Dataset, y=None, pretrained=None):
        if not isinstance(dataset, Dataset):
            raise DataError("fit expects a loaded Dataset")
        result = simulate(dataset, self._config(), pretrained=pretrained)
        self.clients_ = result.clients
        self.split_ = result.split
        self.embeddings_ = result.embeddings
        self.trace_ = result.trace
        self.metrics_ = result.metrics
        self.n_pois_ = len(dataset.catalog)
        return self

    def _client(self, user):
        check_is_fitted(self, "clients_")
        if user not in self.clients_:
            raise DataError(f"unknown user {user}")
        return self.clients_[user]

    def predict(self, user, pois) -> np.ndarray:
        return predict_many(self._client(user), pois)

    def recommend(self, user, k=10, exclude_train=True) -> np.ndarray:
        """Top-``k`` POIs for ``user``; ties go to the smaller id."""
        k = check_k(k)
        client = self._client(user)
        items = np.arange(self.n_pois_)
        if exclude_train:
            items = np.setdiff1d(items, client.train_pois)
        scores = predict_many(client, items)
        return items[np.lexsort((items, -scores))][:k]

    def score(self, X=None, y=None, k=10) -> float:
        check_is_fitted(self, "clients_")
        return evaluate(self.clients_, self.split_, ks=(k,)).ndcg(k)
