"""Membership-inference check of whether a forget set still looks like training data.

The target model doubles as the shadow model: its sorted softmax posteriors
on known members (D_in) and never-seen samples (D_out) train a logistic
attack model Q.  Q is then asked about the forget set under the model being
audited, paired with an equal number of non-members.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .data import LabeledSet
from .errors import ContractError
from .federation import minibatches
from .nn import Model
from .tensor import SGD, SgdConfig, Tensor


def extract_features(model: Model, data: LabeledSet) -> np.ndarray:
    """Softmax posterior of every sample, sorted in descending order (N x K)."""
    if len(data) == 0:
        return np.zeros((0, model.num_classes))
    probs = model.predict_proba(data.features)
    return -np.sort(-probs, axis=1)


@dataclass
class MiaSplits:
    members: LabeledSet  # D_in
    nonmembers: LabeledSet  # D_out


@dataclass
class AttackModel:
    weight: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    train_accuracy: float = float("nan")
    config: dict = field(default_factory=dict)

    def _z(self, features: np.ndarray) -> np.ndarray:
        return (features - self.feature_mean) / self.feature_std

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """P(member | features), strictly inside (0, 1)."""
        logits = self._z(features) @ self.weight + self.bias
        return np.clip(T._stable_sigmoid(logits), 1e-15, 1 - 1e-15)

    def predict(self, features: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(features) >= threshold).astype(np.int64)


def _balance(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n = min(len(a), len(b))
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), n, replace=False))]
    return a, b


def fit_attack(member_feats: np.ndarray, nonmember_feats: np.ndarray, epochs: int = 200,
               sgd: Optional[SgdConfig] = None, seed: int = 0, batch_size: int = 64,
               shuffle_labels: bool = False) -> AttackModel:
    """Logistic regression (one linear unit + sigmoid) on balanced member/non-member features.

    ``shuffle_labels`` permutes the membership labels before fitting; used to
    measure the no-signal baseline.
    """
    sgd = sgd or SgdConfig(learning_rate=0.1, momentum=0.9)
    rng = np.random.default_rng(seed)
    fin, fout = _balance(member_feats, nonmember_feats, rng)
    x = np.concatenate([fin, fout])
    y = np.concatenate([np.ones(len(fin)), np.zeros(len(fout))])
    if shuffle_labels:
        y = rng.permutation(y)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    z = (x - mean) / std
    w = Tensor(np.zeros((x.shape[1], 1)), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    opt = SGD([w, b], sgd)
    for _ in range(epochs):
        for idx in minibatches(len(z), batch_size, rng):
            loss = T.binary_cross_entropy_with_logits(T.matmul(Tensor(z[idx]), w) + b, y[idx])
            loss.backward()
            opt.step()
    q = AttackModel(w.data[:, 0].copy(), float(b.data[0]), mean, std,
                    config={"epochs": epochs, "learning_rate": sgd.learning_rate,
                            "momentum": sgd.momentum, "seed": seed, "batch_size": batch_size})
    q.train_accuracy = float(np.mean(q.predict(x) == y))
    return q


def train_attack(model_t: Model, splits: MiaSplits, epochs: int = 200, sgd: Optional[SgdConfig] = None,
                 seed: int = 0) -> AttackModel:
    """Train Q on the target/shadow model's posteriors: D_in -> 1, D_out -> 0."""
    if len(splits.members) < 10 or len(splits.nonmembers) < 10:
        raise ContractError(
            f"attack training needs >= 10 members and non-members, got {len(splits.members)} / {len(splits.nonmembers)}"
        )
    return fit_attack(extract_features(model_t, splits.members), extract_features(model_t, splits.nonmembers),
                      epochs=epochs, sgd=sgd, seed=seed)


@dataclass
class MiaVerdict:
    mia_accuracy: float
    member_rate_on_forget: float
    member_rate_on_nonmember: float
    n_forget: int
    n_nonmember: int
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def balanced_accuracy_of(q: AttackModel, forget_feats: np.ndarray, nonmember_feats: np.ndarray,
                         threshold: float = 0.5) -> MiaVerdict:
    pf = q.predict_proba(forget_feats) >= threshold
    pn = q.predict_proba(nonmember_feats) >= threshold
    correct = int(pf.sum()) + int((~pn).sum())
    return MiaVerdict(
        mia_accuracy=correct / (len(pf) + len(pn)),
        member_rate_on_forget=float(pf.mean()),
        member_rate_on_nonmember=float(pn.mean()),
        n_forget=len(pf),
        n_nonmember=len(pn),
        threshold=threshold,
    )


def evaluate_unlearning(q: AttackModel, model_u: Model, forget: LabeledSet, nonmember: LabeledSet,
                        seed: int = 0, threshold: float = 0.5) -> MiaVerdict:
    """Attack accuracy on forget (counted as members) vs an equal number of non-members.

    Non-members are subsampled without replacement, or with replacement when
    fewer than |forget| are available.  Accuracy near 0.5 means the forget set
    is indistinguishable from unseen data.
    """
    if len(forget) == 0 or len(nonmember) == 0:
        raise ContractError("evaluate_unlearning needs non-empty forget and non-member sets")
    rng = np.random.default_rng(seed)
    n = len(forget)
    if len(nonmember) > n:
        nonmember = nonmember.subset(np.sort(rng.choice(len(nonmember), n, replace=False)))
    elif len(nonmember) < n:
        nonmember = nonmember.subset(rng.integers(0, len(nonmember), n))
    return balanced_accuracy_of(q, extract_features(model_u, forget), extract_features(model_u, nonmember),
                                threshold)


def shuffled_label_baseline(member_feats: np.ndarray, nonmember_feats: np.ndarray, epochs: int = 200,
                            sgd: Optional[SgdConfig] = None, seed: int = 0) -> MiaVerdict:
    """No-signal reference: membership labels are permuted before Q ever sees them.

    The balanced pool is relabelled at random, Q is fit on one half and scored
    on the other against the permuted labels, so its accuracy should sit at 0.5
    up to sampling noise.
    """
    rng = np.random.default_rng(seed)
    fin, fout = _balance(member_feats, nonmember_feats, rng)
    if len(fin) < 10:
        raise ContractError(f"shuffled baseline needs >= 10 samples per side, got {len(fin)}")
    x = np.concatenate([fin, fout])
    y = rng.permutation(np.concatenate([np.ones(len(fin), bool), np.zeros(len(fout), bool)]))
    pos, neg = rng.permutation(np.flatnonzero(y)), rng.permutation(np.flatnonzero(~y))
    hp, hn = len(pos) // 2, len(neg) // 2
    q = fit_attack(x[pos[:hp]], x[neg[:hn]], epochs=epochs, sgd=sgd, seed=seed)
    return balanced_accuracy_of(q, x[pos[hp:]], x[neg[hn:]])
