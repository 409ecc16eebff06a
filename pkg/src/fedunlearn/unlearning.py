"""Forgetting a client's data subset by KL fine-tuning against third-party data.

Each step draws a forget batch x_f, a third-party batch x_t and a retain batch
(x_r, y_r) and takes one SGD step on

    lam * KL(softmax(M_u(x_f)) || softmax(M_t(x_t))) + (1 - lam) * CE(M_u(x_r), y_r)

where M_t is the frozen pre-unlearning model and M_u starts as a copy of it.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import LabeledSet
from .errors import ArchMismatchError, ContractError, ShapeError
from .federation import CommRecord, FederationState
from .nn import Model, serialized_size
from .tensor import SGD, SgdConfig, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnlearnConfig:
    lam: float = 0.7
    epochs: int = 5
    minibatch: int = 32
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=0.05))
    early_stop_kl: Optional[float] = None
    seed: int = 0
    # frozen_target: target distribution from the frozen M_t (the executable loop);
    # live_model: target from M_u itself, gradients flowing through both sides.
    kl_target: str = "frozen_target"
    # independent: x_t drawn separately from x_f; aligned: x_t reuses x_f's indices
    pairing: str = "independent"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.minibatch < 1:
            raise ContractError(f"minibatch must be >= 1, got {self.minibatch}")
        if self.early_stop_kl is not None and not self.early_stop_kl > 0:
            raise ContractError("early_stop_kl must be positive when set")
        if self.kl_target not in ("frozen_target", "live_model"):
            raise ContractError(f"unknown kl_target {self.kl_target!r}")
        if self.pairing not in ("independent", "aligned"):
            raise ContractError(f"unknown pairing {self.pairing!r}")


@dataclass
class UnlearnTrace:
    steps: List[dict] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)
    elapsed_seconds: float = 0.0
    stopped_early: bool = False

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.steps:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def summary(self) -> dict:
        last = self.steps[-1] if self.steps else {}
        return {
            "steps": len(self.steps),
            "epochs_run": len(self.epochs),
            "stopped_early": self.stopped_early,
            "final_kl": last.get("kl_term"),
            "final_retain_loss": last.get("retain_loss"),
            "epoch_stats": self.epochs,
        }


def _draw(rng: np.random.Generator, n: int, b: int) -> np.ndarray:
    if n >= b:
        return rng.choice(n, size=b, replace=False)
    return rng.integers(0, n, size=b)


def batch_schedule(n_forget: int, n_third: int, n_retain: int, cfg: UnlearnConfig
                   ) -> Iterator[Tuple[int, np.ndarray, np.ndarray, Optional[np.ndarray]]]:
    """Yield (epoch, forget_idx, third_idx, retain_idx) for every step.

    Each epoch walks a fresh permutation of the forget set in chunks of
    ``cfg.minibatch``; third-party and retain batches of the same size are
    drawn alongside, without replacement unless the set is smaller than the
    batch.  The schedule depends only on set sizes and ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_forget)
        for s in range(0, n_forget, cfg.minibatch):
            idx_f = order[s : s + cfg.minibatch]
            b = len(idx_f)
            if cfg.pairing == "aligned":
                idx_t = idx_f % n_third
            else:
                idx_t = _draw(rng, n_third, b)
            idx_r = _draw(rng, n_retain, b) if n_retain else None
            yield epoch, idx_f, idx_t, idx_r


def _check_compatible(model: Model, ls: LabeledSet, name: str) -> None:
    if len(ls) and tuple(ls.features.shape[1:]) != model.input_shape:
        raise ShapeError(f"{name} samples have shape {ls.features.shape[1:]}, model expects {model.input_shape}")


def unlearn(target: Model, forget: LabeledSet, retain: Optional[LabeledSet], third_party: LabeledSet,
            cfg: UnlearnConfig) -> Tuple[Model, UnlearnTrace]:
    """Return (M_u, trace).  ``target`` is never modified."""
    if len(forget) == 0:
        raise ContractError("forget set is empty")
    if len(third_party) == 0:
        raise ContractError("third-party set is empty")
    n_retain = 0 if retain is None else len(retain)
    if cfg.lam < 1.0 and n_retain == 0:
        raise ContractError("lambda < 1 needs a non-empty retain set")
    for name, ls in (("forget", forget), ("retain", retain), ("third_party", third_party)):
        if ls is not None:
            _check_compatible(target, ls, name)

    t0 = time.perf_counter()
    model = target.copy()
    opt = SGD(model.params, cfg.sgd)
    trace = UnlearnTrace()
    step = 0
    epoch_kl: List[float] = []
    conf_f: List[np.ndarray] = []
    conf_t: List[np.ndarray] = []
    current_epoch = 0

    def close_epoch(epoch):
        trace.epochs.append({
            "epoch": epoch,
            "mean_max_prob_forget": float(np.mean(np.concatenate(conf_f))),
            "mean_max_prob_third": float(np.mean(np.concatenate(conf_t))),
            "max_kl": float(max(epoch_kl)),
        })
        return cfg.early_stop_kl is not None and max(epoch_kl) < cfg.early_stop_kl

    for epoch, idx_f, idx_t, idx_r in batch_schedule(len(forget), len(third_party), n_retain, cfg):
        if epoch != current_epoch:
            if close_epoch(current_epoch):
                trace.stopped_early = True
                break
            epoch_kl, conf_f, conf_t = [], [], []
            current_epoch = epoch

        out_f = model(forget.features[idx_f])
        if cfg.kl_target == "frozen_target":
            with no_grad():
                out_t = target(third_party.features[idx_t])
        else:
            out_t = model(third_party.features[idx_t])
        if cfg.lam > 0.0:
            kl = T.kl_divergence_logits(out_f, out_t)
        else:
            with no_grad():
                kl = T.kl_divergence_logits(out_f, out_t)

        row = {"step": step, "epoch": epoch, "kl_term": kl.item()}
        terms = []
        if cfg.lam > 0.0:
            terms.append(kl * cfg.lam)
        if cfg.lam < 1.0:
            ce = T.cross_entropy(model(retain.features[idx_r]), retain.labels[idx_r])
            row["retain_loss"] = ce.item()
            terms.append(ce * (1.0 - cfg.lam))
        loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
        row["blended_loss"] = loss.item()
        loss.backward()
        opt.step()

        trace.steps.append(row)
        epoch_kl.append(row["kl_term"])
        conf_f.append(T._softmax_np(out_f.data).max(axis=1))
        conf_t.append(T._softmax_np(out_t.data).max(axis=1))
        step += 1
    else:
        close_epoch(current_epoch)

    trace.elapsed_seconds = time.perf_counter() - t0
    return model, trace


def steps_per_epoch(n_forget: int, minibatch: int) -> int:
    return math.ceil(n_forget / minibatch)


def apply_unlearned(state: FederationState, unlearned: Model, client_id: int) -> FederationState:
    """Install M_u on the server and every client, logging 1 upload + n broadcasts."""
    if unlearned.arch_id != state.server_model.arch_id:
        raise ArchMismatchError(f"unlearned model is {unlearned.arch_id}, server runs {state.server_model.arch_id}")
    nbytes = serialized_size(unlearned)
    state.comm_log.append(CommRecord(state.round, "up", client_id, nbytes))
    state.server_model = unlearned.copy()
    ids = [i for i in range(len(state.client_models))]
    state.client_models = [unlearned.copy() for _ in ids]
    for i in ids:
        state.comm_log.append(CommRecord(state.round, "down", i, nbytes))
    return state
