"""In-process federated training: local SGD on each client, FedAvg on the server."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import ClientDataset, LabeledSet
from .errors import ArchMismatchError, ContractError
from .nn import Model, serialized_size
from .seeding import derive_seed
from .tensor import SGD, SgdConfig

logger = logging.getLogger(__name__)

ModelBuilder = Callable[[int], Model]


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 32
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    weighting: str = "sample_count"  # or "uniform"
    parallel: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise ContractError(f"rounds must be >= 1, got {self.rounds}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 0:
            raise ContractError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.weighting not in ("sample_count", "uniform"):
            raise ContractError(f"unknown weighting {self.weighting!r}")


@dataclass
class CommRecord:
    round: int
    direction: str  # "down" (server -> client) or "up"
    client_id: int
    bytes: int


@dataclass
class FederationState:
    server_model: Model
    client_models: List[Model]
    round: int = 0
    comm_log: List[CommRecord] = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    round_log: List[dict] = field(default_factory=list)

    def total_comm_bytes(self) -> int:
        return sum(r.bytes for r in self.comm_log)

    def broadcast_gap(self) -> float:
        """Max |client - server| over all parameters of all clients."""
        gap = 0.0
        for m in self.client_models:
            for k, p in m.params.items():
                gap = max(gap, float(np.abs(p.data - self.server_model.params[k].data).max()))
        return gap

    def write_round_log(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.round_log:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def local_train(model: Model, data: LabeledSet, epochs: int, batch_size: int,
                sgd: SgdConfig, seed: int) -> Tuple[Model, dict]:
    """Minibatch SGD on cross-entropy.  Returns a trained copy and loss/accuracy stats."""
    if len(data) == 0:
        raise ContractError("local_train called with an empty dataset")
    out = model.copy()
    rng = np.random.default_rng(seed)
    opt = SGD(out.params, sgd)
    losses, correct, seen = [], 0, 0
    for epoch in range(epochs):
        for idx in minibatches(len(data), batch_size, rng):
            logits = out(data.features[idx])
            loss = T.cross_entropy(logits, data.labels[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if epoch == epochs - 1:
                correct += int((logits.data.argmax(axis=1) == data.labels[idx]).sum())
                seen += len(idx)
    # running accuracy over the final epoch; avoids an extra pass over the data
    stats = {
        "train_loss": float(np.mean(losses)) if losses else None,
        "train_acc": correct / seen if seen else None,
        "steps": len(losses),
    }
    return out, stats


def fedavg(models: Sequence[Model], weights: Optional[Sequence[float]] = None,
           ids: Optional[Sequence[int]] = None) -> Model:
    """Weighted parameter average sum_i w_i p_i / sum_i w_i.

    Accumulation runs in ascending ``ids`` order (list order if ids are not
    given) and is anchored on the first model, p0 + sum_i w_i (p_i - p0), so
    identical inputs reproduce themselves bit-exactly.
    """
    if not models:
        raise ContractError("fedavg needs at least one model")
    arch = models[0].arch_id
    for m in models[1:]:
        if m.arch_id != arch:
            raise ArchMismatchError(f"fedavg over mixed architectures: {arch} vs {m.arch_id}")
    w = np.ones(len(models)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != len(models) or (w < 0).any() or w.sum() <= 0:
        raise ContractError("fedavg weights must be non-negative, one per model, with positive sum")
    order = list(range(len(models))) if ids is None else sorted(range(len(models)), key=lambda i: ids[i])
    w = w / w.sum()
    anchor = models[order[0]]
    out = anchor.copy()
    for name, p in out.params.items():
        base = anchor.params[name].data
        acc = np.zeros_like(base)
        for i in order[1:]:
            acc += w[i] * (models[i].params[name].data - base)
        p.data = base + acc
    return out


def _aggregation_weights(clients: Sequence[ClientDataset], cfg: FederationConfig, sets) -> List[float]:
    if cfg.weighting == "uniform":
        return [1.0] * len(clients)
    return [float(len(s)) for s in sets]


def evaluate_clients(model: Model, clients: Sequence[ClientDataset]) -> List[float]:
    return [model.accuracy(c.test.features, c.test.labels) for c in clients]


def run_federation(
    clients: Sequence[ClientDataset],
    cfg: FederationConfig,
    build_model: ModelBuilder,
    train_sets: Optional[Sequence[LabeledSet]] = None,
    init_seed: Optional[int] = None,
    evaluate: bool = True,
) -> FederationState:
    """Run ``cfg.rounds`` rounds of broadcast -> local training -> FedAvg.

    ``train_sets`` overrides the per-client training data (used by the
    retrain baseline); by default client i trains on its full ``train`` split.
    """
    if cfg.num_clients != len(clients):
        raise ContractError(f"config expects {cfg.num_clients} clients, got {len(clients)}")
    sets = list(train_sets) if train_sets is not None else [c.train for c in clients]
    seed0 = derive_seed(cfg.seed, "init") if init_seed is None else init_seed
    server = build_model(seed0)
    state = FederationState(server, [server.copy() for _ in clients])
    nbytes = serialized_size(server)
    weights = _aggregation_weights(clients, cfg, sets)
    ids = [c.client_id for c in clients]
    train_seconds = 0.0

    def train_one(i):
        seed = derive_seed(cfg.seed, f"local/{state.round}/{clients[i].client_id}")
        try:
            return local_train(state.client_models[i], sets[i], cfg.local_epochs, cfg.batch_size, cfg.sgd, seed)
        except Exception as exc:
            raise RuntimeError(f"client {clients[i].client_id}: local training failed: {exc}") from exc

    for r in range(cfg.rounds):
        state.round = r
        t0 = time.perf_counter()
        state.client_models = [state.server_model.copy() for _ in clients]
        for c in clients:
            state.comm_log.append(CommRecord(r, "down", c.client_id, nbytes))
        gap = state.broadcast_gap()
        if cfg.parallel:
            with ThreadPoolExecutor() as pool:
                results = list(pool.map(train_one, range(len(clients))))
        else:
            results = [train_one(i) for i in range(len(clients))]
        state.client_models = [m for m, _ in results]
        for c in clients:
            state.comm_log.append(CommRecord(r, "up", c.client_id, nbytes))
        state.server_model = fedavg(state.client_models, weights, ids)
        elapsed = time.perf_counter() - t0
        train_seconds += elapsed
        row = {
            "round": r,
            "broadcast_max_abs_diff": gap,
            "clients": [
                {"client_id": c.client_id, **stats} for c, (_, stats) in zip(clients, results)
            ],
            "comm_bytes": 2 * len(clients) * nbytes,
            "timing": {"elapsed_seconds": elapsed},
        }
        if evaluate:
            row["server_test_acc"] = evaluate_clients(state.server_model, clients)
        state.round_log.append(row)
        logger.info("round %d done in %.2fs", r, elapsed)
    state.round = cfg.rounds
    state.wall_clock["train"] = train_seconds
    return state


def retrain_baseline(
    clients: Sequence[ClientDataset],
    unlearn_client: int,
    cfg: FederationConfig,
    build_model: ModelBuilder,
    init_seed: Optional[int] = None,
) -> Tuple[Model, float]:
    """Retrain from scratch with the unlearning client restricted to its retain split.

    Returns the retrained server model and the optimisation wall-clock seconds.
    """
    target = [i for i, c in enumerate(clients) if c.client_id == unlearn_client]
    if not target:
        raise ContractError(f"no client with id {unlearn_client}")
    if len(clients[target[0]].forget) == 0:
        raise ContractError(f"client {unlearn_client} has an empty forget set")
    sets = [c.retain if i == target[0] else c.train for i, c in enumerate(clients)]
    state = run_federation(clients, cfg, build_model, train_sets=sets, init_seed=init_seed, evaluate=False)
    return state.server_model, state.wall_clock["train"]
