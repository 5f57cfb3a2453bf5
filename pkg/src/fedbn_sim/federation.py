"""Federated training: local SGD, FedAvg / FedProx / FedBN aggregation, traces.

Clients train in lock-step epochs. Every ``E`` epochs the server averages
client parameters in ascending client order. FedBN skips every
BatchNorm-tagged array (for the theory network, the per-client ``gamma``),
so those stay local. SingleSet never aggregates.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datagen import ClientDataset
from .model.mlp import (
    BatchNorm,
    MlpParams,
    TRAIN,
    EVAL,
    loss_and_dlogits,
    mlp_backward,
    mlp_forward,
    predict_labels,
    recompute_running_stats,
    update_running_stats,
)
from .model.theory import TheoryParams, theory_grads, theory_predict

FEDAVG = "fedavg"
FEDPROX = "fedprox"
FEDBN = "fedbn"
SINGLESET = "singleset"
STRATEGIES = (FEDAVG, FEDPROX, FEDBN, SINGLESET)

DIVERGENCE_LIMIT = 1e6
TRACE_HEADER = ("round", "epoch", "client", "train_loss", "train_acc", "test_loss", "test_acc")


class DivergenceError(RuntimeError):
    def __init__(self, client_id: int, epoch: int, loss: float):
        super().__init__(f"client {client_id} diverged at epoch {epoch} (loss={loss})")
        self.client_id = client_id
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class FederationConfig:
    N: int = 2
    E: int = 1
    T: int = 600
    lr: float = 1e-5
    batch_size: int | None = None  # None means full batch
    strategy: str = FEDBN
    mu: float = 1e-2
    seed: int = 0
    loss: str = "cross_entropy"
    model_kind: str = "mlp"
    reduction: str = "sum"

    def __post_init__(self):
        if self.N < 1 or self.E < 1 or self.T < 1:
            raise ValueError("N, E and T must be positive")
        if self.T % self.E:
            raise ValueError(f"T={self.T} is not divisible by E={self.E}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.loss not in ("cross_entropy", "squared"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.model_kind not in ("mlp", "theory"):
            raise ValueError(f"unknown model_kind {self.model_kind!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm) or null for full batch")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "FederationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path: str | Path) -> "FederationConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClientState:
    client_id: int
    params: MlpParams | TheoryParams
    dataset: ClientDataset
    rng: np.random.Generator


@dataclass(frozen=True)
class TraceRecord:
    round: int
    epoch: int
    client: int
    train_loss: float
    train_acc: float
    test_loss: float = float("nan")
    test_acc: float = float("nan")


@dataclass
class FederationTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.round < self.records[-1].round:
            raise ValueError("trace rounds must not decrease")
        if not np.isfinite(rec.train_loss):
            raise ValueError("trace losses must be finite")
        self.records.append(rec)

    def curve(self, name: str = "train_loss") -> np.ndarray:
        """Per-epoch mean of ``name`` across clients."""
        epochs = sorted({r.epoch for r in self.records})
        out = np.zeros(len(epochs))
        for k, ep in enumerate(epochs):
            vals = [getattr(r, name) for r in self.records if r.epoch == ep]
            out[k] = sum(vals) / len(vals)
        return out

    def client_curve(self, client: int, name: str = "train_loss") -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records if r.client == client])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for r in self.records:
                w.writerow([r.round, r.epoch, r.client] + [
                    f"{v:.17g}" for v in (r.train_loss, r.train_acc, r.test_loss, r.test_acc)
                ])

    @classmethod
    def read_csv(cls, path: str | Path) -> "FederationTrace":
        trace = cls()
        with open(path, newline="", encoding="ascii") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                trace.append(TraceRecord(
                    int(row["round"]), int(row["epoch"]), int(row["client"]),
                    float(row["train_loss"]), float(row["train_acc"]),
                    float(row["test_loss"]), float(row["test_acc"]),
                ))
        return trace


# -- parameter plumbing shared by both model kinds --------------------------

def param_entries(p: MlpParams | TheoryParams) -> list[tuple[tuple, bool, bool]]:
    """``(key, is_bn, trainable)`` for every array in ``p``, in a fixed order."""
    if isinstance(p, TheoryParams):
        return [(("V",), False, True), (("gamma",), True, True), (("c",), False, False)]
    out = []
    for li, layer in enumerate(p.layers):
        bn = isinstance(layer, BatchNorm)
        out += [((li, n), bn, True) for n in layer.trainable]
        out += [((li, n), bn, False) for n in layer.state]
    return out


def get_array(p, key) -> np.ndarray:
    if isinstance(p, TheoryParams):
        return getattr(p, key[0])
    return getattr(p.layers[key[0]], key[1])


def set_array(p, key, value: np.ndarray) -> None:
    if isinstance(p, TheoryParams):
        setattr(p, key[0], value)
    else:
        setattr(p.layers[key[0]], key[1], value)


def _check_compatible(params: list) -> None:
    ref = param_entries(params[0])
    for p in params[1:]:
        entries = param_entries(p)
        if [k for k, _, _ in entries] != [k for k, _, _ in ref]:
            raise ValueError("client parameter structures differ")
        for key, _, _ in ref:
            if get_array(p, key).shape != get_array(params[0], key).shape:
                raise ValueError(f"shape mismatch for {key}")


# -- evaluation ------------------------------------------------------------

def _client_covs(state: ClientState, n: int) -> list[np.ndarray]:
    # Only column ``client_id`` of gamma ever touches this client's data, so
    # the other slots can hold any PD matrix; reuse the client's own.
    return [state.dataset.cov] * n


def evaluate(params, X: np.ndarray, y: np.ndarray, cfg: FederationConfig, client_id: int, covs=None,
             mode: str = TRAIN) -> tuple[float, float]:
    """Batch-mean loss and accuracy of ``params`` on ``(X, y)``."""
    if isinstance(params, TheoryParams):
        ids = np.full(len(y), client_id)
        f = theory_predict(params, X, ids, covs)
        r = f - y
        return float(np.mean(r * r)), float(np.mean(np.abs(r) < 0.5))
    logits = mlp_forward(params, X, mode)
    loss, _ = loss_and_dlogits(logits, y, cfg.loss)
    return loss, float(np.mean(predict_labels(logits) == y))


# -- local training ----------------------------------------------------------

def _batches(n: int, batch_size: int | None, rng: np.random.Generator) -> list[np.ndarray]:
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    cuts = list(range(0, n, batch_size))
    batches = [order[a:a + batch_size] for a in cuts]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _sgd_step(state: ClientState, idx: np.ndarray, cfg: FederationConfig, global_snapshot, epoch: int) -> None:
    p = state.params
    X = state.dataset.features[idx]
    y = state.dataset.labels[idx]
    factor = len(idx) if cfg.reduction == "sum" else 1.0
    if isinstance(p, TheoryParams):
        g = theory_grads(p, X, y, np.full(len(idx), state.client_id), _client_covs(state, p.n_clients),
                         tie_gamma=cfg.strategy in (FEDAVG, FEDPROX))
        grads = {("V",): g.dV, ("gamma",): g.dgamma}
        loss, stats = g.loss, None
    else:
        g = mlp_backward(p, X, y, cfg.loss)
        grads = {k: v for k, v in g.grads.items()}
        loss, stats = g.loss, g.batch_stats
    if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise DivergenceError(state.client_id, epoch, loss)
    for key, grad in grads.items():
        w = get_array(p, key)
        step = factor * grad
        if cfg.strategy == FEDPROX and cfg.mu > 0:
            step = step + cfg.mu * (w - get_array(global_snapshot, key))
        set_array(p, key, w - cfg.lr * step)
    if stats:
        update_running_stats(p, stats)


def local_update(state: ClientState, E: int, cfg: FederationConfig, global_snapshot=None,
                 epoch_offset: int = 0) -> ClientState:
    """Run ``E`` epochs of mini-batch SGD on the client's own data.

    Returns a new state; ``state`` itself is left untouched. Batch order is
    drawn from the client's own generator. FedProx adds
    ``mu * (w - w_global)`` to the gradient of every trainable array.
    """
    if global_snapshot is None:
        global_snapshot = state.params
    else:
        _check_compatible([state.params, global_snapshot])
    rng = np.random.Generator(type(state.rng.bit_generator)())
    rng.bit_generator.state = state.rng.bit_generator.state
    new = ClientState(state.client_id, state.params.copy(), state.dataset, rng)
    for e in range(E):
        for idx in _batches(new.dataset.size, cfg.batch_size, new.rng):
            _sgd_step(new, idx, cfg, global_snapshot, epoch_offset + e + 1)
    return new


# -- aggregation ---------------------------------------------------------------

def aggregate(clients: list[ClientState], strategy: str):
    """Unweighted mean of every parameter array over clients in ascending id order.

    The returned record averages all arrays, BatchNorm ones included; which
    arrays clients actually adopt is decided by :func:`broadcast`.
    """
    if not clients:
        raise ValueError("no clients to aggregate")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    ordered = sorted(clients, key=lambda c: c.client_id)
    params = [c.params for c in ordered]
    _check_compatible(params)
    out = params[0].copy()
    for key, _, _ in param_entries(out):
        acc = get_array(params[0], key).copy()
        for p in params[1:]:
            acc = acc + get_array(p, key)
        set_array(out, key, acc / len(params))
    return out


def broadcast(global_params, clients: list[ClientState], strategy: str) -> list[ClientState]:
    """Copy the shared arrays of ``global_params`` into every client.

    FedBN keeps each client's BatchNorm arrays; SingleSet changes nothing.
    """
    if strategy == SINGLESET:
        return clients
    out = []
    for c in clients:
        p = c.params.copy()
        for key, is_bn, _ in param_entries(p):
            if strategy == FEDBN and is_bn:
                continue
            set_array(p, key, get_array(global_params, key).copy())
        out.append(ClientState(c.client_id, p, c.dataset, c.rng))
    return out


# -- orchestration ---------------------------------------------------------------

def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FEDBN_SIM_THREADS", "1")))
    except ValueError:
        return 1


def run_federation(
    cfg: FederationConfig,
    clients: list[ClientState],
    test_sets: list[ClientDataset] | None = None,
    workers: int | None = None,
) -> tuple[FederationTrace, list[ClientState]]:
    """Train for ``cfg.T`` epochs, aggregating after every ``cfg.E``-th epoch.

    One trace record per client per epoch, measured after that epoch's
    aggregation (if any). Training metrics use batch statistics over the
    whole local training set; test metrics use the running statistics.
    Clients may train concurrently; results do not depend on ``workers``.
    """
    if len(clients) != cfg.N:
        raise ValueError(f"config expects N={cfg.N} clients, got {len(clients)}")
    clients = sorted(clients, key=lambda c: c.client_id)
    _check_compatible([c.params for c in clients])
    workers = worker_count() if workers is None else max(1, workers)
    trace = FederationTrace()
    snapshot = aggregate(clients, cfg.strategy) if cfg.strategy == FEDPROX else None
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for epoch in range(1, cfg.T + 1):
            rnd = (epoch - 1) // cfg.E + 1

            def step(c: ClientState) -> ClientState:
                return local_update(c, 1, cfg, snapshot, epoch_offset=epoch - 1)

            clients = list(pool.map(step, clients)) if pool else [step(c) for c in clients]
            if epoch % cfg.E == 0 and cfg.strategy != SINGLESET:
                global_params = aggregate(clients, cfg.strategy)
                clients = broadcast(global_params, clients, cfg.strategy)
                if cfg.strategy == FEDPROX:
                    snapshot = global_params
            for c in clients:
                trace.append(_record(cfg, c, rnd, epoch, test_sets))
    finally:
        if pool:
            pool.shutdown()
    return trace, clients


def _record(cfg, c: ClientState, rnd: int, epoch: int, test_sets) -> TraceRecord:
    covs = _client_covs(c, c.params.n_clients) if isinstance(c.params, TheoryParams) else None
    ds = c.dataset
    train_loss, train_acc = evaluate(c.params, ds.features, ds.labels, cfg, c.client_id, covs, TRAIN)
    test_loss = test_acc = float("nan")
    if test_sets is not None:
        t = test_sets[c.client_id]
        test_loss, test_acc = evaluate(c.params, t.features, t.labels, cfg, c.client_id, covs, EVAL)
    return TraceRecord(rnd, epoch, c.client_id, train_loss, train_acc, test_loss, test_acc)


def admit_new_client(
    global_params: MlpParams,
    existing: list[ClientState],
    new_data: ClientDataset,
    rng: np.random.Generator,
) -> ClientState:
    """Build a client for ``new_data`` without touching ``existing``.

    Shared arrays come from ``global_params``. BatchNorm scale and shift are
    the mean over existing clients, and running statistics are recomputed
    from ``new_data``.
    """
    if not existing:
        raise ValueError("need at least one existing client")
    if not isinstance(global_params, MlpParams):
        raise TypeError("admission needs an MLP with batch-norm layers")
    ordered = sorted(existing, key=lambda c: c.client_id)
    p = global_params.copy()
    for key, is_bn, trainable in param_entries(p):
        if is_bn and trainable:
            acc = get_array(ordered[0].params, key).copy()
            for c in ordered[1:]:
                acc = acc + get_array(c.params, key)
            set_array(p, key, acc / len(ordered))
    recompute_running_stats(p, new_data.features)
    return ClientState(new_data.client_id, p, new_data, rng)


def with_strategy(cfg: FederationConfig, strategy: str) -> FederationConfig:
    return replace(cfg, strategy=strategy)
