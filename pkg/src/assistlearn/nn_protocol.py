"""Two-party training of one net whose input layer is split by ownership.

Alice holds the labels and her feature block; Bob holds only his block. The
hidden layer sees the *sum* of both parties' input-weight products, so what
crosses the wire is an n-by-hidden partial pre-activation, never features
and never the partner's input weights. The remaining parameters (hidden
bias, output weights, output bias) shuttle between the parties: on odd
rounds Alice updates her block plus the shared remainder while Bob's block
is frozen, on even rounds the roles flip.

Both parties derive the full input-weight init from the shared task seed and
keep their own row block, so nothing about the init needs transmitting; they
exchange column counts (plain scalars) once during setup.

A partner with zero columns degenerates to Alice training an ordinary dense
net: every round is hers and the arithmetic matches fit_dense_net exactly.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import errors as err
from .core import LocalModule, TaskLabels, align, derive_seed
from .data import SplitSpec, split as id_split
from .learners import dense_forward, dense_init, sgd_epochs
from .metrics import rmse
from .protocol import argmin_round, stop_check, _roundtrip
from .transport import Envelope, InProcEndpoint, ModuleResponder

log = logging.getLogger("assistlearn")


@dataclass(frozen=True)
class SharedWeights:
    """The shuttled remainder: hidden bias, output weights, output bias."""

    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: float

    def __post_init__(self):
        b = np.array(self.b_hidden, dtype=np.float64)
        w = np.array(self.w_out, dtype=np.float64)
        if b.ndim != 1 or w.ndim != 1 or b.shape != w.shape:
            raise err.ShapeMismatch("inconsistent shared weight shapes")
        object.__setattr__(self, "b_hidden", b)
        object.__setattr__(self, "w_out", w)
        object.__setattr__(self, "b_out", float(self.b_out))

    @property
    def hidden(self) -> int:
        return self.b_hidden.shape[0]


@dataclass
class SplitNetworkState:
    """Parameters as one party sees them after ``round`` completed rounds.

    ``w_bob`` is None when Bob is remote - his block never leaves him.
    """

    w_alice: Optional[np.ndarray]
    w_bob: Optional[np.ndarray]
    shared: SharedWeights
    round: int


@dataclass(frozen=True)
class PartialPreactivation:
    """One party's n-by-hidden contribution to the hidden pre-activation."""

    task_id: str
    round: int
    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise err.ShapeMismatch("partial must be 2-D")
        if vals.shape[0] != len(self.ids):
            raise err.ShapeMismatch(
                f"{len(self.ids)} ids vs {vals.shape[0]} rows")
        if not np.all(np.isfinite(vals)):
            raise err.NonFinitePayload("partial contains NaN or infinity")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "ids", tuple(self.ids))


@dataclass(frozen=True)
class NetOptConfig:
    """Per-round optimizer knobs shared by both parties."""

    rate: float = 0.01
    batch: int = 32
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class NnConfig:
    """Orchestrator knobs for split-network training."""

    hidden: int = 16
    rate: float = 0.01
    batch: int = 32
    epochs_per_round: int = 1
    max_rounds: int = 50
    patience: int = 3
    tol_rel: float = 1e-4
    holdout_fraction: float = 0.2
    seed: int = 0
    timeout: float = 30.0

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")
        NetOptConfig(rate=self.rate, batch=self.batch,
                     epochs=self.epochs_per_round, seed=self.seed)

    def opt(self) -> NetOptConfig:
        return NetOptConfig(rate=self.rate, batch=self.batch,
                            epochs=self.epochs_per_round, seed=self.seed)


@dataclass
class NnTrainResult:
    state: SplitNetworkState
    validation_history: tuple[float, ...]
    best_round: int
    train_ids: tuple[str, ...]
    holdout_ids: tuple[str, ...]
    task_id: str
    alice_cols: int
    bob_cols: int
    # alice's (input block, shared remainder) after each round, kept so any
    # executed round can be evaluated later; bob's counterparts stay with bob
    alice_rounds: dict = dataclasses.field(default_factory=dict, repr=False)
    round_seconds: tuple[float, ...] = ()


# ---------------------------------------------------------------------------
# forward / updates
# ---------------------------------------------------------------------------

def split_forward(state: SplitNetworkState, own_partial, other_partial) -> np.ndarray:
    """Network output from two aligned partial pre-activations."""
    own = own_partial.values if isinstance(own_partial, PartialPreactivation) \
        else np.asarray(own_partial, dtype=np.float64)
    if isinstance(own_partial, PartialPreactivation) \
            and isinstance(other_partial, PartialPreactivation) \
            and own_partial.ids != other_partial.ids:
        raise err.ShapeMismatch("partials cover different ids")
    if other_partial is None:
        total = own
    else:
        other = other_partial.values \
            if isinstance(other_partial, PartialPreactivation) \
            else np.asarray(other_partial, dtype=np.float64)
        if other.shape != own.shape:
            raise err.ShapeMismatch(
                f"partial shapes differ: {own.shape} vs {other.shape}")
        total = own + other
    if total.shape[1] != state.shared.hidden:
        raise err.ShapeMismatch(
            f"partial width {total.shape[1]} vs hidden {state.shared.hidden}")
    return np.tanh(total + state.shared.b_hidden) @ state.shared.w_out \
        + state.shared.b_out


def _update_party(X_own, other_partial, y, w_own, shared: SharedWeights,
                  opt: NetOptConfig, round_no: int):
    """One round of SGD on (own block, shared remainder), partner frozen.

    The batch-shuffle stream is indexed by global epoch number, so both
    parties and the monolithic trainer consume the identical stream.
    """
    first = (round_no - 1) * opt.epochs
    w, b_hidden, w_out, b_out = sgd_epochs(
        X_own, other_partial, y,
        (w_own, shared.b_hidden, shared.w_out, shared.b_out),
        opt.rate, opt.batch, opt.epochs, opt.seed, first_epoch=first)
    return w, SharedWeights(b_hidden=b_hidden, w_out=w_out, b_out=b_out)


def alice_update_round(state: SplitNetworkState, X_alice, bob_partial,
                       labels, opt: NetOptConfig) -> SplitNetworkState:
    """Alice's turn: round state.round+1, which must be odd."""
    round_no = state.round + 1
    if round_no % 2 == 0:
        raise ValueError(f"round {round_no} belongs to the partner")
    offset = bob_partial.values if isinstance(bob_partial, PartialPreactivation) \
        else bob_partial
    y = labels.values if isinstance(labels, TaskLabels) else np.asarray(labels)
    w, shared = _update_party(np.asarray(X_alice, dtype=np.float64), offset,
                              y, state.w_alice, state.shared, opt, round_no)
    return SplitNetworkState(w_alice=w, w_bob=state.w_bob, shared=shared,
                             round=round_no)


def bob_update_round(w_bob, round_no: int, X_bob, alice_partial, labels,
                     shared: SharedWeights, opt: NetOptConfig):
    """Bob's turn: must be an even round. Returns (new block, new shared)."""
    if round_no % 2 == 1:
        raise ValueError(f"round {round_no} belongs to the label owner")
    offset = alice_partial.values \
        if isinstance(alice_partial, PartialPreactivation) else alice_partial
    y = labels.values if isinstance(labels, TaskLabels) else np.asarray(labels)
    return _update_party(np.asarray(X_bob, dtype=np.float64), offset, y,
                         np.asarray(w_bob, dtype=np.float64), shared, opt,
                         round_no)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def run_nn_learning(alice: LocalModule, bob, labels: TaskLabels,
                    config: NnConfig = NnConfig(),
                    task_id: Optional[str] = None) -> NnTrainResult:
    """Train the split network over an endpoint to Bob.

    ``bob`` may be a LocalModule (wrapped in an in-process endpoint; his
    block is then available on the returned state) or any endpoint (his
    block stays remote and the state carries None for it).
    """
    task_id = task_id if task_id is not None else f"nn-task-{config.seed}"
    bob_ep, bob_responder = _as_endpoint(bob)
    work_ids = sorted(set(labels.ids) & set(alice.partition.ids))
    if not work_ids:
        raise err.CollationFailure(
            "labels and alice's partition share no sample id")
    if config.holdout_fraction > 0.0 and len(work_ids) >= 2:
        train_ids, hold_ids = id_split(
            tuple(work_ids),
            SplitSpec(fraction=1.0 - config.holdout_fraction,
                      seed=derive_seed(config.seed, "holdout")))
        if not train_ids:
            train_ids, hold_ids = tuple(work_ids), ()
    else:
        train_ids, hold_ids = tuple(work_ids), ()
    X_train = align(alice.partition, train_ids)
    y_train = labels.lookup(train_ids)
    p_alice = X_train.shape[1]

    setup = Envelope(kind="LABELS_TRANSFER", task=task_id, round=0,
                     sender=alice.module_id, receiver=bob_ep.module_id,
                     payload={"ids": list(train_ids), "values": y_train,
                              "seed": config.seed, "hidden": config.hidden,
                              "peer_cols": p_alice})
    ack = _roundtrip(bob_ep, setup, config.timeout)
    if ack.kind != "LABELS_TRANSFER" or "own_cols" not in ack.payload:
        raise err.MalformedMessage("bad LABELS_TRANSFER ack")
    p_bob = int(ack.payload["own_cols"])
    solo = p_bob == 0

    w_full, b_hidden, w_out, b_out = dense_init(
        p_alice + p_bob, config.hidden, config.seed)
    w_alice = np.array(w_full[:p_alice])
    shared = SharedWeights(b_hidden=b_hidden, w_out=w_out, b_out=b_out)
    opt = config.opt()
    if hold_ids:
        X_hold = align(alice.partition, hold_ids)
        y_hold = labels.lookup(hold_ids)

    snapshots = {0: (w_alice.copy(), shared)}
    history: list[float] = []
    timings: list[float] = []
    for round_no in range(1, config.max_rounds + 1):
        started = time.perf_counter()
        if solo or round_no % 2 == 1:
            offset = None if solo else _fetch_partial(
                bob_ep, alice.module_id, task_id, round_no - 1, train_ids,
                config.timeout)
            w_alice, shared = _update_party(X_train, offset, y_train,
                                            w_alice, shared, opt, round_no)
        else:
            partial = X_train @ w_alice
            reply = _roundtrip(bob_ep, Envelope(
                kind="WTILDE_TRANSFER", task=task_id, round=round_no,
                sender=alice.module_id, receiver=bob_ep.module_id,
                payload={"b_hidden": shared.b_hidden, "w_out": shared.w_out,
                         "b_out": shared.b_out, "ids": list(train_ids),
                         "matrix": partial, "rate": opt.rate,
                         "batch": opt.batch, "epochs": opt.epochs}),
                config.timeout)
            if reply.kind != "WTILDE_TRANSFER":
                raise err.MalformedMessage(
                    f"expected WTILDE_TRANSFER, got {reply.kind}")
            shared = SharedWeights(b_hidden=np.array(reply.payload["b_hidden"]),
                                   w_out=np.array(reply.payload["w_out"]),
                                   b_out=reply.payload["b_out"])
        snapshots[round_no] = (w_alice.copy(), shared)
        if hold_ids:
            other = None if solo else _fetch_partial(
                bob_ep, alice.module_id, task_id, round_no, hold_ids,
                config.timeout)
            pred = dense_forward(X_hold, other, w_alice, shared.b_hidden,
                                 shared.w_out, shared.b_out)
            history.append(rmse(y_hold, pred))
        else:
            other = None if solo else _fetch_partial(
                bob_ep, alice.module_id, task_id, round_no, train_ids,
                config.timeout)
            pred = dense_forward(X_train, other, w_alice, shared.b_hidden,
                                 shared.w_out, shared.b_out)
            history.append(rmse(y_train, pred))
        timings.append(time.perf_counter() - started)
        if stop_check(history, config.patience, config.tol_rel):
            log.info("split network %s plateaued after round %d",
                     task_id, round_no)
            break
    best = argmin_round(history)
    w_best, shared_best = snapshots[best]
    w_bob = None
    if bob_responder is not None:
        svc = bob_responder._nn.get(task_id)
        if svc is not None:
            w_bob = np.array(svc.weights_at(best))
    state = SplitNetworkState(w_alice=w_best, w_bob=w_bob,
                              shared=shared_best, round=best)
    return NnTrainResult(state=state, validation_history=tuple(history),
                         best_round=best, train_ids=tuple(train_ids),
                         holdout_ids=tuple(hold_ids), task_id=task_id,
                         alice_cols=p_alice, bob_cols=p_bob,
                         alice_rounds=snapshots,
                         round_seconds=tuple(timings))


def nn_predict(result: NnTrainResult, alice: LocalModule, bob_ep,
               ids: Sequence[str],
               alice_features: Optional[np.ndarray] = None,
               upto: Optional[int] = None,
               timeout: float = 30.0) -> np.ndarray:
    """Evaluate the trained split network on new rows.

    ``upto`` picks any executed round (default: the chosen best round). Bob
    is queried for his partial at that round; if he is unreachable, the
    transport error propagates - no partial predictions.
    """
    if alice_features is None:
        try:
            X = align(alice.partition, ids)
        except err.MissingId as exc:
            raise err.MissingTestRows(str(exc)) from None
    else:
        X = np.asarray(alice_features, dtype=np.float64)
    round_no = result.best_round if upto is None else upto
    try:
        w_alice, shared = result.alice_rounds[round_no]
    except KeyError:
        raise err.UnknownRound(
            f"round {round_no} was never executed") from None
    other = None
    if result.bob_cols > 0:
        other = _fetch_partial(bob_ep, alice.module_id, result.task_id,
                               round_no, tuple(ids), timeout)
    return dense_forward(X, other, w_alice, shared.b_hidden,
                         shared.w_out, shared.b_out)


def _fetch_partial(endpoint, sender, task_id, round_no, ids,
                   timeout) -> np.ndarray:
    env = Envelope(kind="PARTIAL_PREACT", task=task_id, round=round_no,
                   sender=sender, receiver=endpoint.module_id,
                   payload={"ids": list(ids)})
    reply = _roundtrip(endpoint, env, timeout)
    if reply.kind != "PARTIAL_PREACT" or "matrix" not in reply.payload:
        raise err.MalformedMessage("expected PARTIAL_PREACT with a matrix")
    if tuple(reply.payload["ids"]) != tuple(ids):
        raise err.ShapeMismatch("reply ids differ from request ids")
    matrix = np.array(reply.payload["matrix"], dtype=np.float64)
    if matrix.shape[0] != len(ids):
        raise err.ShapeMismatch("partial row count differs from request")
    return matrix


def _as_endpoint(bob):
    if isinstance(bob, LocalModule):
        responder = ModuleResponder(bob)
        return InProcEndpoint(responder), responder
    return bob, None
