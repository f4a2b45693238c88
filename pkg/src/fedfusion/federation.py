"""Federated workflow: broadcast the global model, retrain locally, keep the
top fraction of updates by server-measured accuracy, and promote the best one
if it strictly beats the incumbent.

Both the in-process simulation and the TCP server/client pair drive the same
decision functions, so identical seeds produce identical promotion sequences
in either mode.
"""

from __future__ import annotations

import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset, split
from .errors import ArtifactMismatchError, DataError, ProtocolError
from .models import DEFAULT_INPUT_SHAPE, build_model
from .train import TrainConfig, evaluate, train_model
from .wire import (GlobalModel, LocalUpdate, ModelArtifact, Register,
                   RoundResult, Shutdown, artifact_from_model,
                   model_from_artifact, recv_message, send_message)

log = logging.getLogger("fedfusion.federation")


@dataclass
class ServerState:
    global_artifact: ModelArtifact
    global_accuracy: float
    round: int = 0
    top_fraction: float = 0.8
    min_clients_per_round: int = 1


@dataclass
class RoundLogEntry:
    round: int
    promoted: bool
    promoted_source: str  # client id as string, "aggregate", or ""
    global_accuracy: float


# ---------------------------------------------------------------------------
# sharding


def shard_dataset(ds: LabeledDataset, n_clients, mode="iid", seed=0) -> list[LabeledDataset]:
    """Disjoint, exhaustive shards; iid = stratified equal, label_skew = each
    client dominated (>= 70%) by one class."""
    if n_clients < 1:
        raise DataError(f"n_clients must be >= 1, got {n_clients}")
    rng = np.random.default_rng(seed)
    k = len(ds.class_names)
    assignments = [[] for _ in range(n_clients)]
    if mode == "iid":
        for label in range(k):
            idx = np.flatnonzero(ds.labels == label)
            if len(idx) and len(idx) < n_clients:
                raise DataError(f"class {label} has {len(idx)} samples for {n_clients} clients")
            idx = rng.permutation(idx)
            for c in range(n_clients):
                assignments[c].extend(idx[c::n_clients])
    elif mode == "label_skew":
        for label in range(k):
            idx = rng.permutation(np.flatnonzero(ds.labels == label))
            dominant = [c for c in range(n_clients) if c % k == label]
            others = [c for c in range(n_clients) if c % k != label]
            if not dominant or not others:
                group = dominant or others or list(range(n_clients))
                for j, c in enumerate(group * (len(idx) // len(group) + 1)):
                    if j < len(idx):
                        assignments[c].append(idx[j])
                continue
            n_dom = int(round(0.85 * len(idx)))
            for j in range(n_dom):
                assignments[dominant[j % len(dominant)]].append(idx[j])
            for j in range(n_dom, len(idx)):
                assignments[others[j % len(others)]].append(idx[j])
    else:
        raise DataError(f"unknown shard mode {mode!r}")
    return [ds.subset(np.sort(np.array(a, dtype=np.intp))) for a in assignments]


# ---------------------------------------------------------------------------
# server-side decisions


def select_top(updates: list[LocalUpdate], top_fraction: float) -> list[LocalUpdate]:
    """The ceil(fraction*n) highest-accuracy updates (>= 1), ties to lower client id."""
    if not updates:
        raise ProtocolError("select_top on an empty update list")
    keep = max(1, math.ceil(top_fraction * len(updates)))
    ranked = sorted(updates, key=lambda u: (-u.accuracy, u.client_id))
    return ranked[:keep]


def evaluate_artifact(artifact: ModelArtifact, images, labels, num_classes=3,
                      input_shape=DEFAULT_INPUT_SHAPE) -> float:
    model = model_from_artifact(artifact, num_classes=num_classes, input_shape=input_shape)
    acc, _ = evaluate(model, images, labels)
    return acc


def aggregate_weighted(updates: list[LocalUpdate]) -> ModelArtifact:
    """Accuracy-weighted parameter average of same-architecture updates."""
    ref = updates[0].artifact
    for u in updates[1:]:
        if u.artifact.arch != ref.arch or u.artifact.layout != ref.layout:
            raise ArtifactMismatchError("cannot average artifacts with different layouts")
    weights = np.array([u.accuracy for u in updates], dtype=np.float64)
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    weights /= weights.sum()
    stacked = np.stack([u.artifact.params.astype(np.float64) for u in updates])
    return ModelArtifact(ref.arch, ref.layout, (weights[:, None] * stacked).sum(axis=0).astype(np.float32))


def promote(state: ServerState, selected: list[LocalUpdate], val_images, val_labels,
            num_classes=3, input_shape=DEFAULT_INPUT_SHAPE, aggregate="best"):
    """Re-measure the selected artifacts on the server's validation set and
    replace the global model only on strict improvement. Returns
    (new_state, promoted, promoted_source)."""
    if not selected:
        raise ProtocolError("promote with no selected updates")
    candidates = []  # (accuracy, client_id, source, artifact)
    for u in selected:
        try:
            acc = evaluate_artifact(u.artifact, val_images, val_labels, num_classes, input_shape)
        except ArtifactMismatchError as exc:
            log.warning("rejecting update from client %d: %s", u.client_id, exc)
            continue
        candidates.append((acc, u.client_id, str(u.client_id), u.artifact))
    if aggregate == "avg" and len(selected) > 1:
        try:
            agg = aggregate_weighted(selected)
            acc = evaluate_artifact(agg, val_images, val_labels, num_classes, input_shape)
            candidates.append((acc, -1, "aggregate", agg))
        except ArtifactMismatchError as exc:
            log.warning("skipping aggregate candidate: %s", exc)
    new_state = replace(state, round=state.round + 1)
    if not candidates:
        return new_state, False, ""
    best_acc, _, source, artifact = max(candidates, key=lambda c: (c[0], -c[1]))
    if best_acc > state.global_accuracy:
        new_state.global_artifact = artifact
        new_state.global_accuracy = best_acc
        return new_state, True, source
    return new_state, False, ""


# ---------------------------------------------------------------------------
# client-side work (shared by sim and TCP modes)


def derived_seed(base_seed: int, client_id: int, round_no: int) -> int:
    return int(np.random.SeedSequence([base_seed, client_id, round_no]).generate_state(1)[0])


def client_train(artifact: ModelArtifact, shard: LabeledDataset, config: TrainConfig,
                 base_seed: int, client_id: int, round_no: int,
                 num_classes=3, input_shape=DEFAULT_INPUT_SHAPE) -> tuple[ModelArtifact, float]:
    """Retrain the global artifact on a local shard; empty shards return it unchanged."""
    if len(shard) == 0:
        return artifact, 0.0
    model = model_from_artifact(artifact, num_classes=num_classes, input_shape=input_shape)
    cfg = replace(config, rng_seed=derived_seed(base_seed, client_id, round_no))
    train_model(model, shard.images, shard.labels, cfg)
    acc, _ = evaluate(model, shard.images, shard.labels)
    return artifact_from_model(model), acc


# ---------------------------------------------------------------------------
# setup shared by both modes


@dataclass
class FederationPlan:
    arch: str | int
    n_clients: int
    rounds: int
    seed: int = 0
    top_fraction: float = 0.8
    min_clients_per_round: int = 1
    shard_mode: str = "iid"
    aggregate: str = "best"
    num_classes: int = 3
    input_shape: tuple = DEFAULT_INPUT_SHAPE
    train_config: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=1))


def federation_setup(plan: FederationPlan, dataset: LabeledDataset):
    """Split off a server validation set, shard the rest, and initialize the
    global model. Returns (initial ServerState, shards, val_images, val_labels)."""
    train, val = split(dataset, 0.8, plan.seed)
    shards = shard_dataset(train, plan.n_clients, plan.shard_mode, plan.seed)
    init_seed = int(np.random.SeedSequence([plan.seed, 0x1417]).generate_state(1)[0])
    model = build_model(plan.arch, num_classes=plan.num_classes,
                        input_shape=plan.input_shape, seed=init_seed)
    artifact = artifact_from_model(model)
    acc = evaluate_artifact(artifact, val.images, val.labels, plan.num_classes, plan.input_shape)
    state = ServerState(artifact, acc, 0, plan.top_fraction, plan.min_clients_per_round)
    return state, shards, val.images, val.labels


def server_decide(state: ServerState, updates: list[LocalUpdate], val_images, val_labels,
                  plan: FederationPlan):
    """Rank updates by server-measured accuracy, select the top fraction,
    promote. Returns (new_state, RoundLogEntry)."""
    measured = []
    for u in sorted(updates, key=lambda u: u.client_id):
        try:
            acc = evaluate_artifact(u.artifact, val_images, val_labels,
                                    plan.num_classes, plan.input_shape)
        except ArtifactMismatchError as exc:
            log.warning("dropping malformed update from client %d: %s", u.client_id, exc)
            continue
        measured.append(LocalUpdate(u.client_id, u.round, acc, u.artifact))
    if len(measured) < state.min_clients_per_round:
        raise ProtocolError(f"round {state.round}: {len(measured)} usable updates, "
                            f"quorum is {state.min_clients_per_round}")
    selected = select_top(measured, state.top_fraction)
    log.info("round %d: selected clients %s", state.round, [u.client_id for u in selected])
    new_state, promoted, source = promote(state, selected, val_images, val_labels,
                                          plan.num_classes, plan.input_shape, plan.aggregate)
    entry = RoundLogEntry(new_state.round, promoted, source, new_state.global_accuracy)
    return new_state, entry


# ---------------------------------------------------------------------------
# in-process simulation


def run_round(state: ServerState, clients: list[tuple[int, LabeledDataset]],
              plan: FederationPlan, val_images, val_labels):
    """One simulated round: broadcast, local training, select, promote."""
    if len(clients) < state.min_clients_per_round:
        raise ProtocolError(f"{len(clients)} clients connected, quorum is {state.min_clients_per_round}")
    round_no = state.round + 1
    updates = []
    for client_id, shard in clients:
        art, acc = client_train(state.global_artifact, shard, plan.train_config,
                                plan.seed, client_id, round_no,
                                plan.num_classes, plan.input_shape)
        updates.append(LocalUpdate(client_id, round_no, acc, art))
    return server_decide(state, updates, val_images, val_labels, plan)


def run_simulation(plan: FederationPlan, dataset: LabeledDataset):
    """All rounds in one process; returns (final ServerState, [RoundLogEntry])."""
    state, shards, val_x, val_y = federation_setup(plan, dataset)
    clients = list(enumerate(shards))
    entries = []
    for _ in range(plan.rounds):
        state, entry = run_round(state, clients, plan, val_x, val_y)
        entries.append(entry)
    return state, entries


# ---------------------------------------------------------------------------
# TCP mode


class FedServer:
    """Round-synchronous federated server over a byte-stream socket.

    One reader thread per connection enqueues decoded messages; the main
    thread owns all state transitions and all sends.
    """

    def __init__(self, plan: FederationPlan, dataset: LabeledDataset,
                 host="127.0.0.1", port=0, client_timeout=120.0):
        self.plan = plan
        self.dataset = dataset
        self.host, self.port = host, port
        self.client_timeout = client_timeout
        self.entries: list[RoundLogEntry] = []
        self.state: ServerState | None = None
        self._ready = threading.Event()

    def wait_ready(self, timeout=10.0):
        if not self._ready.wait(timeout):
            raise ProtocolError("server did not start listening in time")
        return self.port

    def _reader(self, conn, inbox):
        try:
            while True:
                inbox.put(recv_message(conn))
        except Exception:
            inbox.put(None)  # connection gone

    def run(self):
        plan = self.plan
        state, shards, val_x, val_y = federation_setup(plan, self.dataset)
        del shards  # clients bring their own shards in TCP mode
        self.state = state
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen(plan.n_clients)
        self.port = listener.getsockname()[1]
        self._ready.set()
        conns: dict[int, tuple] = {}  # client_id -> (conn, inbox)
        try:
            while len(conns) < plan.n_clients:
                conn, _ = listener.accept()
                msg = recv_message(conn)
                if not isinstance(msg, Register):
                    log.warning("expected Register, got %s; dropping connection", type(msg).__name__)
                    conn.close()
                    continue
                inbox: queue.Queue = queue.Queue()
                threading.Thread(target=self._reader, args=(conn, inbox), daemon=True).start()
                conns[msg.client_id] = (conn, inbox)
                log.info("client %d registered", msg.client_id)
            for _ in range(plan.rounds):
                round_no = state.round + 1
                for conn, _ in conns.values():
                    send_message(conn, GlobalModel(round_no, state.global_artifact))
                updates = []
                deadline = time.monotonic() + self.client_timeout
                for client_id, (conn, inbox) in sorted(conns.items()):
                    try:
                        msg = inbox.get(timeout=max(0.0, deadline - time.monotonic()))
                    except queue.Empty:
                        log.warning("client %d timed out in round %d", client_id, round_no)
                        continue
                    if isinstance(msg, LocalUpdate) and msg.round == round_no:
                        updates.append(msg)
                    else:
                        log.warning("client %d sent unexpected %s", client_id, type(msg).__name__)
                state, entry = server_decide(state, updates, val_x, val_y, plan)
                self.entries.append(entry)
                for conn, _ in conns.values():
                    try:
                        send_message(conn, RoundResult(entry.round, entry.promoted, entry.global_accuracy))
                    except OSError:
                        pass
            for conn, _ in conns.values():
                try:
                    send_message(conn, Shutdown())
                except OSError:
                    pass
            self.state = state
        finally:
            for conn, _ in conns.values():
                conn.close()
            listener.close()
        return state, self.entries


def run_client(host: str, port: int, client_id: int, shard: LabeledDataset,
               plan: FederationPlan, connect_retries=20):
    """Connect, register, train on each broadcast global model until Shutdown."""
    conn = None
    for attempt in range(connect_retries):
        try:
            conn = socket.create_connection((host, port), timeout=300.0)
            break
        except OSError:
            if attempt == connect_retries - 1:
                raise
            time.sleep(0.1)
    results = []
    try:
        send_message(conn, Register(client_id))
        while True:
            msg = recv_message(conn)
            if isinstance(msg, GlobalModel):
                art, acc = client_train(msg.artifact, shard, plan.train_config,
                                        plan.seed, client_id, msg.round,
                                        plan.num_classes, plan.input_shape)
                send_message(conn, LocalUpdate(client_id, msg.round, acc, art))
            elif isinstance(msg, RoundResult):
                results.append(msg)
            elif isinstance(msg, Shutdown):
                break
            else:
                raise ProtocolError(f"client {client_id}: unexpected {type(msg).__name__}")
    finally:
        conn.close()
    return results
