"""Command-line entry point: train models, evaluate, fuse, federate, report."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import metrics as M
from .data import generate_synthetic, load_directory, split
from .errors import ConfigError, DataError, FedFusionError
from .federation import FederationPlan, FedServer, run_client, run_simulation, shard_dataset
from .fusion import FusionMode, ensemble_from_artifacts, ensemble_scores
from .models import ARCH_NAMES, DISPLAY_NAMES, ArchitectureId, build_model
from .train import TrainConfig, evaluate, train_model
from .wire import artifact_from_model, load_artifact, model_from_artifact, save_artifact

log = logging.getLogger("fedfusion.cli")

MODEL_CHOICES = sorted(ARCH_NAMES)
REPORT_ORDER = ["TinyVGG", "TinyInception", "TinyDense", "TinySwin", "Fusion(Sum)", "Fusion(Average)"]


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("FEDFUSION_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _add_data_args(p):
    p.add_argument("--data", default="synthetic", help="'synthetic' or a directory of PGM/PPM class folders")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)


def _load_dataset(args):
    if args.data == "synthetic":
        return generate_synthetic(args.n_per_class, args.image_size, args.noise, args.seed)
    ds, rejected = load_directory(args.data)
    if rejected:
        log.info("rejected %d corrupted/mismatched files: %s", len(rejected), rejected)
        print(f"rejected {len(rejected)} file(s): {', '.join(rejected)}", file=sys.stderr)
    return ds


def _write_summary(out_dir, name, train_s, test_s, acc):
    path = os.path.join(out_dir, f"summary_{name.replace('(', '_').replace(')', '')}.csv")
    M.comparison_report([M.ComparisonRow(name, train_s, test_s, acc * 100.0)], path)
    return path


def _metrics_rows(y_true, scores, k):
    """Tidy (metric, class, value) rows: accuracy, confusion cells, per-class AUC."""
    preds = np.argmax(scores, axis=1)
    cm = M.confusion_matrix(y_true, preds, k)
    rows = [("accuracy", "", f"{cm.accuracy:.6f}")]
    for i in range(k):
        for j in range(k):
            rows.append((f"confusion_{i}_{j}", "", str(int(cm.counts[i, j]))))
    for c in range(k):
        rows.append(("auc", str(c), f"{M.roc_auc_ovr(scores, y_true, c).auc:.6f}"))
    rows.append(("macro_auc", "", f"{M.macro_auc(scores, y_true, k):.6f}"))
    return rows


def _write_metrics(path, sections):
    """sections: [(mode, rows)]; writes mode,metric,class,value CSV."""
    import csv

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "metric", "class", "value"])
        for mode, rows in sections:
            for metric, cls, value in rows:
                w.writerow([mode, metric, cls, value])


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    ds = _load_dataset(args)
    train_ds, test_ds = split(ds, 0.8, args.seed)
    model = build_model(args.model, input_shape=ds.image_shape, seed=args.seed,
                        dropout_rate=args.dropout)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      dropout_rate=args.dropout, rng_seed=args.seed, momentum=args.momentum)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.monotonic()
    history = train_model(model, train_ds.images, train_ds.labels, cfg,
                          test_ds.images, test_ds.labels)
    train_s = time.monotonic() - t0
    t0 = time.monotonic()
    test_acc, _ = evaluate(model, test_ds.images, test_ds.labels)
    test_s = time.monotonic() - t0
    name = DISPLAY_NAMES[ARCH_NAMES[args.model]]
    model_path = os.path.join(args.out, f"model_{args.model}.bin")
    save_artifact(model_path, artifact_from_model(model))
    M.training_curves(history, os.path.join(args.out, f"curves_{args.model}.csv"))
    _write_summary(args.out, name, train_s, test_s, test_acc)
    final = history[-1]
    print(f"{name}: train_acc={final.train_acc:.4f} val_acc={final.val_acc:.4f} "
          f"test_acc={test_acc:.4f} model={model_path}")
    return 0


def cmd_evaluate(args):
    ds = _load_dataset(args)
    _, test_ds = split(ds, 0.8, args.seed)
    artifact = load_artifact(args.model)
    model = model_from_artifact(artifact, input_shape=ds.image_shape)
    t0 = time.monotonic()
    scores = model.predict_proba(test_ds.images)
    test_s = time.monotonic() - t0
    k = model.num_classes
    os.makedirs(args.out, exist_ok=True)
    name = DISPLAY_NAMES[ArchitectureId(artifact.arch)]
    path = os.path.join(args.out, f"metrics_{name}.csv")
    _write_metrics(path, [("single", _metrics_rows(test_ds.labels, scores, k))])
    acc = M.accuracy(test_ds.labels, np.argmax(scores, axis=1))
    _write_summary(args.out, name, 0.0, test_s, acc)
    print(f"{name}: test_acc={acc:.4f} metrics={path}")
    return 0


def cmd_ensemble(args):
    if not 2 <= len(args.models) <= 4:
        raise ConfigError(f"ensemble needs 2-4 model files, got {len(args.models)}")
    ds = _load_dataset(args)
    _, test_ds = split(ds, 0.8, args.seed)
    artifacts = [load_artifact(p) for p in args.models]
    os.makedirs(args.out, exist_ok=True)
    sections = []
    for mode in (FusionMode.Sum, FusionMode.Average):
        ensemble = ensemble_from_artifacts(artifacts, mode)
        t0 = time.monotonic()
        scores = ensemble_scores(ensemble, test_ds.images, use_logits=args.logits)
        test_s = time.monotonic() - t0
        k = ensemble.models[0].num_classes
        rows = _metrics_rows(test_ds.labels, scores, k)
        sections.append((mode.value, rows))
        acc = M.accuracy(test_ds.labels, np.argmax(scores, axis=1))
        label = "Fusion(Sum)" if mode is FusionMode.Sum else "Fusion(Average)"
        _write_summary(args.out, label, 0.0, test_s, acc)
        print(f"{label}: test_acc={acc:.4f}")
    path = os.path.join(args.out, "ensemble_metrics.csv")
    _write_metrics(path, sections)
    print(f"metrics written to {path}")
    return 0


def _make_plan(args):
    return FederationPlan(
        arch=args.model, n_clients=args.clients, rounds=args.rounds, seed=args.seed,
        top_fraction=args.top_frac, min_clients_per_round=args.quorum,
        shard_mode=args.shard_mode, aggregate=args.aggregate,
        train_config=TrainConfig(learning_rate=args.lr, epochs=args.epochs_per_round,
                                 batch_size=args.batch_size, dropout_rate=args.dropout,
                                 rng_seed=args.seed),
    )


def _write_fed_log(path, entries):
    import csv

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "promoted", "promoted_source", "global_accuracy"])
        for e in entries:
            w.writerow([e.round, int(e.promoted), e.promoted_source, f"{e.global_accuracy:.6f}"])


def cmd_fed_sim(args):
    if args.clients < 1 or args.rounds < 1:
        raise ConfigError("clients and rounds must be >= 1")
    ds = _load_dataset(args)
    plan = _make_plan(args)
    state, entries = run_simulation(plan, ds)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "fed_log.csv")
    _write_fed_log(log_path, entries)
    save_artifact(os.path.join(args.out, "global_model.bin"), state.global_artifact)
    print(f"{args.rounds} rounds, final global accuracy {state.global_accuracy:.4f}, log={log_path}")
    return 0


def _parse_addr(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"address must be host:port, got {text!r}")
    return host, int(port)


def cmd_fed_server(args):
    ds = _load_dataset(args)
    plan = _make_plan(args)
    host, port = _parse_addr(args.bind)
    server = FedServer(plan, ds, host, port, client_timeout=args.timeout)
    state, entries = server.run()
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "fed_log.csv")
    _write_fed_log(log_path, entries)
    save_artifact(os.path.join(args.out, "global_model.bin"), state.global_artifact)
    print(f"{len(entries)} rounds served, final global accuracy {state.global_accuracy:.4f}")
    return 0


def cmd_fed_client(args):
    ds = _load_dataset(args)
    plan = _make_plan(args)
    # Rebuild the same shard assignment the simulation would use.
    train_ds, _ = split(ds, 0.8, args.seed)
    shards = shard_dataset(train_ds, args.clients, args.shard_mode, args.seed)
    if not 0 <= args.client_id < args.clients:
        raise ConfigError(f"client id {args.client_id} outside [0, {args.clients})")
    host, port = _parse_addr(args.connect)
    results = run_client(host, port, args.client_id, shards[args.client_id], plan)
    print(f"client {args.client_id}: participated in {len(results)} round(s)")
    return 0


def cmd_report(args):
    rows = []
    missing = []
    for name in REPORT_ORDER:
        path = os.path.join(args.metrics_dir, f"summary_{name.replace('(', '_').replace(')', '')}.csv")
        if not os.path.exists(path):
            missing.append(name)
            continue
        rows.extend(M.read_comparison(path))
    if missing:
        raise DataError(f"missing summary files for: {', '.join(missing)} in {args.metrics_dir}")
    M.comparison_report(rows, args.out)
    print(f"comparison table with {len(rows)} rows written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="fedfusion",
                                     description="Toy federated ensemble classification framework")
    sub = parser.add_subparsers(dest="command", required=True)

    def train_flags(p):
        p.add_argument("--epochs-per-round", type=int, default=1)
        p.add_argument("--batch-size", type=int, default=25)
        p.add_argument("--lr", type=float, default=0.05)
        p.add_argument("--dropout", type=float, default=0.5)

    p = sub.add_parser("train", help="train one model, write artifact + curves")
    p.add_argument("--model", required=True, choices=MODEL_CHOICES)
    _add_data_args(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=25)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a stored model on the test split")
    p.add_argument("--model", required=True, help="model artifact file")
    _add_data_args(p)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="evaluate sum/average fusion of stored models")
    p.add_argument("--models", nargs="+", required=True, help="2-4 model artifact files")
    _add_data_args(p)
    p.add_argument("--logits", action="store_true", help="fuse pre-softmax scores instead of probabilities")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_ensemble)

    for cmd, func in (("fed-sim", cmd_fed_sim), ("fed-server", cmd_fed_server)):
        p = sub.add_parser(cmd, help=f"{'simulate' if cmd == 'fed-sim' else 'serve'} federated rounds")
        p.add_argument("--model", default="vgg", choices=MODEL_CHOICES)
        _add_data_args(p)
        p.add_argument("--clients", type=int, default=5)
        p.add_argument("--rounds", type=int, default=3)
        p.add_argument("--top-frac", type=float, default=0.8)
        p.add_argument("--quorum", type=int, default=1)
        p.add_argument("--shard-mode", choices=["iid", "label_skew"], default="iid")
        p.add_argument("--aggregate", choices=["best", "avg"], default="best")
        train_flags(p)
        p.add_argument("--out", default=".")
        if cmd == "fed-server":
            p.add_argument("--bind", default="127.0.0.1:7171")
            p.add_argument("--timeout", type=float, default=120.0)
        p.set_defaults(func=func)

    p = sub.add_parser("fed-client", help="join a federated server")
    p.add_argument("--connect", required=True, help="server host:port")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--model", default="vgg", choices=MODEL_CHOICES)
    _add_data_args(p)
    p.add_argument("--clients", type=int, default=5)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--top-frac", type=float, default=0.8)
    p.add_argument("--quorum", type=int, default=1)
    p.add_argument("--shard-mode", choices=["iid", "label_skew"], default="iid")
    p.add_argument("--aggregate", choices=["best", "avg"], default="best")
    train_flags(p)
    p.set_defaults(func=cmd_fed_client)

    p = sub.add_parser("report", help="aggregate summaries into a comparison table")
    p.add_argument("--metrics-dir", required=True)
    p.add_argument("--out", default="comparison.csv")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FedFusionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
