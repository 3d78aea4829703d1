"""Command-line front end: gen, pretrain, cluster, baseline, eval.

Settings resolve in three layers: command-line flag beats config-file entry
beats built-in default. Reports are JSON documents that echo the fully
resolved configuration, so runs are self-describing and byte-reproducible.

Exit codes: 0 success, 1 usage/validation, 2 I/O or file format, 3 numerical
failure (non-finite loss).
"""

import argparse
import json
import sys

import numpy as np

from . import dataset as ds_mod
from . import metrics, nn, trainer
from .errors import FormatError, NonFiniteLossError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


_GEN_DEFAULTS = {
    "schemes": "BPSK,QPSK,4PAM,CPFSK",
    "per_class": 100,
    "length": 128,
    "snr_db": 10,
    "seed": 0,
}

_TRAIN_DEFAULTS = {
    "lambda_pretrain": 0.1,
    "lambda_finetune": 100.0,
    "u": 0.95,
    "l": 0.7,
    "batch": 64,
    "lr": 1e-3,
    "max_epochs": 50,
    "patience": 5,
    "val_fraction": 0.1,
    "stop_delta": 0.001,
    "seed": 0,
    "k": None,
}


def _resolve(args, file_cfg: dict, defaults: dict) -> dict:
    """Flag wins over config file wins over default."""
    out = {}
    for key, default in defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            out[key] = flag_val
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _train_config(cfg: dict, stage: str) -> trainer.TrainConfig:
    lam = cfg["lambda_pretrain"] if stage == "pretrain" else cfg["lambda_finetune"]
    return trainer.TrainConfig(
        lambda_pretrain=cfg["lambda_pretrain"] if stage == "pretrain" else 0.1,
        lambda_finetune=lam if stage == "finetune" else 100.0,
        u=cfg["u"],
        l=cfg["l"],
        batch_size=cfg["batch"],
        lr=cfg["lr"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        val_fraction=cfg["val_fraction"],
        stop_delta=cfg["stop_delta"],
        seed=cfg["seed"],
    ).validate()


def _write_report(path, payload: dict):
    if path is None:
        return
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _dataset_summary(ds: ds_mod.SignalDataset) -> dict:
    return {
        "records": len(ds),
        "classes": ds.num_classes,
        "class_names": list(ds.class_names),
        "signal_length": ds.signal_length,
        "labeled": ds.labeled,
    }


def _print_history(history):
    for entry in history:
        print(trainer.format_log_line(entry))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config), _GEN_DEFAULTS)
    if args.out is None:
        raise _UsageError("gen requires --out")
    names = [tok.strip() for tok in cfg["schemes"].split(",") if tok.strip()]
    schemes = [ds_mod.make_scheme(name) for name in names]
    ds = ds_mod.generate_synthetic(
        schemes, per_class=int(cfg["per_class"]), length=int(cfg["length"]),
        snr_db=int(cfg["snr_db"]), seed=int(cfg["seed"]),
    )
    ds_mod.save_neutral(ds, args.out)
    print(f"wrote {args.out}: n={len(ds)} k={ds.num_classes} L={ds.signal_length} "
          f"snr_db={cfg['snr_db']}")
    _write_report(args.report, {
        "command": "gen", "config": cfg, "dataset": _dataset_summary(ds), "out": str(args.out),
    })
    return EXIT_OK


def _prepare_aux(aux, target, k_req, seed):
    """Harmonize the auxiliary set with the declared target: length, then classes."""
    if target is not None and aux.signal_length != target.signal_length:
        records = [
            ds_mod.SignalRecord(
                iq=ds_mod.adjust_length(rec.iq, target.signal_length),
                label=rec.label, snr_db=rec.snr_db, source_id=rec.source_id)
            for rec in aux.records
        ]
        aux = ds_mod.SignalDataset(records=records, class_names=list(aux.class_names),
                                   signal_length=target.signal_length, labeled=aux.labeled)
    if k_req is not None and aux.num_classes > k_req:
        aux = ds_mod.select_categories(aux, k_req, seed)
    return aux


def cmd_pretrain(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config), _TRAIN_DEFAULTS)
    if args.aux is None:
        raise _UsageError("pretrain requires --aux")
    if args.ckpt_out is None:
        raise _UsageError("pretrain requires --ckpt-out")
    aux = ds_mod.load_neutral(args.aux)
    if not aux.labeled:
        raise ValueError("auxiliary dataset is unlabeled; pre-training needs labels")
    target = ds_mod.load_neutral(args.target) if args.target else None
    k_req = int(cfg["k"]) if cfg["k"] is not None else (
        target.num_classes if target is not None else aux.num_classes)
    aux = _prepare_aux(aux, target, k_req, int(cfg["seed"]))

    model = nn.init_model(aux.signal_length, aux.num_classes, seed=int(cfg["seed"]))
    tcfg = _train_config(cfg, "pretrain")
    result = trainer.pretrain(model, aux, tcfg)
    nn.save_checkpoint(result.model, args.ckpt_out)
    _print_history(result.history)
    print(f"wrote {args.ckpt_out}: best_epoch={result.best_epoch} "
          f"epochs_run={result.epochs_run} best_val_loss={result.best_val_loss:.6f}")
    _write_report(args.report, {
        "command": "pretrain",
        "config": cfg,
        "aux": _dataset_summary(aux),
        "target_declared": args.target is not None,
        "model": {"signal_length": aux.signal_length, "num_classes": aux.num_classes},
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "best_val_loss": result.best_val_loss if result.best_val_loss != float("inf") else None,
        "history": result.history,
        "ckpt_out": str(args.ckpt_out),
    })
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config), _TRAIN_DEFAULTS)
    if args.target is None:
        raise _UsageError("cluster requires --target")
    target = ds_mod.load_neutral(args.target)
    if cfg["k"] is not None:
        k_req = int(cfg["k"])
    elif target.num_classes >= 2:
        k_req = target.num_classes
    else:
        raise ValueError("target declares no classes; pass --k")

    pretrained = args.ckpt_in is not None
    if pretrained:
        model = nn.load_checkpoint(args.ckpt_in, expect_signal_length=target.signal_length)
    else:
        model = nn.init_model(target.signal_length, k_req, seed=int(cfg["seed"]))

    tcfg = _train_config(cfg, "finetune")
    result = trainer.finetune_cluster(model, target, tcfg, n_clusters=k_req)
    _print_history(result.history)

    if args.assign_out:
        with open(args.assign_out, "w", encoding="utf-8") as fh:
            fh.writelines(f"{int(a)}\n" for a in result.assignments)

    labels = target.labels()
    final_metrics = None
    if labels is not None:
        final_metrics = metrics.evaluate(
            labels, result.assignments, k=max(k_req, int(labels.max()) + 1))
        print("metrics: " + " ".join(f"{k}={v:.4f}" for k, v in final_metrics.items()))
    print(f"clustered {len(target)} records into {k_req} clusters "
          f"in {result.epochs_run} epochs (pretrained={pretrained})")
    _write_report(args.report, {
        "command": "cluster",
        "config": cfg,
        "target": _dataset_summary(target),
        "pretrained": pretrained,
        "k": k_req,
        "epochs_run": result.epochs_run,
        "final_loss": result.final_loss,
        "selected_pair_fraction": result.selected_pair_fraction,
        "skipped_batches": result.skipped_batches,
        "history": result.history,
        "metrics": final_metrics,
        "assignments_out": str(args.assign_out) if args.assign_out else None,
    })
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config), _TRAIN_DEFAULTS)
    if args.target is None:
        raise _UsageError("baseline requires --target")
    target = ds_mod.load_neutral(args.target)
    if cfg["k"] is not None:
        k_req = int(cfg["k"])
    elif target.num_classes >= 2:
        k_req = target.num_classes
    else:
        raise ValueError("target declares no classes; pass --k")

    flat = target.stacked().reshape(len(target), -1)
    assign, _, inertia = metrics.kmeans(flat, k_req, seed=int(cfg["seed"]))

    if args.assign_out:
        with open(args.assign_out, "w", encoding="utf-8") as fh:
            fh.writelines(f"{int(a)}\n" for a in assign)

    labels = target.labels()
    final_metrics = None
    if labels is not None:
        final_metrics = metrics.evaluate(labels, assign, k=max(k_req, int(labels.max()) + 1))
        print("metrics: " + " ".join(f"{k}={v:.4f}" for k, v in final_metrics.items()))
    print(f"k-means baseline on {len(target)} records, k={k_req}, inertia={inertia:.6f}")
    _write_report(args.report, {
        "command": "baseline",
        "config": cfg,
        "target": _dataset_summary(target),
        "k": k_req,
        "inertia": inertia,
        "metrics": final_metrics,
        "assignments_out": str(args.assign_out) if args.assign_out else None,
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.assignments is None or args.dataset is None:
        raise _UsageError("eval requires --assignments and --dataset")
    ds = ds_mod.load_neutral(args.dataset)
    labels = ds.labels()
    if labels is None:
        raise ValueError("dataset is unlabeled; nothing to evaluate against")
    with open(args.assignments, "r", encoding="utf-8") as fh:
        pred = [int(line) for line in fh.read().split()]
    if len(pred) != len(ds):
        raise ValueError(
            f"assignment count {len(pred)} does not match dataset record count {len(ds)}")
    pred = np.asarray(pred, dtype=np.int64)
    if pred.min() < 0:
        raise ValueError("assignments must be non-negative cluster indices")
    k = max(ds.num_classes, int(pred.max()) + 1, int(labels.max()) + 1)
    report = metrics.evaluate(labels, pred, k=k)
    print("metrics: " + " ".join(f"{name}={v:.4f}" for name, v in report.items()))
    _write_report(args.report, {
        "command": "eval",
        "dataset": _dataset_summary(ds),
        "k": k,
        "metrics": report,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", default=None, help="JSON config file (flags override it)")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--report", default=None, help="write a JSON run report here")


def _add_train_flags(sp):
    sp.add_argument("--lambda", dest="lam", type=float, default=None,
                    help="loss balance for this command's training stage")
    sp.add_argument("--u", type=float, default=None, help="upper similarity threshold")
    sp.add_argument("--l", type=float, default=None, help="lower similarity threshold")
    sp.add_argument("--batch", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    sp.add_argument("--patience", type=int, default=None)
    sp.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    sp.add_argument("--stop-delta", dest="stop_delta", type=float, default=None)
    sp.add_argument("--k", type=int, default=None, help="cluster count")


def build_parser() -> _Parser:
    parser = _Parser(prog="sigclust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic labeled dataset")
    _add_common(g)
    g.add_argument("--out", default=None, help="output neutral dataset file")
    g.add_argument("--schemes", default=None, help="comma-separated modulation names")
    g.add_argument("--per-class", dest="per_class", type=int, default=None)
    g.add_argument("--length", type=int, default=None)
    g.add_argument("--snr-db", dest="snr_db", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="supervised pairwise pre-training on a labeled set")
    _add_common(p)
    p.add_argument("--aux", default=None, help="labeled auxiliary dataset")
    p.add_argument("--target", default=None, help="target dataset (harmonizes length/classes)")
    p.add_argument("--ckpt-out", dest="ckpt_out", default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    c = sub.add_parser("cluster", help="fine-tune and cluster an unlabeled target set")
    _add_common(c)
    c.add_argument("--target", default=None)
    c.add_argument("--ckpt-in", dest="ckpt_in", default=None)
    c.add_argument("--assign-out", dest="assign_out", default=None,
                   help="write one cluster index per record (text)")
    _add_train_flags(c)
    c.set_defaults(func=cmd_cluster)

    b = sub.add_parser("baseline", help="K-means on raw flattened signals")
    _add_common(b)
    b.add_argument("--target", default=None)
    b.add_argument("--assign-out", dest="assign_out", default=None)
    b.add_argument("--k", type=int, default=None)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="metrics from stored assignments and a labeled dataset")
    _add_common(e)
    e.add_argument("--assignments", default=None)
    e.add_argument("--dataset", default=None)
    e.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "lam", None) is not None:
            # --lambda names the stage-appropriate balance for this command
            if args.command == "pretrain":
                args.lambda_pretrain = args.lam
            else:
                args.lambda_finetune = args.lam
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"file format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
