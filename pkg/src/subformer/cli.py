"""Command-line interface.

One executable drives the pipeline: parse, decompose, train, eval,
diagnose, attention, wl-test, and hops, all configured by a JSON file
with key=value overrides.  Failures print a machine-readable JSON object
to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import diagnostics as D
from . import model as M
from . import training as T
from . import wl
from .graphs import Corpus, CorpusError, Graph, load_corpus, make_graph, parse_smiles
from .junction import decompose, to_dot, to_json_dict

CONFIG_HELP = """\
Config file layout (JSON), with the hyperparameter each key mirrors:

  model.mp_layers            number of message-passing/coupling layers
  model.mp_hidden            MP hidden width
  model.transformer_layers   encoder layers
  model.transformer_hidden   token width (must divide by heads)
  model.heads                attention heads
  model.ffn_hidden           feed-forward width
  model.mp_dropout           MP dropout rate
  model.edge_dropout         edge-feature dropout rate
  model.attn_dropout         attention/FFN dropout rate
  model.pe                   positional encoding block or null:
  model.pe.kinds             subset of ["DEG","LPE","SPDE"] (PE type)
  model.pe.dim               eigenvectors per spectral kind (PE dim)
  model.pe.merge             "concat" or "sum" (PE merge)
  model.pe.deg_cap           degree id cap
  model.pe.deg_emb           degree embedding width (PE emb)
  model.mp_pe                same block for MP inputs, or null (MP PE)
  model.dual_readout         concatenate summed node features to CLS
  model.virtual_node         add an all-connecting node for MP
  model.padding_dim          max tree size per batch (padding dim)
  model.readout_hidden       readout MLP hidden width
  model.precision            "float32" or "float64"
  train.epochs               training epochs
  train.lr                   learning rate
  train.optimizer            "adam" or "adamw"
  train.weight_decay         AdamW decoupled weight decay
  train.scheduler            "none" or "rop" (reduce on plateau)
  train.rop_factor           LR decay factor
  train.rop_patience         epochs without improvement before decay
  train.batch_size           molecules per step
  train.seed                 split/init/shuffle/dropout seed
  train.split                [train, valid, test] ratios
  train.threads              batch shards evaluated in parallel

Overrides: trailing key=value arguments, e.g. `train.lr=0.0005
model.heads=4 model.pe.kinds=["DEG"]`; values parse as JSON when possible.
"""


class CliError(ValueError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


def _emit_error(kind: str, message: str, path=None):
    payload = {"error": kind, "message": message}
    if path is not None:
        payload["path"] = path
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


class JsonParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors are JSON on stderr."""

    def error(self, message):
        _emit_error("UsageError", message)
        raise SystemExit(2)


# --- config handling ------------------------------------------------------------

def _parse_override(text: str):
    if "=" not in text:
        raise CliError(f"override {text!r} is not key=value", path=text)
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _check_override_path(key: str):
    parts = key.split(".")
    if parts[0] not in ("model", "train"):
        raise CliError(f"override path must start with model. or train.",
                       path=key)
    fields = M.ModelConfig.__dataclass_fields__ if parts[0] == "model" \
        else T.TrainConfig.__dataclass_fields__
    if len(parts) < 2 or parts[1] not in fields:
        raise CliError(f"unknown config field {'.'.join(parts[:2])!r}",
                       path=key)
    if len(parts) > 2 and parts[1] not in ("pe", "mp_pe"):
        raise CliError(f"field {parts[1]!r} has no nested keys", path=key)
    return parts


def load_config(path, overrides) -> tuple:
    """Read the JSON config and apply key=value overrides.

    Returns (ModelConfig, TrainConfig).  Unknown keys are rejected with
    the offending path.
    """
    raw = {"model": {}, "train": {}}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}", path=str(path))
        except json.JSONDecodeError as exc:
            raise CliError(f"config is not valid JSON: {exc}", path=str(path))
        unknown = set(raw) - {"model", "train"}
        if unknown:
            raise CliError(f"unknown top-level config keys {sorted(unknown)}",
                           path=sorted(unknown)[0])
    for text in overrides or ():
        key, value = _parse_override(text)
        parts = _check_override_path(key)
        node = raw.setdefault(parts[0], {})
        for part in parts[1:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    try:
        model_config = M.ModelConfig.from_dict(raw.get("model", {}))
        train_config = T.TrainConfig.from_dict(raw.get("train", {}))
    except (ValueError, TypeError) as exc:
        raise CliError(str(exc), path=path and str(path))
    return model_config, train_config


# --- shared helpers -------------------------------------------------------------

def _graph_from_spec(obj, what: str) -> Graph:
    if "smiles" in obj:
        return parse_smiles(obj["smiles"])
    if "nodes" in obj and "edges" in obj:
        labels = [int(x) for x in obj["nodes"]]
        edges = [(int(u), int(v), int(lab)) for u, v, lab in obj["edges"]]
        return make_graph(len(labels), edges, labels)
    raise CliError(f"{what} needs smiles or nodes/edges")


def _load_checkpoint_bundle(path):
    params, meta = M.load_checkpoint(path)
    config = M.ModelConfig.from_dict(meta["model"])
    return params, meta, config


def _remap_corpus(corpus: Corpus, meta) -> Corpus:
    """Re-index SMILES-derived atom labels against the checkpoint vocabulary."""
    ckpt_symbols = meta.get("atom_vocab")
    if ckpt_symbols is None or corpus.atom_vocab is None \
            or not corpus.atom_vocab.symbols:
        return corpus
    index = {s: i for i, s in enumerate(ckpt_symbols)}
    remapped = []
    for rec in corpus.records:
        try:
            labels = tuple(index[corpus.atom_vocab.symbols[l]]
                           for l in rec.graph.node_labels)
        except KeyError as exc:
            raise CliError(f"record {rec.id}: atom type {exc.args[0]!r} "
                           f"not in the checkpoint vocabulary")
        graph = Graph(rec.graph.num_nodes, labels, rec.graph.edges)
        remapped.append(type(rec)(graph=graph, targets=rec.targets, id=rec.id))
    return Corpus(records=remapped, atom_vocab=corpus.atom_vocab,
                  num_tasks=corpus.num_tasks, task_type=corpus.task_type,
                  num_atom_types=meta["num_atom_types"],
                  skipped=corpus.skipped, skip_reasons=corpus.skip_reasons)


def _prepare_for_checkpoint(corpus, meta, config):
    corpus = _remap_corpus(corpus, meta)
    if corpus.task_type != meta["task_type"]:
        raise CliError(f"data task type {corpus.task_type!r} does not match "
                       f"checkpoint {meta['task_type']!r}")
    prepared = [M.prepare(rec.graph, config, meta["cluster_vocab"],
                          meta["num_atom_types"]) for rec in corpus.records]
    return corpus, prepared


def _out(obj):
    print(json.dumps(obj, sort_keys=True))


# --- subcommands ----------------------------------------------------------------

def cmd_parse(args) -> int:
    if args.smiles:
        graph = parse_smiles(args.smiles)
        _out({"num_nodes": graph.num_nodes, "num_edges": graph.num_edges,
              "nodes": list(graph.node_labels),
              "edges": [list(e) for e in graph.edges]})
        return 0
    corpus = load_corpus(args.input)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(json.dumps({"tasks": corpus.num_tasks,
                                 "task_type": corpus.task_type},
                                sort_keys=True) + "\n")
            for rec in corpus.records:
                fh.write(json.dumps(
                    {"id": rec.id, "nodes": list(rec.graph.node_labels),
                     "edges": [list(e) for e in rec.graph.edges],
                     "targets": list(rec.targets)}, sort_keys=True) + "\n")
    _out({"records": len(corpus.records), "skipped": corpus.skipped,
          "tasks": corpus.num_tasks, "task_type": corpus.task_type,
          "atom_types": corpus.atom_vocab.to_json()})
    return 0


def cmd_decompose(args) -> int:
    if args.smiles:
        decomp = decompose(parse_smiles(args.smiles))
        _out(to_json_dict(decomp))
        if args.dot_dir:
            os.makedirs(args.dot_dir, exist_ok=True)
            with open(os.path.join(args.dot_dir, "molecule.dot"), "w") as fh:
                fh.write(to_dot(decomp))
        return 0
    corpus = load_corpus(args.input)
    sink = open(args.output, "w") if args.output else sys.stdout
    try:
        for rec in corpus.records:
            decomp = decompose(rec.graph)
            line = dict(to_json_dict(decomp))
            line["id"] = rec.id
            sink.write(json.dumps(line, sort_keys=True) + "\n")
            if args.dot_dir:
                os.makedirs(args.dot_dir, exist_ok=True)
                path = os.path.join(args.dot_dir, f"{rec.id}.dot")
                with open(path, "w") as fh:
                    fh.write(to_dot(decomp))
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 0


def cmd_train(args) -> int:
    model_config, train_config = load_config(args.config, args.overrides)
    if args.threads is not None:
        train_config = T.TrainConfig.from_dict(
            {**train_config.to_dict(), "threads": args.threads})
    corpus = load_corpus(args.data)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "checkpoint.json")
    log = os.path.join(args.out_dir, "log.csv")
    result = T.train_on_corpus(corpus, model_config, train_config,
                               checkpoint_path=ckpt, log_path=log)
    train_rows = [r for r in result.log_rows if r[1] == "train"]
    _out({"checkpoint": ckpt, "log": log, "epochs": len(train_rows),
          "best_epoch": result.best_epoch,
          "final_train_loss": train_rows[-1][2]})
    return 0


def cmd_eval(args) -> int:
    params, meta, config = _load_checkpoint_bundle(args.checkpoint)
    corpus, prepared = _prepare_for_checkpoint(load_corpus(args.data),
                                               meta, config)
    value = T.evaluate(params, config, prepared, corpus.records,
                       corpus.num_tasks, args.metric, args.batch_size)
    _out({"metric": args.metric, "value": value,
          "records": len(corpus.records)})
    return 0


def cmd_diagnose(args) -> int:
    params, meta, config = _load_checkpoint_bundle(args.checkpoint)
    corpus, prepared = _prepare_for_checkpoint(load_corpus(args.data),
                                               meta, config)
    os.makedirs(args.out_dir, exist_ok=True)
    summary: dict = {}
    if args.energy:
        item = prepared[args.molecule]
        profile = D.subformer_energy_profile(params, config, item)
        path = os.path.join(args.out_dir, "energy.csv")
        with open(path, "w") as fh:
            fh.write("layer,energy\n")
            for i, value in enumerate(profile.values):
                fh.write(f"{i},{value!r}\n")
        summary["energy"] = path
    if args.jacobian is not None:
        item = prepared[args.molecule]
        squash = D.jacobian_map(params, config, item, args.jacobian,
                                args.threshold)
        path = os.path.join(args.out_dir, "jacobian.json")
        with open(path, "w") as fh:
            json.dump({"ref_node": squash.ref_node,
                       "threshold": squash.threshold,
                       "norms": squash.norms.tolist(),
                       "over_squashed": squash.flags.tolist()},
                      fh, sort_keys=True)
            fh.write("\n")
        summary["jacobian"] = path
    if args.hops:
        hist, skipped = D.hop_histogram([p.graph for p in prepared])
        path = os.path.join(args.out_dir, "hops.csv")
        D.write_histogram_csv(path, hist, skipped)
        summary["hops"] = path
    if not summary:
        raise CliError("nothing to do: pass --energy, --jacobian, or --hops")
    _out(summary)
    return 0


def cmd_attention(args) -> int:
    params, meta, config = _load_checkpoint_bundle(args.checkpoint)
    corpus, prepared = _prepare_for_checkpoint(load_corpus(args.data),
                                               meta, config)
    item = prepared[args.molecule]
    data = D.attention_export(params, config, item, item.decomposition)
    prefix = args.out_prefix
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    D.write_attention(prefix, data, item.decomposition, item.graph)
    _out({"json": f"{prefix}.json", "tree_dot": f"{prefix}_tree.dot",
          "graph_dot": f"{prefix}_graph.dot"})
    return 0


def cmd_wl_test(args) -> int:
    sink = open(args.output, "w") if args.output else sys.stdout
    try:
        with open(args.pairs) as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                g1 = _graph_from_spec(obj["left"], f"line {line_no} left")
                g2 = _graph_from_spec(obj["right"], f"line {line_no} right")
                verdicts = wl.compare_pair(g1, g2,
                                           use_edge_labels=args.edge_labels)
                verdicts["pair_id"] = str(obj.get("pair_id", line_no))
                sink.write(json.dumps(verdicts, sort_keys=True) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 0


def cmd_hops(args) -> int:
    corpus = load_corpus(args.input)
    hist, skipped = D.hop_histogram([rec.graph for rec in corpus.records])
    if args.output:
        D.write_histogram_csv(args.output, hist, skipped)
        _out({"histogram": args.output, "skipped": skipped})
    else:
        print("hops,count")
        for h in sorted(hist):
            print(f"{h},{hist[h]}")
        if skipped:
            print(f"skipped_graphs,{skipped}")
    return 0


# --- wiring ---------------------------------------------------------------------

def build_parser() -> JsonParser:
    parser = JsonParser(
        prog="subformer",
        description="Junction-tree graph transformer pipeline.",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a SMILES corpus to graph records")
    p.add_argument("--input", help="JSONL corpus path")
    p.add_argument("--smiles", help="parse a single SMILES string instead")
    p.add_argument("--output", help="write explicit-graph JSONL here")
    p.set_defaults(fn=cmd_parse)

    p = sub.add_parser("decompose", help="junction-tree decompositions")
    p.add_argument("--input", help="JSONL corpus path")
    p.add_argument("--smiles", help="decompose a single SMILES string")
    p.add_argument("--output", help="JSONL output path (default stdout)")
    p.add_argument("--dot-dir", help="also write DOT files here")
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", help="JSON config path")
    p.add_argument("--data", required=True, help="JSONL corpus path")
    p.add_argument("--out-dir", required=True,
                   help="directory for checkpoint.json and log.csv")
    p.add_argument("--threads", type=int, default=None,
                   help="batch shards evaluated in parallel (default 1)")
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides, e.g. train.lr=0.0005")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", required=True,
                   choices=("mae", "roc_auc", "ap"))
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose", help="energy/jacobian/hop instruments")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--molecule", type=int, default=0,
                   help="record index for energy/jacobian probes")
    p.add_argument("--energy", action="store_true",
                   help="token Dirichlet-energy profile per encoder layer")
    p.add_argument("--jacobian", type=int, default=None, metavar="REF_NODE",
                   help="Jacobian norms w.r.t. every atom for this node")
    p.add_argument("--threshold", type=float, default=D.OVERSQUASH_THRESHOLD,
                   help="over-squashing norm threshold")
    p.add_argument("--hops", action="store_true",
                   help="hop-distance histogram over the corpus")
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("attention", help="export attention maps for a molecule")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--molecule", type=int, default=0)
    p.add_argument("--out-prefix", required=True,
                   help="writes <prefix>.json, <prefix>_tree.dot, "
                        "<prefix>_graph.dot")
    p.set_defaults(fn=cmd_attention)

    p = sub.add_parser("wl-test", help="1-WL vs tree-augmented verdicts")
    p.add_argument("--pairs", required=True,
                   help="JSONL: {pair_id, left: {...}, right: {...}}")
    p.add_argument("--output", help="verdict JSONL path (default stdout)")
    p.add_argument("--edge-labels", action="store_true",
                   help="fold edge labels into refinement")
    p.set_defaults(fn=cmd_wl_test)

    p = sub.add_parser("hops", help="hop-distance histogram for a corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--output", help="CSV path (default stdout)")
    p.set_defaults(fn=cmd_hops)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except CliError as exc:
        _emit_error(type(exc).__name__, str(exc), exc.path)
        return 1
    except (CorpusError, ValueError, OSError, RuntimeError, KeyError,
            IndexError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
