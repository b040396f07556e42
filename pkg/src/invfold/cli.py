"""Command-line entry point.

Subcommands: featurize, train, infer, eval, theory. Every run is
deterministic under --seed (fallback order: flag, config file, the
RIGA_SEED environment variable, 0). Exit codes: 0 success, 1 usage or
missing input, 2 parse failure, 3 numeric/dimension failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import theory as theory_mod
from .config import RunConfig, load_config
from .errors import (
    ChainNotFound,
    CheckpointMismatch,
    ConfigError,
    DegenerateFrame,
    EmptyBackbone,
    GraphTooSmall,
    InvalidParameter,
    InvfoldError,
    ParseError,
)
from .geometry import build_knn_graph, read_graph, write_graph
from .nn import load_checkpoint, restore_parameters, save_checkpoint
from .recycling import (
    FileSequenceProvider,
    FileStructureProvider,
    InverseFoldModel,
    StubSequenceProvider,
    StubStructureProvider,
    recycle_infer,
)
from .structure_io import parse_pdb, read_fasta_file, write_fasta
from .synthetic import toy_corpus
from .training import metrics as compute_metrics
from .training import staged_loss, train_toy, write_metrics_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_NUMERIC = 3

# input-data failures exit 2; anything numeric or dimensional exits 3
_PARSE_ERRORS = (ParseError, ChainNotFound, EmptyBackbone, GraphTooSmall, DegenerateFrame)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _resolve_seed(args, cfg: RunConfig) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if args.config is not None:
        return cfg.seed
    env = os.environ.get("RIGA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise _UsageError(f"RIGA_SEED must be an integer, got {env!r}") from exc
    return cfg.seed


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg.seed = _resolve_seed(args, cfg)
    cfg.train.seed = cfg.seed
    return cfg


def _providers(cfg: RunConfig, struct_arg=None, seq_arg=None):
    struct_sel = struct_arg or cfg.priors.structure_provider
    seq_sel = seq_arg or cfg.priors.sequence_provider
    if struct_sel == "stub":
        struct_p = StubStructureProvider(dim=cfg.priors.struct_dim, seed=cfg.priors.provider_seed)
    else:
        struct_p = FileStructureProvider(struct_sel)
    if seq_sel == "stub":
        seq_p = StubSequenceProvider(dim=cfg.priors.seq_dim, seed=cfg.priors.provider_seed)
    else:
        seq_p = FileSequenceProvider(seq_sel)
    if struct_p.dim != cfg.priors.struct_dim or seq_p.dim != cfg.priors.seq_dim:
        raise CheckpointMismatch(
            f"provider dims ({struct_p.dim}, {seq_p.dim}) do not match config "
            f"({cfg.priors.struct_dim}, {cfg.priors.seq_dim})")
    return struct_p, seq_p


def _read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise _UsageError(f"no such file: {path}")
    return p.read_text()


def _build_model(cfg: RunConfig, checkpoint=None) -> InverseFoldModel:
    model = InverseFoldModel(cfg.model_config(), seed=cfg.seed)
    if checkpoint is not None:
        arrays, _ = load_checkpoint(checkpoint)
        restore_parameters(model.parameters(), arrays)
    return model


def cmd_featurize(args) -> int:
    cfg = _load_cfg(args)
    text = _read_text(args.pdb)
    backbone = parse_pdb(text, args.chain)
    ss = None
    if args.ss:
        ss = json.loads(_read_text(args.ss))
    graph = build_knn_graph(backbone, cfg.features, ss=ss)
    write_graph(graph, args.out)
    print(f"featurized {graph.n} residues (k={graph.k}, "
          f"node_dim={graph.node_feats.shape[1]}, edge_dim={graph.edge_feats.shape[2]}) "
          f"-> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.out_dir or cfg.data.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.corpus:
        corpus = []
        pdbs = sorted(Path(args.corpus).glob("*.pdb"))
        if not pdbs:
            raise _UsageError(f"no .pdb files in {args.corpus}")
        for p in pdbs:
            corpus.append(parse_pdb(p.read_text(), args.chain or cfg.data.chain))
    else:
        corpus = toy_corpus(cfg.seed)

    result = train_toy(corpus, cfg.train, model_cfg=cfg.model_config(),
                       feature_cfg=cfg.features)
    ckpt = out_dir / "checkpoint.ifc"
    save_checkpoint(result.model.parameters(), ckpt,
                    meta={"seed": cfg.seed, "rng": cfg.rng,
                          "recycles": cfg.model.recycles,
                          "stopped_step": result.stopped_step,
                          "stopped_early": result.stopped_early})
    write_metrics_csv(result.log_rows, out_dir / "metrics.csv")
    m = result.final_metrics
    print(f"trained {result.stopped_step} steps "
          f"(early_stop={result.stopped_early}); final train "
          f"recovery={m.recovery:.2f}% ppl={m.perplexity:.4f}")
    print(f"checkpoint -> {ckpt}")
    return EXIT_OK


def _load_graph_for_infer(args, cfg: RunConfig):
    if args.features:
        if args.pdb:
            raise _UsageError("give either --features or --pdb, not both")
        return read_graph(args.features)
    if not args.pdb:
        raise _UsageError("one of --features or --pdb is required")
    backbone = parse_pdb(_read_text(args.pdb), args.chain)
    return build_knn_graph(backbone, cfg.features)


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    graph = _load_graph_for_infer(args, cfg)
    model = _build_model(cfg, checkpoint=args.checkpoint)
    struct_p, seq_p = _providers(cfg, args.struct_prior, args.seq_prior)
    recycles = args.recycles if args.recycles is not None else cfg.model.recycles

    result = recycle_infer(model, graph, struct_p, seq_p, recycles)
    sequence = str(result.predicted)
    header = f"{Path(args.pdb or args.features).stem}|stage={recycles}"
    if args.out_fasta:
        write_fasta(args.out_fasta, header, sequence)
        print(f"fasta -> {args.out_fasta}")
    else:
        print(f">{header}")
        print(sequence)

    if args.out_dist:
        payload = {
            "n": graph.n,
            "stages": recycles,
            "classes": "ACDEFGHIKLMNPQRSTVWY",
            "probs": [d.probs.tolist() for d in result.distributions],
        }
        Path(args.out_dist).write_text(json.dumps(payload))
        print(f"distributions -> {args.out_dist}")

    if args.ref_seq:
        ref = args.ref_seq
        if Path(ref).is_file():
            ref = read_fasta_file(ref)[0][1]
        loss = staged_loss(result.distributions, ref)
        m = compute_metrics(result.distributions[-1], ref)
        report = {"staged_loss": loss, "perplexity": m.perplexity, "recovery": m.recovery}
        print(json.dumps(report))
        if args.out_metrics:
            Path(args.out_metrics).write_text(json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    pdbs = sorted(Path(args.dataset).glob("*.pdb"))
    if not pdbs:
        raise _UsageError(f"no .pdb files in {args.dataset}")
    model = _build_model(cfg, checkpoint=args.checkpoint)
    struct_p, seq_p = _providers(cfg)
    recycles = args.recycles if args.recycles is not None else cfg.model.recycles

    def one(path):
        backbone = parse_pdb(path.read_text(), args.chain or cfg.data.chain)
        graph = build_knn_graph(backbone, cfg.features)
        result = recycle_infer(model, graph, struct_p, seq_p, recycles)
        ref = backbone.sequence
        fasta = path.with_suffix(".fasta")
        if fasta.is_file():
            try:
                entries = read_fasta_file(fasta)
            except ParseError as exc:
                raise ParseError(f"reference error: {fasta.name}: {exc}") from exc
            if not entries or len(entries[0][1]) != graph.n:
                raise ParseError(f"reference error: {fasta.name} has the wrong length")
            ref = entries[0][1]
        m = compute_metrics(result.distributions[-1], ref)
        idx_mask = [t in "ACDEFGHIKLMNPQRSTVWY" for t in ref]
        n_scored = sum(idx_mask)
        return {"protein": path.stem, "n": graph.n, "scored": n_scored,
                "recovery": m.recovery, "ppl": m.perplexity}

    rows = []
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(one, p) for p in pdbs]
            for path, fut in zip(pdbs, futures):
                try:
                    rows.append(fut.result())
                except InvfoldError as exc:
                    rows.append({"protein": path.stem, "error": str(exc)})
    else:
        for path in pdbs:
            try:
                rows.append(one(path))
            except InvfoldError as exc:
                rows.append({"protein": path.stem, "error": str(exc)})

    scored = [r for r in rows if "error" not in r]
    lines = ["protein,n,recovery,ppl,error"]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['protein']},,,,\"{r['error']}\"")
        else:
            lines.append(f"{r['protein']},{r['n']},{r['recovery']:.6g},{r['ppl']:.6g},")
    if scored:
        total = sum(r["scored"] for r in scored)
        agg_ce = sum(math.log(r["ppl"]) * r["scored"] for r in scored) / total
        agg_rec = sum(r["recovery"] * r["scored"] for r in scored) / total
        lines.append(f"AGGREGATE,{sum(r['n'] for r in scored)},{agg_rec:.6g},"
                     f"{math.exp(agg_ce):.6g},")
    out = args.out or "metrics.csv"
    Path(out).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"metrics -> {out}")
    return EXIT_OK


_SUITES = ("resistance", "return-mass", "sensitivity", "contraction", "recycling",
           "oversmoothing")


def cmd_theory(args) -> int:
    cfg = _load_cfg(args)
    from .rng import RandomStream
    stream = RandomStream(cfg.seed, "theory-cli")
    report = {"suite": args.suite, "seed": cfg.seed}
    failed = False
    csv_rows = None

    if args.suite == "resistance":
        worst = {"violations": 0, "max_violation": -math.inf,
                 "sherman_morrison_residual": 0.0, "graphs": args.count}
        for i in range(args.count):
            child = stream.child(f"g{i}")
            n = int(child.child("n").integers(4, 13))
            g = theory_mod.random_connected_graph(child, n)
            alpha = child.child("alpha").gaussian((n,))
            rep = theory_mod.rank_one_resistance_check(g, alpha)
            worst["violations"] += rep["violations"]
            worst["max_violation"] = max(worst["max_violation"], rep["max_violation"])
            worst["sherman_morrison_residual"] = max(
                worst["sherman_morrison_residual"], rep["sherman_morrison_residual"])
        worst["ok"] = worst["violations"] == 0 and worst["sherman_morrison_residual"] <= 1e-8
        report.update(worst)
        failed = not worst["ok"]

    elif args.suite == "return-mass":
        if args.graph.startswith("star"):
            leaves = int(args.graph[4:] or 3)
            rep = theory_mod.return_mass(theory_mod.star_attention(leaves))
        elif args.graph in ("cycle2", "2cycle"):
            rep = theory_mod.return_mass(theory_mod.two_cycle_attention())
        else:
            raise _UsageError(f"unknown graph fixture {args.graph!r} (try star3 or cycle2)")
        report.update({"graph": args.graph, "per_node": rep.per_node.tolist(),
                       "mean": rep.mean})

    elif args.suite == "sensitivity":
        fixtures = theory_mod.random_sensitivity_fixtures(stream, args.count)
        rep = theory_mod.softmax_sensitivity_check(fixtures, eps=args.eps)
        report.update(rep)
        failed = not rep["ok"]

    elif args.suite in ("contraction", "oversmoothing", "recycling"):
        from .synthetic import random_backbone
        model = _build_model(cfg, checkpoint=args.checkpoint)
        struct_p, seq_p = _providers(cfg)
        if args.suite == "contraction":
            graphs = [build_knn_graph(random_backbone(cfg.seed, 24, name=f"theory{i}"),
                                      cfg.features) for i in range(args.graphs)]
            rep = theory_mod.contraction_profile(model, graphs, struct_p, seq_p)
            report.update(rep)
            csv_rows = [("layer", "directional", "symmetric")] + [
                (i + 1, d, s) for i, (d, s) in enumerate(zip(rep["directional"],
                                                             rep["symmetric"]))]
            if args.alpha_dump:
                from .encoder import write_attention_dump
                _, alphas, _ = model.run_stages(graphs[0], struct_p, seq_p, 1,
                                                training=False)
                write_attention_dump(args.alpha_dump, alphas[0], graphs[0].neighbors)
                print(f"attention dump -> {args.alpha_dump}")
        elif args.suite == "oversmoothing":
            graph = build_knn_graph(random_backbone(cfg.seed, 24, name="theory0"),
                                    cfg.features)
            rep = theory_mod.oversmoothing_profile(model, graph, struct_p, seq_p)
            report.update(rep)
            csv_rows = [("layer", "bridge_on", "bridge_off")] + [
                (i, a, b) for i, (a, b) in enumerate(zip(rep["bridge_on"],
                                                         rep["bridge_off"]))]
        else:
            graph = build_knn_graph(random_backbone(cfg.seed, 24, name="theory0"),
                                    cfg.features)
            result = recycle_infer(model, graph, struct_p, seq_p, cfg.model.recycles)
            losses = [staged_loss([d], graph.labels) for d in result.distributions]
            rep = theory_mod.recycling_monotonicity_report(losses)
            report.update(rep)
            csv_rows = [("stage", "loss")] + [(t + 1, v) for t, v in enumerate(losses)]

    print(json.dumps(report, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    if args.csv and csv_rows:
        with open(args.csv, "w") as fh:
            for row in csv_rows:
                fh.write(",".join(str(x) for x in row) + "\n")
    return EXIT_NUMERIC if failed else EXIT_OK


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None,
                   help="seed override (fallback: config, then RIGA_SEED)")


def build_parser() -> _Parser:
    parser = _Parser(prog="invfold", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="PDB chain -> featurized-graph container")
    p.add_argument("pdb")
    p.add_argument("--chain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ss", default=None, help="JSON list of secondary-structure classes")
    _add_common(p)
    p.set_defaults(fn=cmd_featurize)

    p = sub.add_parser("train", help="train on a PDB directory or the synthetic corpus")
    p.add_argument("--corpus", default=None, help="directory of .pdb files (default: synthetic)")
    p.add_argument("--chain", default=None)
    p.add_argument("--out-dir", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="predict a sequence with cascaded recycling")
    p.add_argument("--pdb", default=None)
    p.add_argument("--chain", default="A")
    p.add_argument("--features", default=None, help="featurized-graph container")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--recycles", type=int, default=None)
    p.add_argument("--struct-prior", default=None, help="'stub' or embedding file")
    p.add_argument("--seq-prior", default=None, help="'stub' or embedding file")
    p.add_argument("--out-fasta", default=None)
    p.add_argument("--out-dist", default=None, help="JSON per-stage distributions")
    p.add_argument("--ref-seq", default=None, help="reference sequence or FASTA path")
    p.add_argument("--out-metrics", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="batch inference + metrics CSV")
    p.add_argument("--dataset", required=True, help="directory of .pdb (+ optional .fasta)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--chain", default=None)
    p.add_argument("--recycles", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("theory", help="graph-theory diagnostic suites")
    p.add_argument("--suite", required=True, choices=_SUITES)
    p.add_argument("--graph", default="star3", help="fixture for return-mass")
    p.add_argument("--count", type=int, default=200, help="graphs/fixtures to sweep")
    p.add_argument("--graphs", type=int, default=3, help="graphs for contraction")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--csv", default=None, help="CSV series path")
    p.add_argument("--alpha-dump", default=None,
                   help="write per-layer attention weights (contraction suite)")
    _add_common(p)
    p.set_defaults(fn=cmd_theory)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (_UsageError, FileNotFoundError, InvalidParameter) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _PARSE_ERRORS as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except InvfoldError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
