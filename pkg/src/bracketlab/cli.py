"""Command-line entry point. Every subcommand is a thin wrapper over the library.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import BracketLabError, ConfigurationError, ValidationError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bracketlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"bracketlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("langgen", help="synthetic language generation and checks")
    lg = p.add_subparsers(dest="subcommand", required=True)
    g = lg.add_parser("gen", help="generate a corpus file")
    g.add_argument("--kind", required=True, choices=["nested", "flat", "flat_shuffle"])
    g.add_argument("--n", type=int, required=True, help="number of sequences")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n-types", type=int, default=250)
    g.add_argument("--seq-len", type=int, default=512)
    g.add_argument("--p-open", type=float, default=0.4)
    g.add_argument("--block-types", type=int, default=8)
    g.add_argument("--segment-len", type=int, default=16)
    v = lg.add_parser("validate", help="validate every sequence in a corpus file")
    v.add_argument("--in", dest="path", required=True)
    f = lg.add_parser("floor", help="mean exact NLL floor of a corpus file")
    f.add_argument("--in", dest="path", required=True)
    f.add_argument("--limit", type=int, default=None, help="only the first N sequences")

    p = sub.add_parser("corpus", help="natural-text ingestion")
    cp = p.add_subparsers(dest="subcommand", required=True)
    b = cp.add_parser("build-vocab")
    b.add_argument("--text", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--max-vocab", type=int, default=500)
    e = cp.add_parser("encode")
    e.add_argument("--text", required=True)
    e.add_argument("--vocab", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seq-len", type=int, default=128)
    ft = cp.add_parser("features")
    ft.add_argument("--corpus", required=True)
    ft.add_argument("--vocab", required=True)
    ft.add_argument("--out", required=True)
    ft.add_argument("--merge", default=None, help="token<TAB>feature<TAB>0|1 file")
    ft.add_argument("--min-count", type=int, default=200)

    p = sub.add_parser("train", help="pre-training and staged fine-tuning")
    tr = p.add_subparsers(dest="subcommand", required=True)
    pt = tr.add_parser("pretrain")
    pt.add_argument("--corpus", required=True)
    pt.add_argument("--config", default=None, help="JSON with model/pretrain settings")
    pt.add_argument("--out", required=True)
    pt.add_argument("--seed", type=int, default=0)
    fi = tr.add_parser("finetune")
    fi.add_argument("--from", dest="source", required=True, help="source checkpoint dir")
    fi.add_argument("--target", required=True, help="target corpus file")
    fi.add_argument("--stages", default=None, help="JSON list of stage configs")
    fi.add_argument("--out-dir", required=True)
    fi.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("transfer", help="transfer difficulty matrix")
    tm = p.add_subparsers(dest="subcommand", required=True)
    m = tm.add_parser("matrix")
    m.add_argument("--langs", required=True,
                   help="JSON file: [{name, corpus, checkpoint}], checkpoint optional")
    m.add_argument("--modes", default="E,EL,ELT")
    m.add_argument("--out", required=True)
    m.add_argument("--threshold", type=float, default=0.2)
    m.add_argument("--seeds", default="0", help="comma-separated seed sweep")
    m.add_argument("--stage-steps", type=int, default=12500)

    p = sub.add_parser("embedx", help="embedding analytics")
    em = p.add_subparsers(dest="subcommand", required=True)
    s = em.add_parser("spectrum")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--which", default="input", choices=["input", "output"])
    s.add_argument("--png", default=None, help="also render a plot image")
    c = em.add_parser("clusters")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--k-values", default="1,2,4,8,16,32,64")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--which", default="input", choices=["input", "output"])
    c.add_argument("--png", default=None, help="also render a plot image")

    p = sub.add_parser("probes", help="linear probes on embeddings")
    pr = p.add_subparsers(dest="subcommand", required=True)
    r = pr.add_parser("run")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--features", required=True, help="feature table TSV")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--which", default="input", choices=["input", "output"])

    p = sub.add_parser("cloze", help="cloze benchmark evaluation")
    cl = p.add_subparsers(dest="subcommand", required=True)
    ev = cl.add_parser("eval")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--vocab", required=True)
    ev.add_argument("--questions", default="sample")
    ev.add_argument("--out", required=True)
    ev.add_argument("--mode", default="full", choices=["full", "answer_only"])

    p = sub.add_parser("run", help="run a declarative experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run-dir", required=True)

    return parser


def _cmd_langgen(args) -> int:
    from . import languages

    if args.subcommand == "gen":
        spec = languages.LanguageSpec(
            kind=args.kind, n_types=args.n_types, seq_len=args.seq_len,
            p_open=args.p_open, block_types=args.block_types, segment_len=args.segment_len,
        )
        path = languages.generate_corpus(spec, args.n, args.seed, args.out)
        print(f"wrote {args.n} sequences to {path}")
    elif args.subcommand == "validate":
        corpus = languages.load_corpus(args.path)
        spec = languages.spec_from_header(corpus.header)
        failures = 0
        for i, row in enumerate(corpus.tokens):
            rep = languages.validate(spec, row)
            if not rep.passes(spec.kind):
                failures += 1
                print(f"sequence {i}: FAIL ({rep.detail})")
        print(f"{corpus.n_sequences - failures}/{corpus.n_sequences} sequences valid")
        if failures:
            raise ValidationError(f"{failures} sequences failed validation")
    else:
        corpus = languages.load_corpus(args.path)
        floor = languages.corpus_nll_floor(corpus, limit=args.limit)
        print(f"mean NLL floor: {floor:.6f} nats/token")
    return 0


def _cmd_corpus(args) -> int:
    from . import textcorpus

    if args.subcommand == "build-vocab":
        text = Path(args.text).read_text(encoding="utf-8")
        vocab = textcorpus.build_vocab(text, max_vocab=args.max_vocab)
        vocab.save(args.out)
        print(f"wrote vocab of {len(vocab)} tokens to {args.out}")
    elif args.subcommand == "encode":
        text = Path(args.text).read_text(encoding="utf-8")
        vocab = textcorpus.Vocab.load(args.vocab)
        corpus = textcorpus.encode_corpus(text, vocab, seq_len=args.seq_len, out=args.out)
        unk = float((corpus.tokens == vocab.unk_id).mean())
        print(f"wrote {corpus.n_sequences} sequences to {args.out} "
              f"(unknown-token rate {unk:.2%})")
    else:
        from .corpusfile import read_corpus

        vocab = textcorpus.Vocab.load(args.vocab)
        corpus = read_corpus(args.corpus)
        table = textcorpus.extract_features(corpus, vocab, min_count=args.min_count)
        if args.merge:
            textcorpus.merge_features(table, args.merge, min_count=args.min_count)
        textcorpus.save_features(table, args.out)
        for warning in table.warnings:
            print(f"warning: {warning}", file=sys.stderr)
        print(f"wrote features for {len(table.tokens)} tokens to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from dataclasses import asdict

    from . import training
    from .corpusfile import read_corpus
    from .manifest import RunManifest, StageTimer, sha256_file
    from .model import PRESETS, init_model, load_checkpoint, save_checkpoint

    if args.subcommand == "pretrain":
        corpus = read_corpus(args.corpus)
        settings = {}
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                settings = json.load(fh)
        model_cfg = dict(settings.get("model") or {"preset": "desk"})
        preset = model_cfg.pop("preset", "desk")
        model_cfg.setdefault("max_seq_len", corpus.seq_len)
        model = init_model(
            PRESETS[preset](vocab_size=corpus.vocab_size, **model_cfg), args.seed
        )
        config = training.PretrainConfig(**(settings.get("pretrain") or {}))
        manifest = RunManifest(
            config={"command": "train pretrain", "seed": args.seed, "settings": settings},
            input_hashes={"corpus": sha256_file(args.corpus)},
        )
        with StageTimer(manifest, "pretrain"):
            _, report = training.pretrain(model, corpus, config, seed=args.seed)
        out = Path(args.out)
        save_checkpoint(model, out)
        manifest.status = "complete"
        manifest.record_output(out, out)
        manifest.save(out)
        print(f"pretrained {report.steps_run} steps; eval NLL {report.final_eval_nll:.4f} "
              f"nats/token; checkpoint at {args.out}")
    else:
        corpus = read_corpus(args.target)
        model = load_checkpoint(args.source)
        stages = None
        if args.stages:
            with open(args.stages, encoding="utf-8") as fh:
                stages = [training.StageConfig(**e) for e in json.load(fh)]
        manifest = RunManifest(
            config={
                "command": "train finetune",
                "seed": args.seed,
                "stages": None if stages is None
                else [{**asdict(s), "mode": s.mode.value} for s in stages],
            },
            input_hashes={
                "target": sha256_file(args.target),
                "source": sha256_file(Path(args.source) / "weights.bin"),
            },
        )
        out_dir = Path(args.out_dir)
        with StageTimer(manifest, "finetune"):
            _, results = training.finetune_pipeline(
                model, corpus, stages=stages, seed=args.seed, out_dir=out_dir
            )
        manifest.status = "complete"
        for res in results:
            manifest.record_output(out_dir, Path(res.checkpoint_dir))
        manifest.save(out_dir)
        for res in results:
            print(f"stage {res.stage.mode.value}: eval NLL {res.report.final_eval_nll:.4f} "
                  f"-> {res.checkpoint_dir}")
    return 0


def _cmd_transfer(args) -> int:
    from . import transfer
    from .training import stages_up_to

    with open(args.langs, encoding="utf-8") as fh:
        entries = [transfer.LanguageEntry(**e) for e in json.load(fh)]
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    report = transfer.transfer_matrix(
        entries,
        modes,
        stages_for_mode=lambda m: stages_up_to(m, steps=args.stage_steps),
        seeds=seeds,
        close_threshold=args.threshold,
    )
    report.save(args.out)
    print(report.render_text())
    return 0


def _cmd_embedx(args) -> int:
    from . import embedding_analysis as ea

    E = ea.extract_embeddings(args.ckpt, which=args.which)
    if args.subcommand == "spectrum":
        report = ea.spectrum(E, matrix_label=args.which)
        ea.save_spectrum_csv(report, args.out)
        if args.png:
            ea.compare_models({args.which: args.ckpt}, analysis="spectrum",
                              which=args.which, out_png=args.png)
        print(f"wrote {len(report.singular_values)} singular values to {args.out}")
    else:
        k_values = [int(k) for k in args.k_values.split(",") if k.strip()]
        curve = ea.cluster_curve(E, k_values, seed=args.seed)
        ea.save_cluster_csv(curve, args.out)
        if args.png:
            ea.compare_models({args.which: args.ckpt}, analysis="clusters",
                              which=args.which, k_values=k_values, seed=args.seed,
                              out_png=args.png)
        print(f"wrote cluster curve ({len(k_values)} k values) to {args.out}")
    return 0


def _cmd_probes(args) -> int:
    from . import probes
    from .embedding_analysis import extract_embeddings
    from .textcorpus import load_features

    table = load_features(args.features)
    embeddings = extract_embeddings(args.ckpt, which=args.which)
    results = probes.probe_suite(embeddings, table, seed=args.seed)
    probes.save_results_csv(results, args.out)
    print(probes.render_results(results))
    return 0


def _cmd_cloze(args) -> int:
    from . import cloze
    from .model import load_checkpoint
    from .textcorpus import Vocab

    model = load_checkpoint(args.ckpt)
    vocab = Vocab.load(args.vocab)
    questions = (
        cloze.load_sample_questions()
        if args.questions == "sample"
        else cloze.load_questions(args.questions)
    )
    report = cloze.evaluate(model, vocab, questions, mode=args.mode)
    report.save(args.out)
    print(report.render_text())
    return 0


def _cmd_run(args) -> int:
    from . import experiment

    config = experiment.load_config(args.config)
    manifest = experiment.run_experiment(config, args.out)
    print(f"run {manifest.status}; manifest at {Path(args.out) / 'run_manifest.json'}")
    return 0


def _cmd_report(args) -> int:
    from . import experiment

    print(experiment.report(args.run_dir))
    return 0


_DISPATCH = {
    "langgen": _cmd_langgen,
    "corpus": _cmd_corpus,
    "train": _cmd_train,
    "transfer": _cmd_transfer,
    "embedx": _cmd_embedx,
    "probes": _cmd_probes,
    "cloze": _cmd_cloze,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except (ConfigurationError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BracketLabError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
