"""Command-line entry point: ``redpen <group> [<action>] [options]``.

Exit status is 0 on success, 1 on a usage error and 2 on a data error.
Options may also come from a JSON file given with ``--config``; flags on the
command line win over the file, and the file wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import m2 as m2mod
from .edits import (Edit, EditError, EditStream, apply_edits, dump_jsonl, edit_from_json,
                    edit_to_json, extract_edits, load_jsonl, record_to_edits, validate_stream)
from .m2 import M2Error
from .model import ModelConfig, ModelError, RedPenNet, gradient_check
from .tokenizer import (EOS, SOS, SPECIAL_TOKENS, VocabError, Vocabulary, presoftmax_flops,
                        read_lines, train_bpe, vocab_stats)

log = logging.getLogger("redpen")

DATA_ERRORS = (VocabError, M2Error, EditError, ModelError, ValueError, KeyError, OSError,
               json.JSONDecodeError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers -------------------------------------------------------------------

def _read_text(path) -> str:
    if path in (None, "-"):
        return sys.stdin.read()
    return Path(path).read_bytes().decode("utf-8")


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_bytes(text.encode("utf-8"))


def _stream_from_record(rec: dict) -> EditStream:
    """Read a stream record; special tokens may be given by name."""
    names = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    tokens = [names.get(t, t) if isinstance(t, str) else t for t in rec["tokens"]]
    return EditStream.from_json({**rec, "tokens": tokens})


def _edits_of(rec: dict) -> list[Edit]:
    if "tokens" in rec:
        return record_to_edits({**rec, "tokens": _stream_from_record(rec).tokens})
    return record_to_edits(rec)


def _gold_of(rec: dict):
    if "annotators" in rec:
        return {int(a): [edit_from_json(e) for e in es] for a, es in rec["annotators"].items()}
    return _edits_of(rec)


def _ints(line: str) -> list[int]:
    return [int(t) for t in line.split()]


# -- vocab ---------------------------------------------------------------------

def cmd_vocab_train(args) -> int:
    corpus = [line for path in args.corpus for line in read_lines(path)]
    vocab = train_bpe(corpus, args.size, lowercase=args.lowercase)
    vocab.save(args.out)
    print(f"{len(vocab)}\t{args.out}")
    return 0


def cmd_vocab_stats(args) -> int:
    sentences = m2mod.read_m2(args.m2)
    annotator = None if args.annotator == "all" else int(args.annotator)
    corrections = [m2mod.concat_corrections(s, annotator) for s in sentences]
    vocabs = {}
    for path in args.vocab or []:
        v = Vocabulary.load(path)
        vocabs[len(v)] = v
    if args.sizes:
        corpus = corrections + [line for p in args.extra or [] for line in read_lines(p)]
        for size in args.sizes:
            vocabs[size] = train_bpe(corpus, size, lowercase=args.lowercase)
    if not vocabs:
        raise UsageError("give --vocab files or --sizes")
    stats = {size: vocab_stats(corrections, v) for size, v in vocabs.items()}
    print("vocab_size\tmean\tstd\tsentences")
    for size, st in stats.items():
        print(f"{size}\t{st.mean:.4f}\t{st.std:.4f}\t{st.count}")
    if args.plot:
        from .plotting import plot_vocab_stats
        plot_vocab_stats(stats, args.plot)
    return 0


# -- m2 ------------------------------------------------------------------------

def cmd_m2_parse(args) -> int:
    recs = []
    for s in m2mod.parse_m2(_read_text(args.m2)):
        recs.append({"source": s.source_words,
                     "annotations": [{"start": a.start_word, "end": a.end_word,
                                      "type": a.error_type, "correction": a.correction,
                                      "annotator": a.annotator_id} for a in s.annotations]})
    _write_text(args.out, dump_jsonl(recs))
    return 0


def cmd_m2_convert(args) -> int:
    enc = Vocabulary.load(args.encoder_vocab)
    dec = Vocabulary.load(args.decoder_vocab) if args.decoder_vocab else enc
    recs = []
    for i, s in enumerate(m2mod.parse_m2(_read_text(args.m2))):
        chosen = m2mod.select_annotator(s, args.annotator)
        for a in chosen if isinstance(chosen, list) else [chosen]:
            edits = m2mod.word_edits_to_subword(s, a, enc, dec)
            recs.append({"sentence": i, "annotator": a,
                         "source_ids": m2mod.encoder_ids(s.source_words, enc),
                         "edits": [edit_to_json(e) for e in edits]})
    _write_text(args.out, dump_jsonl(recs))
    return 0


def cmd_m2_concat(args) -> int:
    annotator = None if args.annotator == "all" else int(args.annotator)
    lines = [m2mod.concat_corrections(s, annotator) for s in m2mod.parse_m2(_read_text(args.m2))]
    _write_text(args.out, "".join(line + "\n" for line in lines))
    return 0


# -- edits ---------------------------------------------------------------------

def _source_tokens(line: str, ids: bool) -> list:
    return [SOS] + _ints(line) if ids else ["<sos>"] + line.split()


def cmd_edits_apply(args) -> int:
    sources = read_lines(args.source)
    recs = load_jsonl(_read_text(args.stream))
    if len(sources) != len(recs):
        raise ValueError(f"{len(sources)} source lines but {len(recs)} stream records")
    out = []
    for line, rec in zip(sources, recs):
        src = _source_tokens(line, args.ids)
        edits = _stream_from_record(rec) if "tokens" in rec else record_to_edits(rec)
        fixed = apply_edits(src, edits)[1:]
        out.append(" ".join(str(t) for t in fixed))
    _write_text(args.out, "".join(line + "\n" for line in out))
    return 0


def cmd_edits_extract(args) -> int:
    sources, targets = read_lines(args.source), read_lines(args.target)
    if len(sources) != len(targets):
        raise ValueError(f"{len(sources)} source lines but {len(targets)} target lines")
    recs = []
    for s, t in zip(sources, targets):
        src, tgt = _source_tokens(s, args.ids), _source_tokens(t, args.ids)
        recs.append({"edits": [edit_to_json(e) for e in extract_edits(src, tgt)]})
    _write_text(args.out, dump_jsonl(recs))
    return 0


def cmd_edits_validate(args) -> int:
    bad = 0
    for i, rec in enumerate(load_jsonl(_read_text(args.stream)), start=1):
        violations = validate_stream(_stream_from_record(rec))
        if violations:
            bad += 1
            for v in violations:
                print(f"record {i}\t{v}")
    print(f"{bad} invalid record(s)")
    return 2 if bad else 0


# -- model ---------------------------------------------------------------------

def _dev_eval(dev, max_steps, audit_sink=None):
    from .decode import greedy_decode_batch
    from .scoring import score

    def evaluate(model):
        results = []
        for i in range(0, len(dev), 100):
            results += greedy_decode_batch(model, [x for x, _ in dev[i:i + 100]], max_steps)
        if audit_sink is not None:
            audit_sink.extend(r for r in results if r.violations)
        s = score([r.edits for r in results], [g for _, g in dev])
        return s.P, s.R, s.F
    return evaluate


def _load_examples(path):
    out = []
    for rec in load_jsonl(_read_text(path)):
        out.append((rec["source_ids"], [edit_from_json(e) for e in rec.get("edits", [])]))
    return out


def cmd_model_train(args) -> int:
    from .train import StageConfig, load_stages, make_targets, toy_pairs, train_loop

    pools, dev = {}, []
    if args.toy:
        train = toy_pairs(args.train_size, seed=1000 + args.seed)
        pools["synthetic"] = [make_targets(b, g) for b, _, g in train]
        dev = [(b, g) for b, _, g in toy_pairs(args.dev_size, seed=2000 + args.seed)]
        enc_vocab = dec_vocab = 46
    else:
        if not args.data:
            raise UsageError("give --toy or at least one --data NAME=FILE")
        for spec in args.data:
            name, _, path = spec.partition("=")
            if not path:
                raise UsageError(f"--data expects NAME=FILE, got {spec!r}")
            pools[name] = [make_targets(x, g) for x, g in _load_examples(path)]
        if args.dev:
            dev = _load_examples(args.dev)
        if not (args.encoder_vocab and args.decoder_vocab):
            raise UsageError("--encoder-vocab and --decoder-vocab are required with --data")
        enc_vocab = len(Vocabulary.load(args.encoder_vocab))
        dec_vocab = len(Vocabulary.load(args.decoder_vocab))
    cfg = ModelConfig(enc_vocab=enc_vocab, dec_vocab=dec_vocab, d_model=args.dim,
                      enc_layers=args.enc_layers, dec_layers=args.dec_layers, heads=args.heads,
                      max_src_len=args.max_src_len, max_tgt_len=args.max_tgt_len,
                      dropout=args.dropout, span_feedback=args.span_feedback, seed=args.seed)
    if args.stages:
        stages = load_stages(args.stages)
    else:
        mix = {name: 1.0 / len(pools) for name in pools}
        stages = [StageConfig(name="train", data_mix=mix, epochs=args.epochs,
                              batch_size=args.batch_size, learning_rate=args.lr,
                              seed=args.seed, max_steps=args.max_steps,
                              freeze_encoder=args.freeze_encoder)]
    audit = [] if args.audit else None
    dev_eval = _dev_eval(dev, args.decode_steps, audit) if dev else None
    model, rows = train_loop(cfg, stages, pools, dev_eval=dev_eval, metrics_path=args.metrics,
                             checkpoint_path=args.out)
    if args.out and dev_eval is None:
        model.save(args.out)
    if audit is not None:
        _write_text(args.audit, dump_jsonl(r.to_json() for r in audit))
    if args.plot:
        from .plotting import plot_training
        plot_training(rows, args.plot)
    print("epoch\tstage\tloss\ttok_acc\tspan_acc\tdev_F05")
    for r in rows:
        f = r["dev_F05"]
        print(f"{r['epoch']}\t{r['stage']}\t{r['loss']:.4f}\t{r['tok_acc']:.4f}\t"
              f"{r['span_acc']:.4f}\t{f if f == '' else f'{f:.4f}'}")
    return 0


def cmd_model_gradcheck(args) -> int:
    import torch

    from .train import collate, make_targets

    torch.manual_seed(args.seed)
    cfg = ModelConfig(enc_vocab=12, dec_vocab=12, d_model=args.dim, heads=args.heads,
                      enc_layers=args.layers, dec_layers=args.layers, max_src_len=12,
                      max_tgt_len=12, dropout=0.0, seed=args.seed)
    model = RedPenNet(cfg)
    pairs = [([SOS, 6, 7, 8, EOS], [Edit(2, 3, (9,))]),
             ([SOS, 7, 9, EOS], [Edit(1, 1, (6,)), Edit(2, 3, ())]),
             ([SOS, 6, 10, 11, 8, EOS], [])]
    batch = collate([make_targets(x, g) for x, g in pairs])
    err = gradient_check(model, batch, epsilon=args.epsilon, samples=args.samples, seed=args.seed)
    print(f"max_rel_error\t{err:.3e}")
    return 0 if err < args.tol else 2


# -- correct / ensemble / eval -------------------------------------------------

def cmd_correct(args) -> int:
    from .decode import correct, correct_ids

    models = [RedPenNet.load(p) for p in args.params]
    lines = read_lines(args.input) if args.input not in (None, "-") else \
        _read_text("-").splitlines()
    if args.ids:
        enc = dec = None
    else:
        if not args.encoder_vocab:
            raise UsageError("--encoder-vocab is required unless --ids is given")
        enc = Vocabulary.load(args.encoder_vocab)
        dec = Vocabulary.load(args.decoder_vocab) if args.decoder_vocab else enc

    def run(line):
        audit = []
        if args.ids:
            ids = correct_ids(models, [SOS] + _ints(line) + [EOS], args.thresholds,
                              args.max_steps, audit)
            return " ".join(str(t) for t in ids[1:-1]), audit
        return correct(models, line, args.thresholds, enc, dec, args.max_steps, audit), audit

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(run, lines))
    _write_text(args.out, "".join(text + "\n" for text, _ in results))
    if args.audit:
        recs = [{"line": i, **rec} for i, (_, audit) in enumerate(results) for rec in audit]
        _write_text(args.audit, dump_jsonl(recs))
    return 0


def cmd_ensemble_merge(args) -> int:
    from .ensemble import merge

    per_model = [[_edits_of(r) for r in load_jsonl(_read_text(p))] for p in args.inputs]
    n = {len(x) for x in per_model}
    if len(n) != 1:
        raise ValueError(f"inputs disagree on sentence count: {sorted(n)}")
    recs = [{"edits": [edit_to_json(e) for e in merge([m[i] for m in per_model], args.mode)]}
            for i in range(n.pop())]
    _write_text(args.out, dump_jsonl(recs))
    return 0


def _load_gold(args):
    if args.m2:
        enc = Vocabulary.load(args.encoder_vocab)
        dec = Vocabulary.load(args.decoder_vocab) if args.decoder_vocab else enc
        from .scoring import gold_from_m2
        return gold_from_m2(m2mod.read_m2(args.m2), enc, dec)
    if not args.gold:
        raise UsageError("give --gold FILE.jsonl or --m2 with vocabularies")
    return [_gold_of(r) for r in load_jsonl(_read_text(args.gold))]


def cmd_ensemble_tune(args) -> int:
    from .ensemble import tune_threshold

    hyp = [_edits_of(r) for r in load_jsonl(_read_text(args.hyp))]
    best, f, rows = tune_threshold(hyp, _load_gold(args), grid_step=args.step, beta=args.beta,
                                   csv_path=args.csv)
    if args.plot:
        from .plotting import plot_threshold_sweep
        plot_threshold_sweep(rows, best, args.plot)
    print(f"threshold\t{best:g}\nF{args.beta:g}\t{f:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .scoring import score

    hyp = [_edits_of(r) for r in load_jsonl(_read_text(args.hyp))]
    s = score(hyp, _load_gold(args), beta=args.beta)
    if args.report:
        _write_text(args.report, s.to_json() + "\n")
    print(s.summary())
    return 0


def cmd_flops(args) -> int:
    print(presoftmax_flops(args.dim, args.vocab))
    return 0


# -- parser --------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def _gold_options(p):
    p.add_argument("--hyp", required=True, help="JSONL of edit lists or streams")
    p.add_argument("--gold", help="JSONL of gold edits")
    p.add_argument("--m2", help="gold as m2, converted with the vocabularies")
    p.add_argument("--encoder-vocab")
    p.add_argument("--decoder-vocab")
    p.add_argument("--beta", type=float, default=0.5)


def build_parser() -> Parser:
    parser = Parser(prog="redpen", description="Edit-stream grammatical error correction.")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=Parser)
    parser.leaves = []

    def leaf(sub, name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.set_defaults(func=func, _leaf=p)
        parser.leaves.append(p)
        return p

    # vocab
    vocab = groups.add_parser("vocab", help="train or inspect BPE vocabularies")
    vsub = vocab.add_subparsers(dest="action", required=True, parser_class=Parser)
    p = leaf(vsub, "train", cmd_vocab_train, "train a vocabulary")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--out", required=True)
    p = leaf(vsub, "stats", cmd_vocab_stats, "tokens-per-correction statistics")
    p.add_argument("--m2", required=True)
    p.add_argument("--vocab", nargs="+")
    p.add_argument("--sizes", nargs="+", type=int)
    p.add_argument("--extra", nargs="+", help="extra training lines, e.g. a frequent-word list")
    p.add_argument("--annotator", default="all")
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--plot", help="histogram image path")

    # m2
    m2p = groups.add_parser("m2", help="m2 annotation files")
    msub = m2p.add_subparsers(dest="action", required=True, parser_class=Parser)
    p = leaf(msub, "parse", cmd_m2_parse, "m2 to JSONL")
    p.add_argument("--m2", default="-")
    p.add_argument("--out", default="-")
    p = leaf(msub, "convert", cmd_m2_convert, "m2 to subword training records")
    p.add_argument("--m2", default="-")
    p.add_argument("--encoder-vocab", required=True)
    p.add_argument("--decoder-vocab")
    p.add_argument("--annotator", choices=("first", "all"), default="first")
    p.add_argument("--out", default="-")
    p = leaf(msub, "concat", cmd_m2_concat, "space-joined corrections per sentence")
    p.add_argument("--m2", default="-")
    p.add_argument("--annotator", default="all")
    p.add_argument("--out", default="-")

    # edits
    edits = groups.add_parser("edits", help="edit streams")
    esub = edits.add_subparsers(dest="action", required=True, parser_class=Parser)
    p = leaf(esub, "apply", cmd_edits_apply, "apply streams or edit lists to sources")
    p.add_argument("--source", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--ids", action="store_true", help="lines hold integer ids")
    p.add_argument("--out", default="-")
    p = leaf(esub, "extract", cmd_edits_extract, "minimal edits from source to target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--ids", action="store_true")
    p.add_argument("--out", default="-")
    p = leaf(esub, "validate", cmd_edits_validate, "check streams for rule violations")
    p.add_argument("--stream", default="-")

    # model
    model = groups.add_parser("model", help="train or check models")
    osub = model.add_subparsers(dest="action", required=True, parser_class=Parser)
    p = leaf(osub, "train", cmd_model_train, "staged training")
    p.add_argument("--toy", action="store_true", help="use the synthetic toy language")
    p.add_argument("--train-size", type=int, default=5000)
    p.add_argument("--dev-size", type=int, default=500)
    p.add_argument("--data", nargs="+", help="NAME=FILE.jsonl pools from `m2 convert`")
    p.add_argument("--dev", help="dev records from `m2 convert`")
    p.add_argument("--encoder-vocab")
    p.add_argument("--decoder-vocab")
    p.add_argument("--stages", help="JSON list of stage configs")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--enc-layers", type=int, default=2)
    p.add_argument("--dec-layers", type=int, default=2)
    p.add_argument("--max-src-len", type=int, default=64)
    p.add_argument("--max-tgt-len", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--span-feedback", choices=("embedding", "contextual"), default="embedding")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--decode-steps", type=int, default=None)
    p.add_argument("--out", help="parameter file")
    p.add_argument("--metrics", help="per-epoch CSV")
    p.add_argument("--audit", help="JSONL of dev decodes with violations")
    p.add_argument("--plot", help="training-curve image path")
    p = leaf(osub, "gradcheck", cmd_model_gradcheck, "finite-difference gradient check")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)

    # correct
    p = leaf(groups, "correct", cmd_correct, "iterative correction of text lines")
    p.add_argument("--params", nargs="+", required=True, help="one file, or several to ensemble")
    p.add_argument("--encoder-vocab")
    p.add_argument("--decoder-vocab")
    p.add_argument("--input", default="-")
    p.add_argument("--ids", action="store_true", help="lines hold integer ids")
    p.add_argument("--thresholds", nargs="+", type=float, default=[0.585, 0.59])
    p.add_argument("--max-steps", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--audit", help="JSONL of per-round decode results")
    p.add_argument("--out", default="-")

    # ensemble
    ens = groups.add_parser("ensemble", help="merge model outputs, tune thresholds")
    nsub = ens.add_subparsers(dest="action", required=True, parser_class=Parser)
    p = leaf(nsub, "merge", cmd_ensemble_merge, "merge per-model edit lists")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--mode", choices=("sum", "mean"), default="sum")
    p.add_argument("--out", default="-")
    p = leaf(nsub, "tune", cmd_ensemble_tune, "grid-search the minimum edit probability")
    _gold_options(p)
    p.add_argument("--step", type=float, default=0.005)
    p.add_argument("--csv", help="threshold,P,R,F0.5 table")
    p.add_argument("--plot", help="sweep image path")

    # eval
    p = leaf(groups, "eval", cmd_eval, "precision/recall/F-beta against gold")
    _gold_options(p)
    p.add_argument("--report", help="JSON report path")

    # flops
    p = leaf(groups, "flops", cmd_flops, "pre-softmax projection cost per step")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--vocab", type=int, required=True)
    return parser


def _config_from_argv(argv) -> dict:
    """Read the ``--config`` JSON file named in ``argv``, if any."""
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    if path is None:
        return {}
    conf = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(conf, dict):
        raise ValueError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in conf.items()}


def _apply_config(parser: Parser, conf: dict) -> None:
    # config values become defaults, so explicit flags still win
    for leaf in parser.leaves:
        for action in leaf._actions:
            if action.dest in conf:
                action.default = conf[action.dest]
                action.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        conf = _config_from_argv(argv)
    except DATA_ERRORS as e:
        print(f"redpen: cannot read config: {e}", file=sys.stderr)
        return 2
    _apply_config(parser, conf)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        unknown = sorted(set(conf) - {a.dest for a in args._leaf._actions})
        if unknown:
            raise UsageError(f"unknown config key(s) {', '.join(unknown)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as e:
        args._leaf.print_usage(sys.stderr)
        print(f"redpen: error: {e}", file=sys.stderr)
        return 1
    except DATA_ERRORS as e:
        print(f"redpen: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
