"""Command-line front end: one JSON config file, reproducible seeds, and
subcommands covering the whole pipeline.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import load_config
from .corpus import Manifest, partition_report
from .ctc import NBestList
from .decoder import Hypothesis, Lexicon, parse_weight_ratio
from .params import ParameterStore
from .rescore import rescore, score_nbest_with_ssl

logger = logging.getLogger("sslasr")


def _add_common(p):
    p.add_argument("--config", help="global JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="utterance-level parallelism")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sslasr",
        description="Self-supervised representations integrated into hybrid ASR: "
        "feature fusion, frame-level joint decoding, and N-best rescoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    _add_common(p)
    p.add_argument("--out", required=True, help="corpus output directory")

    p = sub.add_parser("pretrain", help="contrastive + diversity pretraining")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="parameter store output (.spm)")

    p = sub.add_parser("finetune", help="CTC fine-tuning with the bottleneck adapter")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--init", required=True, help="pretrained parameter store")
    p.add_argument("--out", required=True, help="fine-tuned parameter store")
    p.add_argument("--adapter-out", help="adapter parameter store")

    p = sub.add_parser("extract-bn", help="write bottleneck features per utterance")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("invert", help="train the articulatory inversion model and "
                                      "write predicted trajectories per utterance")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--mdn-out", required=True, help="inversion parameter store")
    p.add_argument("--out-dir", required=True, help="articulatory feature directory")

    p = sub.add_parser("train-am", help="train a frame acoustic model")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", default="fbk",
                   help="stream spec: fbk | fbk+w2v-bn | fbk+w2v-bn+artic")
    p.add_argument("--model", help="fine-tuned encoder store (for w2v-bn/artic)")
    p.add_argument("--adapter", help="adapter store (for w2v-bn/artic)")
    p.add_argument("--mdn", help="inversion store (for artic)")
    p.add_argument("--bn-dir", help="read extracted bottleneck features instead")
    p.add_argument("--artic-dir", help="read extracted articulatory features instead")
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="single-system decoding")
    _add_common(p)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--streams", help="posterior file or directory (one system)")
    p.add_argument("--corpus", help="decode a corpus test split with --am")
    p.add_argument("--am", help="acoustic model store")
    p.add_argument("--features", default="fbk", help="stream spec for --am")
    p.add_argument("--model", help="encoder store (for w2v-bn features or SSL decode)")
    p.add_argument("--adapter")
    p.add_argument("--mdn")
    p.add_argument("--bn-dir")
    p.add_argument("--artic-dir")
    p.add_argument("--save-streams", help="dump per-utterance posterior files here")
    p.add_argument("--nbest", type=int, help="also write n-best lists of this depth")
    p.add_argument("--nbest-out", help="n-best JSON-lines output path")
    p.add_argument("--out", help="hypotheses JSON-lines output (default stdout)")

    p = sub.add_parser("joint-decode", help="frame-level joint decoding of 2-3 systems")
    _add_common(p)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--streams", required=True,
                   help="comma-separated posterior files or directories")
    p.add_argument("--weights", required=True, help='ratio syntax, e.g. "3:2" or "9:1:5"')
    p.add_argument("--nbest", type=int)
    p.add_argument("--nbest-out")
    p.add_argument("--out")

    p = sub.add_parser("rescore", help="second-pass rescoring of n-best lists")
    _add_common(p)
    p.add_argument("--nbest", required=True, help="n-best JSON-lines file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="fine-tuned encoder store")
    p.add_argument("--adapter")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--weights", help='ratio syntax "alpha:beta", e.g. "2:9"')
    p.add_argument("--out")

    p = sub.add_parser("score", help="WER with seen/unseen and condition partitions")
    _add_common(p)
    p.add_argument("--hyp", required=True, help="hypotheses JSON-lines")
    p.add_argument("--manifest", help="manifest path (default: corpus manifest)")
    p.add_argument("--corpus")
    p.add_argument("--out", help="JSON report output (default stdout)")

    return parser


def _config(args, extra=None):
    overrides = dict(extra or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _emit_lines(lines, out):
    text = "\n".join(lines) + ("\n" if lines else "")
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_stream_sources(spec):
    """Each comma-separated item is a posterior file (single utterance,
    utt id = file stem) or a directory of them."""
    sources = []
    for item in spec.split(","):
        path = Path(item)
        if path.is_dir():
            files = sorted(path.glob("*.post")) + sorted(path.glob("*.sff"))
            if not files:
                raise FileNotFoundError(f"no posterior files under {path}")
            sources.append({f.stem: f for f in files})
        elif path.exists():
            sources.append({path.stem: path})
        else:
            raise FileNotFoundError(f"stream source {path} does not exist")
    common = set(sources[0])
    for s in sources[1:]:
        common &= set(s)
    if not common:
        raise ValueError("stream sources share no utterance ids")
    return sources, sorted(common)


def _hyp_lines(hyps):
    return [json.dumps(h.to_json_dict()) for h in hyps]


def cmd_gen_corpus(args):
    cfg = _config(args)
    manifest, _ = pipeline.generate_corpus(args.out, cfg)
    print(f"wrote {len(manifest)} utterances to {args.out}")


def cmd_pretrain(args):
    cfg = _config(args)
    corpus = pipeline.Corpus(args.corpus)
    model, history = pipeline.pretrain_encoder(corpus, cfg)
    pipeline.save_encoder(model, args.out)
    print(f"pretrained {len(history)} epochs; combined loss "
          f"{history[0]['combined']:.4f} -> {history[-1]['combined']:.4f}"
          if history else "pretrained 0 epochs")


def cmd_finetune(args):
    cfg = _config(args)
    corpus = pipeline.Corpus(args.corpus)
    model = pipeline.load_encoder(cfg, args.init)
    adapter, histories = pipeline.finetune_encoder(corpus, model, cfg)
    pipeline.save_encoder(model, args.out)
    if adapter is not None and args.adapter_out:
        pipeline.save_adapter(adapter, args.adapter_out)
    last = histories[-1][-1]["ctc_loss"] if histories and histories[-1] else float("nan")
    print(f"fine-tuned; final CTC loss {last:.4f}")


def cmd_extract_bn(args):
    cfg = _config(args)
    corpus = pipeline.Corpus(args.corpus)
    model = pipeline.load_encoder(cfg, args.model)
    adapter = pipeline.load_adapter(cfg, model.cfg.d_model, args.adapter)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .features import write_features

    for record in corpus.manifest:
        feats = pipeline.bottleneck_features(corpus, record, model, adapter)
        write_features(feats, out_dir / f"{record.utt_id}.sff")
    print(f"wrote {len(corpus.manifest)} bottleneck feature files to {out_dir}")


def cmd_invert(args):
    cfg = _config(args)
    corpus = pipeline.Corpus(args.corpus)
    model = pipeline.load_encoder(cfg, args.model)
    adapter = pipeline.load_adapter(cfg, model.cfg.d_model, args.adapter)
    mdn_model, history = pipeline.train_inversion_model(corpus, model, adapter, cfg)
    pipeline.save_mdn(mdn_model, args.mdn_out)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .features import write_features

    for record in corpus.manifest:
        feats = pipeline.articulatory_features(corpus, record, model, adapter, mdn_model)
        write_features(feats, out_dir / f"{record.utt_id}.sff")
    print(f"inversion NLL {history[0]['nll']:.4f} -> {history[-1]['nll']:.4f}; "
          f"wrote {len(corpus.manifest)} trajectory files")


def _feature_fn_from_args(args, cfg, corpus):
    model = adapter = mdn_model = None
    if args.model:
        model = pipeline.load_encoder(cfg, args.model)
    if args.adapter:
        if model is None:
            raise ValueError("--adapter needs --model")
        adapter = pipeline.load_adapter(cfg, model.cfg.d_model, args.adapter)
    if getattr(args, "mdn", None):
        mdn_model = pipeline.load_mdn(cfg, args.mdn)
    return pipeline.build_feature_fn(
        corpus, args.features, model=model, adapter=adapter, mdn_model=mdn_model,
        bn_dir=args.bn_dir, artic_dir=args.artic_dir,
    ), model, adapter


def cmd_train_am(args):
    cfg = _config(args)
    corpus = pipeline.Corpus(args.corpus)
    feature_fn, model, adapter = _feature_fn_from_args(args, cfg, corpus)
    am, history = pipeline.train_frame_am(corpus, feature_fn, cfg,
                                          model=model, adapter=adapter)
    ParameterStore.from_module(am).save(args.out)
    meta = {"features": args.features, "d_feat": am.d_feat, "n_classes": am.n_classes}
    Path(args.out).with_suffix(".json").write_text(json.dumps(meta))
    print(f"trained AM on {args.features}; cross-entropy "
          f"{history[0]['cross_entropy']:.4f} -> {history[-1]['cross_entropy']:.4f}")


def _load_am(cfg, path):
    from .frame_am import FrameAm

    meta = json.loads(Path(path).with_suffix(".json").read_text())
    am = FrameAm(pipeline.am_config(cfg), meta["d_feat"], meta["n_classes"], seed=0)
    ParameterStore.load(path).load_into(am)
    return am


def cmd_decode(args):
    cfg = _config(args)
    lexicon = Lexicon.load(args.lexicon)
    vocab = lexicon.vocab()
    tasks = []
    nbest_lines = []
    if args.streams:
        sources, utts = _load_stream_sources(args.streams)
        streams = {u: pipeline.read_stream(sources[0][u]) for u in utts}
    elif args.corpus and args.am:
        corpus = pipeline.Corpus(args.corpus)
        feature_fn, model, adapter = _feature_fn_from_args(args, cfg, corpus)
        am = _load_am(cfg, args.am)
        streams = {}
        for record in sorted(corpus.manifest.subset("test-seen", "test-unseen"),
                             key=lambda r: r.utt_id):
            streams[record.utt_id] = am.posteriors(feature_fn(record), source="am")
    else:
        raise ValueError("decode needs either --streams or --corpus with --am")
    if args.save_streams:
        out = Path(args.save_streams)
        out.mkdir(parents=True, exist_ok=True)
        for utt_id, stream in streams.items():
            pipeline.write_stream(stream, out / f"{utt_id}.post")
    tasks = [(u, [s], None, lexicon, vocab) for u, s in streams.items()]
    hyps = pipeline.decode_utterances(tasks, jobs=args.jobs)
    if args.nbest:
        from .decoder import isolated_nbest

        for utt_id in sorted(streams):
            nb = isolated_nbest(streams[utt_id], lexicon, vocab, args.nbest,
                                utt_id=utt_id, system=streams[utt_id].source or "am")
            nbest_lines.append(nb.to_json())
        if args.nbest_out:
            _emit_lines(nbest_lines, args.nbest_out)
    _emit_lines(_hyp_lines(hyps), args.out)


def cmd_joint_decode(args):
    cfg = _config(args)
    lexicon = Lexicon.load(args.lexicon)
    vocab = lexicon.vocab()
    weights = parse_weight_ratio(args.weights)
    sources, utts = _load_stream_sources(args.streams)
    if len(sources) != weights.size:
        raise ValueError(f"{len(sources)} stream sources but {weights.size} weights")
    tasks = []
    per_utt_streams = {}
    for u in utts:
        streams = [pipeline.read_stream(src[u]) for src in sources]
        per_utt_streams[u] = streams
        tasks.append((u, streams, weights, lexicon, vocab))
    hyps = pipeline.decode_utterances(tasks, jobs=args.jobs)
    if args.nbest:
        from .decoder import interpolate_posteriors, isolated_nbest

        nbest_lines = []
        for u in utts:
            mixed = interpolate_posteriors(per_utt_streams[u], weights)
            nb = isolated_nbest(mixed, lexicon, vocab, args.nbest, utt_id=u,
                                system="tdnn")
            nbest_lines.append(nb.to_json())
        if args.nbest_out:
            _emit_lines(nbest_lines, args.nbest_out)
    _emit_lines(_hyp_lines(hyps), args.out)


def cmd_rescore(args):
    cfg = _config(args)
    if args.weights:
        ratio = parse_weight_ratio(args.weights)
        if ratio.size != 2:
            raise ValueError("rescore weights must be a 2-way ratio alpha:beta")
        alpha, beta = float(ratio[0]), float(ratio[1])
    else:
        alpha = cfg["rescore"]["alpha"] if args.alpha is None else args.alpha
        beta = cfg["rescore"]["beta"] if args.beta is None else args.beta
    corpus = pipeline.Corpus(args.corpus)
    model = pipeline.load_encoder(cfg, args.model)
    adapter = None
    if args.adapter:
        adapter = pipeline.load_adapter(cfg, model.cfg.d_model, args.adapter)
    by_id = corpus.manifest.by_id()
    lines = []
    with open(args.nbest) as fh:
        nbests = [NBestList.from_json(line) for line in fh if line.strip()]
    for nbest in nbests:
        record = by_id.get(nbest.utt_id)
        if record is None:
            raise KeyError(f"utterance {nbest.utt_id!r} not in the corpus manifest")
        ssl_stream = model.frame_posteriors(corpus.audio(record), adapter=adapter)
        scored = score_nbest_with_ssl(nbest, ssl_stream, corpus.vocab)
        best, _ = rescore(scored, alpha, beta)
        lines.append(json.dumps(Hypothesis(
            nbest.utt_id, list(best.words), list(best.tokens), best.combined_cost
        ).to_json_dict()))
    _emit_lines(lines, args.out)


def cmd_score(args):
    _config(args)  # validates the config file if given
    if args.manifest:
        manifest = Manifest.load(args.manifest)
    elif args.corpus:
        manifest = Manifest.load(Path(args.corpus) / "manifest.jsonl")
    else:
        raise ValueError("score needs --manifest or --corpus")
    per_utt = {}
    with open(args.hyp) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            rec = manifest.by_id().get(d["utt_id"])
            if rec is None:
                raise KeyError(f"utterance {d['utt_id']!r} not in manifest")
            per_utt[d["utt_id"]] = (rec.transcript.split(), list(d["words"]))
    report = partition_report(per_utt, manifest)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.table())


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "extract-bn": cmd_extract_bn,
    "invert": cmd_invert,
    "train-am": cmd_train_am,
    "decode": cmd_decode,
    "joint-decode": cmd_joint_decode,
    "rescore": cmd_rescore,
    "score": cmd_score,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except BrokenPipeError:
        raise
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
