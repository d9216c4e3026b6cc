"""End-to-end orchestration over a corpus directory: pretraining,
fine-tuning, feature extraction, acoustic-model training, single and
joint decoding, N-best rescoring, and scoring. The CLI, the demos, and
the acceptance suite all drive these functions."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bottleneck import (BottleneckAdapter, BottleneckConfig, bottleneck_forward,
                         train_adapter)
from .corpus import CorpusConfig, Manifest, gen_synth_corpus, partition_report
from .ctc import PosteriorStream, TokenVocab
from .decoder import (
    Hypothesis,
    Lexicon,
    decode_stream,
    interpolate_posteriors,
    isolated_nbest,
    joint_decode,
    parse_weight_ratio,
)
from .encoder import EncoderConfig, SslEncoder, finetune_ctc, pretrain
from .features import (
    FeatureMatrix,
    compute_fbank,
    fuse_features,
    read_features,
    read_wav,
    resample_frames,
    write_features,
)
from .frame_am import AmConfig, FrameAm, ctc_argmax_alignment, train_am, uniform_alignment
from .inversion import MdnConfig, MdnModel, mdn_forward, mdn_predict, train_inversion
from .params import ParameterStore
from .rescore import rescore, score_nbest_with_ssl

logger = logging.getLogger(__name__)


def encoder_config(cfg) -> EncoderConfig:
    return EncoderConfig(**cfg.get("encoder", {}))


def corpus_config(cfg) -> CorpusConfig:
    return CorpusConfig(**cfg.get("corpus", {}))


def bottleneck_config(cfg, d_model) -> BottleneckConfig:
    section = dict(cfg.get("bottleneck", {}))
    section.setdefault("d_in", d_model)
    return BottleneckConfig(**section)


def am_config(cfg) -> AmConfig:
    section = cfg.get("am", {})
    return AmConfig(
        offsets=tuple(section.get("offsets", (-2, -1, 0, 1, 2))),
        hidden_dims=tuple(section.get("hidden_dims", (64, 64))),
    )


class Corpus:
    """A generated corpus directory: manifest, lexicon, audio access."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = Manifest.load(self.root / "manifest.jsonl")
        self.lexicon = Lexicon.load(self.root / "lexicon.json")
        self.vocab = self.lexicon.vocab()

    def audio(self, record):
        return read_wav(self.root / record.audio_path)

    def tokens(self, record):
        """Token-id sequence of the record's transcript."""
        symbols = self.lexicon.tokens_of_words(record.transcript.split())
        return self.vocab.ids_of(symbols)


def generate_corpus(out_dir, cfg, seed=None):
    seed = cfg["seed"] if seed is None else seed
    manifest, lexicon = gen_synth_corpus(out_dir, corpus_config(cfg), seed)
    logger.info("generated %d utterances under %s", len(manifest), out_dir)
    return manifest, lexicon


def pretrain_encoder(corpus: Corpus, cfg, seed=None):
    seed = cfg["seed"] if seed is None else seed
    section = cfg.get("pretrain", {})
    audio = [corpus.audio(r).samples for r in corpus.manifest.subset("train")]
    model, history = pretrain(
        audio,
        encoder_config(cfg),
        epochs=section.get("epochs", 12),
        seed=seed,
        optimizer_cfg=section.get("optimizer"),
        hard=section.get("hard", True),
    )
    return model, history


def finetune_encoder(corpus: Corpus, model: SslEncoder, cfg, seed=None):
    """CTC fine-tuning with the configured stage list. With the adapter
    enabled, it is first initialized by standalone reconstruction training
    on the pretrained context features, then trained jointly with the CTC
    loss in the encoder-updating stages."""
    seed = cfg["seed"] if seed is None else seed
    section = cfg.get("finetune", {})
    train_records = corpus.manifest.subset("train")
    adapter = None
    if section.get("use_adapter", True):
        init_epochs = section.get("adapter_init_epochs", 30)
        contexts = [
            model.contextualize(model.encode_raw(corpus.audio(r))) for r in train_records
        ]
        adapter, _ = train_adapter(
            contexts,
            bottleneck_config(cfg, model.cfg.d_model),
            epochs=init_epochs,
            seed=seed + 7,
            optimizer_cfg=section.get("adapter_init_optimizer"),
        )
    dataset = [(corpus.audio(r).samples, corpus.tokens(r)) for r in train_records]
    histories = []
    stages = section.get("stages", [{"epochs": 20, "scope": "no-feature-encoder"}])
    for i, stage in enumerate(stages):
        history = finetune_ctc(
            dataset,
            model,
            corpus.vocab.width,
            epochs=stage.get("epochs", 10),
            seed=seed + i,
            scope=stage.get("scope", "no-feature-encoder"),
            adapter=adapter,
            optimizer_cfg=stage.get("optimizer", section.get("optimizer")),
        )
        histories.append(history)
    return adapter, histories


def save_encoder(model: SslEncoder, path):
    ParameterStore.from_module(model).save(path)


def load_encoder(cfg, path) -> SslEncoder:
    """Rebuild an encoder from the global config and a parameter store;
    a stored CTC head is re-attached with its stored width."""
    store = ParameterStore.load(path)
    model = SslEncoder(encoder_config(cfg), seed=0)
    if "ctc_head.w" in store.tensors:
        model.attach_ctc_head(store.tensors["ctc_head.w"].shape[1], seed=0)
    store.load_into(model)
    return model


def save_adapter(adapter: BottleneckAdapter, path):
    ParameterStore.from_module(adapter).save(path)


def load_adapter(cfg, d_model, path) -> BottleneckAdapter:
    adapter = BottleneckAdapter(bottleneck_config(cfg, d_model), seed=0)
    ParameterStore.load(path).load_into(adapter)
    return adapter


def save_mdn(model, path):
    ParameterStore.from_module(model).save(path)


def mdn_config(cfg) -> MdnConfig:
    section = cfg.get("mdn", {})
    return MdnConfig(
        d_in=cfg.get("bottleneck", {}).get("d_bn", 32),
        d_artic=section.get("d_artic", 6),
        mixtures=section.get("mixtures", 2),
        hidden_dims=tuple(section.get("hidden_dims", (32,))),
    )


def load_mdn(cfg, path) -> MdnModel:
    model = MdnModel(mdn_config(cfg), seed=0)
    ParameterStore.load(path).load_into(model)
    return model


def fbank_features(corpus: Corpus, record) -> FeatureMatrix:
    return compute_fbank(corpus.audio(record))


def bottleneck_features(corpus: Corpus, record, model: SslEncoder,
                        adapter: BottleneckAdapter) -> FeatureMatrix:
    """Extract the 10 ms bottleneck stream for one utterance (no dropout)."""
    z = model.encode_raw(corpus.audio(record))
    c = model.contextualize(z)
    bn, _ = bottleneck_forward(adapter, FeatureMatrix(c, model.cfg.frame_shift_us, "ctx"))
    return bn


def articulatory_map(d_in, d_artic, seed):
    """The synthetic articulator: a fixed linear map used to fabricate
    ground-truth trajectories from speech representations."""
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_artic))
    b = rng.normal(0.0, 0.1, size=d_artic)
    return a, b


def train_inversion_model(corpus: Corpus, model, adapter, cfg, seed=None):
    """Train the MDN on (bottleneck representation, synthetic articulatory)
    pairs from the train subset; targets are a fixed linear map of the
    representations plus Gaussian noise."""
    seed = cfg["seed"] if seed is None else seed
    section = cfg.get("mdn", {})
    mdn_cfg = mdn_config(cfg)
    a, b = articulatory_map(mdn_cfg.d_in, mdn_cfg.d_artic, seed + 17)
    noise_rng = np.random.default_rng(seed + 18)
    sigma = section.get("map_noise", 0.05)
    pairs = []
    for record in corpus.manifest.subset("train"):
        bn = bottleneck_features(corpus, record, model, adapter)
        target = bn.data.astype(np.float64) @ a + b
        target += sigma * noise_rng.normal(size=target.shape)
        pairs.append((bn.data.astype(np.float64), target))
    mdn_model, history = train_inversion(
        pairs,
        mdn_cfg,
        epochs=section.get("epochs", 120),
        seed=seed,
        optimizer_cfg=section.get("optimizer"),
    )
    return mdn_model, history


def articulatory_features(corpus: Corpus, record, model, adapter, mdn_model) -> FeatureMatrix:
    bn = bottleneck_features(corpus, record, model, adapter)
    mix = mdn_forward(bn, mdn_model)
    return mdn_predict(mix)


def build_feature_fn(corpus, kind, model=None, adapter=None, mdn_model=None,
                     bn_dir=None, artic_dir=None, target_shift_us=10_000):
    """Return record -> FeatureMatrix for a feature spec like "fbk",
    "fbk+w2v-bn", or "fbk+w2v-bn+artic".

    The bottleneck and articulatory streams come from the given models,
    or from directories of previously extracted feature files when
    ``bn_dir`` / ``artic_dir`` are set.
    """
    parts = kind.split("+")

    def compute(record):
        streams = []
        for part in parts:
            if part == "fbk":
                streams.append(fbank_features(corpus, record))
            elif part == "w2v-bn":
                if bn_dir is not None:
                    streams.append(read_features(Path(bn_dir) / f"{record.utt_id}.sff"))
                else:
                    streams.append(bottleneck_features(corpus, record, model, adapter))
            elif part == "artic":
                if artic_dir is not None:
                    streams.append(read_features(Path(artic_dir) / f"{record.utt_id}.sff"))
                else:
                    streams.append(
                        articulatory_features(corpus, record, model, adapter, mdn_model)
                    )
            else:
                raise ValueError(f"unknown feature stream {part!r}")
        if len(streams) == 1 and streams[0].frame_shift_us == target_shift_us:
            return streams[0]
        return fuse_features(streams, target_shift_us)

    return compute


def write_stream(stream: PosteriorStream, path):
    """Posterior streams ride the feature-file format: log probabilities
    as the payload, the system tag as the label."""
    write_features(
        FeatureMatrix(stream.logp, stream.frame_shift_us, stream.source), path
    )


def read_stream(path) -> PosteriorStream:
    feats = read_features(path)
    logp = feats.data.astype(np.float64)
    # float32 storage rounds the rows; renormalize exactly
    shift = logp.max(axis=1)
    norm = shift + np.log(np.exp(logp - shift[:, None]).sum(axis=1))
    return PosteriorStream(logp - norm[:, None], feats.frame_shift_us, feats.label)


def alignment_labels(corpus: Corpus, record, feats: FeatureMatrix, cfg,
                     model=None, adapter=None):
    """Per-frame labels for AM training: uniform segmentation with blank
    edges matching the generator's silence margins, or the fine-tuned CTC
    head's argmax upsampled to the feature rate."""
    mode = cfg.get("am", {}).get("alignment", "uniform")
    if mode == "uniform":
        edge_ms = cfg.get("corpus", {}).get("edge_ms", 40.0)
        edge_frames = int(round(edge_ms * 1000.0 / feats.frame_shift_us))
        return uniform_alignment(feats.n_frames, corpus.tokens(record), edge_frames)
    if mode == "ctc":
        stream = model.frame_posteriors(corpus.audio(record), adapter=adapter)
        labels20 = ctc_argmax_alignment(stream)
        labels = np.repeat(labels20, stream.frame_shift_us // feats.frame_shift_us)
        if labels.size < feats.n_frames:
            labels = np.concatenate([labels, np.zeros(feats.n_frames - labels.size, np.int64)])
        return labels[: feats.n_frames]
    raise ValueError(f"unknown alignment mode {mode!r}")


def train_frame_am(corpus: Corpus, feature_fn, cfg, seed=None, model=None, adapter=None):
    seed = cfg["seed"] if seed is None else seed
    section = cfg.get("am", {})
    dataset = []
    for record in corpus.manifest.subset("train"):
        feats = feature_fn(record)
        labels = alignment_labels(corpus, record, feats, cfg, model=model, adapter=adapter)
        dataset.append((feats, labels))
    d_feat = dataset[0][0].dim
    am, history = train_am(
        dataset,
        am_config(cfg),
        d_feat=d_feat,
        n_classes=corpus.vocab.width,
        epochs=section.get("epochs", 12),
        seed=seed,
        optimizer_cfg=section.get("optimizer"),
    )
    return am, history


def _decode_one(args):
    utt_id, streams, weights, lexicon, vocab = args
    if len(streams) == 1 and weights is None:
        return decode_stream(streams[0], lexicon, vocab, utt_id)
    w = np.ones(len(streams)) if weights is None else weights
    return joint_decode(streams, w, lexicon, vocab, utt_id)


def decode_utterances(tasks, jobs=1):
    """Decode (utt_id, [streams], weights, lexicon, vocab) tasks, in
    parallel when jobs > 1; results are ordered by utterance id either
    way."""
    tasks = sorted(tasks, key=lambda task: task[0])
    if jobs <= 1:
        hyps = [_decode_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            hyps = list(pool.map(_decode_one, tasks))
    return sorted(hyps, key=lambda h: h.utt_id)


def score_hypotheses(hyps, corpus: Corpus):
    per_utt = {h.utt_id: (corpus.manifest.by_id()[h.utt_id].transcript.split(), h.words)
               for h in hyps}
    return partition_report(per_utt, corpus.manifest)


def run_recognition(corpus: Corpus, cfg, model, adapter, jobs=1, mdn_model=None,
                    test_subsets=("test-seen", "test-unseen")):
    """Full recognition comparison on the test subsets.

    Trains the fbk-only and fbk+w2v-bn acoustic models, decodes each
    single system, joint-decodes with the configured weights, rescoring
    the joint N-best with second-pass SSL-CTC scores. Returns a dict of
    hypothesis lists and WER reports per system.
    """
    seed = cfg["seed"]
    decode_cfg = cfg.get("decode", {})
    fbk_fn = build_feature_fn(corpus, "fbk")
    fused_fn = build_feature_fn(corpus, "fbk+w2v-bn", model=model, adapter=adapter)
    logger.info("training fbk-only acoustic model")
    am_fbk, _ = train_frame_am(corpus, fbk_fn, cfg, seed=seed + 101, model=model,
                               adapter=adapter)
    logger.info("training fbk+w2v-bn acoustic model")
    am_fused, _ = train_frame_am(corpus, fused_fn, cfg, seed=seed + 202, model=model,
                                 adapter=adapter)
    weights = parse_weight_ratio(decode_cfg.get("weights", "3:2"))
    n_best = decode_cfg.get("nbest", 10)
    alpha = cfg.get("rescore", {}).get("alpha", 2.0)
    beta = cfg.get("rescore", {}).get("beta", 9.0)

    records = [r for r in corpus.manifest if r.subset in test_subsets]
    records.sort(key=lambda r: r.utt_id)
    hyps = {"fbk": [], "fused": [], "joint": [], "rescored": []}
    for record in records:
        s_fbk = am_fbk.posteriors(fbk_fn(record), source="tdnn-fbk")
        s_fused = am_fused.posteriors(fused_fn(record), source="tdnn-fused")
        hyps["fbk"].append(decode_stream(s_fbk, corpus.lexicon, corpus.vocab, record.utt_id))
        hyps["fused"].append(
            decode_stream(s_fused, corpus.lexicon, corpus.vocab, record.utt_id)
        )
        mixed = interpolate_posteriors([s_fused, s_fbk], weights)
        hyps["joint"].append(
            decode_stream(mixed, corpus.lexicon, corpus.vocab, record.utt_id)
        )
        nbest = isolated_nbest(mixed, corpus.lexicon, corpus.vocab, n_best,
                               utt_id=record.utt_id, system="tdnn")
        ssl_stream = model.frame_posteriors(corpus.audio(record), adapter=adapter)
        nbest = score_nbest_with_ssl(nbest, ssl_stream, corpus.vocab)
        best, _ = rescore(nbest, alpha, beta)
        hyps["rescored"].append(
            Hypothesis(record.utt_id, list(best.words), list(best.tokens),
                       best.combined_cost)
        )
    reports = {name: score_hypotheses(h, corpus) for name, h in hyps.items()}
    return {"hypotheses": hyps, "reports": reports,
            "models": {"am_fbk": am_fbk, "am_fused": am_fused}}
