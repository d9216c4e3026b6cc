"""Global JSON configuration: one file with per-module sections; CLI flags
override individual keys. The shipped defaults are desk-scale settings
that train and decode within minutes on a CPU."""

from __future__ import annotations

import copy
import json


DEFAULT_CONFIG = {
    "seed": 1234,
    "corpus": {
        "n_words": 10,
        "unseen_fraction": 0.4,
        "n_tones": 12,
        "tones_per_word": 3,
        "n_speakers": 4,
        "train_reps": {"source": 2, "target": 1},
        "test_reps": {"source": 2, "target": 2},
        "tone_ms": 120.0,
        "edge_ms": 40.0,
        "amplitude": 0.3,
        "noise_rms": 0.04,
        "target_tilt": 0.5,
        "target_tempo": 0.88,
        "target_noise_rms": 0.12,
    },
    "encoder": {
        "d_model": 64,
        "n_blocks": 2,
        "n_heads": 4,
        "groups": 2,
        "codebook_entries": 8,
        "code_dim": 16,
        "mask_prob": 0.065,
        "mask_span": 10,
        "contrastive_temperature": 0.1,
        "gumbel_temperature": 2.0,
        "gumbel_temperature_min": 0.75,  # linear annealing across pretraining
        "distractors": 5,
        "loss_weight_diversity": 0.1,
    },
    # paper-scale protocol uses SGD momentum with linear decay from 1e-5;
    # at toy scale Adam with a larger rate converges inside the budget
    "pretrain": {
        "epochs": 15,
        "hard": True,
        "optimizer": {"optimizer": "adam", "lr": 1e-3},
    },
    # CTC head warm-up on frozen features, then the deeper stages; the
    # adapter is initialized by standalone reconstruction training
    "finetune": {
        "use_adapter": True,
        "adapter_init_epochs": 30,
        "adapter_init_optimizer": {"optimizer": "adam", "lr": 2e-3},
        "stages": [
            {"epochs": 10, "scope": "head-only",
             "optimizer": {"optimizer": "adam", "lr": 1e-2}},
            {"epochs": 25, "scope": "no-feature-encoder",
             "optimizer": {"optimizer": "adam", "lr": 3e-3}},
            {"epochs": 5, "scope": "first-1-blocks",
             "optimizer": {"optimizer": "adam", "lr": 1e-3}},
        ],
    },
    "bottleneck": {"d_bn": 32, "dropout": 0.1},
    "am": {
        "offsets": [-2, -1, 0, 1, 2],
        "hidden_dims": [64, 64],
        "epochs": 12,
        "alignment": "uniform",  # "uniform" | "ctc"
        "optimizer": {"optimizer": "adam", "lr": 2e-3},
    },
    "mdn": {
        "d_artic": 6,
        "mixtures": 2,
        "hidden_dims": [32],
        "epochs": 120,
        "map_noise": 0.05,
        "optimizer": {"optimizer": "adam", "lr": 5e-3},
    },
    "decode": {
        "weights": "3:2",  # fused : fbk-only
        "weights3": "9:1:5",  # fused : fbk-only : multimodal
        "nbest": 20,  # capped by the lexicon size in isolated-word mode
    },
    "rescore": {"alpha": 2.0, "beta": 9.0},
}


def merge_config(base, override):
    """Recursive dict merge; override values win, sub-dicts merge."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=None):
    """Defaults, optionally merged with a JSON file and then with explicit
    overrides (highest precedence)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        cfg = merge_config(cfg, loaded)
    if overrides:
        cfg = merge_config(cfg, overrides)
    return cfg
