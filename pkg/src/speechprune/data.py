"""Deterministic synthetic speech corpora for the toy tasks.

Every token owns a fixed random template vector; an utterance's features
are each token's template repeated for a variable number of frames plus
Gaussian noise. The transcribe task predicts the tokens back; the
translate task predicts their image under a seed-fixed vocabulary
permutation. Everything is a pure function of the config.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .assembly import (
    AssembledSequence,
    FeatureMatrix,
    Projector,
    assemble,
    project,
    read_features,
    stack_frames,
    write_features,
)
from .errors import ConfigurationError, DataError

EOS_ID = 0
PROMPT_TRANSCRIBE_ID = 1
PROMPT_TRANSLATE_ID = 2
CONTENT_START = 3

TASKS = ("transcribe", "translate")

DATASET_VERSION = 1


def derive_seed(seed: int, label: str) -> int:
    """Stable sub-seed for a named stage, so stages re-run in isolation."""
    digest = hashlib.sha256(f"{seed}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def word_for_token(token_id: int) -> str:
    return f"t{token_id}"


def words_for_tokens(token_ids) -> str:
    return " ".join(word_for_token(int(t)) for t in token_ids)


def prompt_ids_for_task(task: str) -> list:
    if task == "transcribe":
        return [PROMPT_TRANSCRIBE_ID]
    if task == "translate":
        return [PROMPT_TRANSLATE_ID]
    raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 64
    min_len: int = 3
    max_len: int = 10
    min_frames: int = 2
    max_frames: int = 4
    d_e: int = 32
    noise_std: float = 0.05
    task: str = "transcribe"
    translation_seed: int = 1234
    corpus_size: int = 2000
    seed: int = 0
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        if self.vocab_size <= CONTENT_START:
            raise ConfigurationError(
                f"vocab_size must exceed {CONTENT_START} (reserved ids), got {self.vocab_size}"
            )
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError("need 1 <= min_len <= max_len")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigurationError("need 1 <= min_frames <= max_frames")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.corpus_size < 3:
            raise ConfigurationError("corpus_size must be >= 3 to populate all splits")
        if self.d_e < 1:
            raise ConfigurationError("d_e must be >= 1")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "min_len": self.min_len,
            "max_len": self.max_len,
            "min_frames": self.min_frames,
            "max_frames": self.max_frames,
            "d_e": self.d_e,
            "noise_std": self.noise_std,
            "task": self.task,
            "translation_seed": self.translation_seed,
            "corpus_size": self.corpus_size,
            "seed": self.seed,
            "frame_rate_hz": self.frame_rate_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class Utterance:
    uid: str
    features: FeatureMatrix
    transcript: list
    target: list
    task: str = "transcribe"


@dataclass
class Dataset:
    config: SynthConfig
    utterances: list
    splits: dict  # name -> (start, end) positional ranges

    def split(self, name: str) -> list:
        if name not in self.splits:
            raise DataError(f"no split named {name!r}; have {sorted(self.splits)}")
        lo, hi = self.splits[name]
        return self.utterances[lo:hi]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def dev(self) -> list:
        return self.split("dev")

    @property
    def test(self) -> list:
        return self.split("test")


def token_templates(config: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(config.seed, "templates"))
    return rng.normal(0.0, 1.0, (config.vocab_size, config.d_e)).astype(np.float32)


def translation_permutation(config: SynthConfig) -> dict:
    """Seed-fixed bijection over content token ids."""
    rng = np.random.default_rng(derive_seed(config.translation_seed, "permutation"))
    ids = np.arange(CONTENT_START, config.vocab_size)
    image = rng.permutation(ids)
    return {int(a): int(b) for a, b in zip(ids, image)}


def synth_features(tokens, config: SynthConfig, rng: np.random.Generator,
                   templates: Optional[np.ndarray] = None) -> FeatureMatrix:
    """Emit per-token template frames with Gaussian noise.

    Each token contributes between min_frames and max_frames copies of its
    template row; frame counts and noise come from the supplied rng.
    """
    if len(tokens) == 0:
        raise DataError("cannot synthesize features for an empty token list")
    if templates is None:
        templates = token_templates(config)
    blocks = []
    for t in tokens:
        r = int(rng.integers(config.min_frames, config.max_frames + 1))
        block = np.repeat(templates[int(t)][None, :], r, axis=0)
        block = block + rng.normal(0.0, config.noise_std, block.shape)
        blocks.append(block)
    feats = np.concatenate(blocks, axis=0).astype(np.float32)
    return FeatureMatrix(feats, frame_rate_hz=config.frame_rate_hz)


def _split_ranges(n: int) -> dict:
    n_train = int(n * 0.8)
    n_dev = int(n * 0.1)
    return {
        "train": (0, n_train),
        "dev": (n_train, n_train + n_dev),
        "test": (n_train + n_dev, n),
    }


def gen_dataset(config: SynthConfig) -> Dataset:
    """Generate the full corpus with positional 80/10/10 splits."""
    templates = token_templates(config)
    perm = translation_permutation(config) if config.task == "translate" else None
    utterances = []
    width = max(5, len(str(config.corpus_size - 1)))
    for i in range(config.corpus_size):
        rng = np.random.default_rng(derive_seed(config.seed, f"utt/{i}"))
        length = int(rng.integers(config.min_len, config.max_len + 1))
        transcript = [int(t) for t in
                      rng.integers(CONTENT_START, config.vocab_size, length)]
        target = [perm[t] for t in transcript] if perm else list(transcript)
        feats = synth_features(transcript, config, rng, templates)
        utterances.append(Utterance(uid=f"utt{i:0{width}d}", features=feats,
                                    transcript=transcript, target=target,
                                    task=config.task))
    return Dataset(config=config, utterances=utterances,
                   splits=_split_ranges(config.corpus_size))


def save_dataset(dir_path, dataset: Dataset) -> None:
    dir_path = os.fspath(dir_path)
    feat_dir = os.path.join(dir_path, "feat")
    os.makedirs(feat_dir, exist_ok=True)
    lines = []
    for utt in dataset.utterances:
        rel = f"feat/{utt.uid}.bin"
        write_features(os.path.join(dir_path, rel), utt.features)
        lines.append("\t".join([
            utt.uid,
            " ".join(str(t) for t in utt.transcript),
            " ".join(str(t) for t in utt.target),
            rel,
            str(utt.features.num_frames),
        ]))
    index_text = "\n".join(lines) + "\n"
    with open(os.path.join(dir_path, "index.tsv"), "w") as f:
        f.write(index_text)
    feat_sha = hashlib.sha256()
    for utt in dataset.utterances:
        with open(os.path.join(dir_path, f"feat/{utt.uid}.bin"), "rb") as f:
            feat_sha.update(f.read())
    manifest = {
        "kind": "dataset",
        "version": DATASET_VERSION,
        "config": dataset.config.to_dict(),
        "count": len(dataset.utterances),
        "splits": {k: list(v) for k, v in dataset.splits.items()},
        "index_sha256": hashlib.sha256(index_text.encode()).hexdigest(),
        "features_sha256": feat_sha.hexdigest(),
    }
    with open(os.path.join(dir_path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(dir_path) -> Dataset:
    dir_path = os.fspath(dir_path)
    mpath = os.path.join(dir_path, "manifest.json")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"{dir_path}: not a dataset directory (no manifest.json)") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: unreadable manifest: {e}") from e
    if manifest.get("kind") != "dataset" or manifest.get("version") != DATASET_VERSION:
        raise DataError(f"{mpath}: unsupported dataset manifest")
    config = SynthConfig.from_dict(manifest["config"])
    with open(os.path.join(dir_path, "index.tsv")) as f:
        index_text = f.read()
    if hashlib.sha256(index_text.encode()).hexdigest() != manifest["index_sha256"]:
        raise DataError(f"{dir_path}: index.tsv does not match its manifest hash")
    utterances = []
    for line in index_text.splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{dir_path}: malformed index line: {line!r}")
        uid, transcript_s, target_s, rel, frames_s = parts
        fpath = os.path.join(dir_path, rel)
        try:
            feats = read_features(fpath)
        except FileNotFoundError as e:
            raise DataError(f"utterance {uid}: missing feature file {rel}") from e
        if feats.num_frames != int(frames_s):
            raise DataError(f"utterance {uid}: frame count mismatch "
                            f"({feats.num_frames} vs index {frames_s})")
        utterances.append(Utterance(
            uid=uid,
            features=feats,
            transcript=[int(t) for t in transcript_s.split()],
            target=[int(t) for t in target_s.split()],
            task=config.task,
        ))
    if len(utterances) != manifest["count"]:
        raise DataError(f"{dir_path}: expected {manifest['count']} utterances, "
                        f"found {len(utterances)}")
    return Dataset(config=config, utterances=utterances,
                   splits={k: tuple(v) for k, v in manifest["splits"].items()})


def dataset_hash(dir_path) -> str:
    """Content hash over manifest, index, and every feature file."""
    dir_path = os.fspath(dir_path)
    sha = hashlib.sha256()
    for name in ("manifest.json", "index.tsv"):
        with open(os.path.join(dir_path, name), "rb") as f:
            sha.update(f.read())
    feat_dir = os.path.join(dir_path, "feat")
    for name in sorted(os.listdir(feat_dir)):
        with open(os.path.join(feat_dir, name), "rb") as f:
            sha.update(f.read())
    return sha.hexdigest()


def assemble_utterance(utt: Utterance, projector: Optional[Projector],
                       embed_table: torch.Tensor, mode: str = "speech",
                       include_target: bool = True,
                       include_eos: bool = True) -> AssembledSequence:
    """Build one decoder input row for an utterance.

    speech mode: [projected features, task prompt, target (+EOS)];
    text mode drops the speech block (prompt and target only). Decode-time
    callers pass include_target=False to get just the context.
    """
    if mode not in ("speech", "text"):
        raise ConfigurationError(f"mode must be 'speech' or 'text', got {mode!r}")
    speech = None
    if mode == "speech":
        if projector is None:
            raise ConfigurationError("speech mode needs a projector")
        speech = project(projector, stack_frames(utt.features, projector.stack_k))
    target = list(utt.target) if include_target else []
    if include_target and include_eos:
        target = target + [EOS_ID]
    return assemble(speech, prompt_ids_for_task(utt.task), target, embed_table)
