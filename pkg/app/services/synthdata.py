"""Synthetic tri-modal corpus: token vocabularies, template-based speech
features and a cipher-plus-swap translation task."""

import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch

from app.core.errors import VocabError
from app.models.corpus import Batch, CorpusBundle, CorpusConfig, ExtendedVocab, UtteranceTriple

logger = logging.getLogger(__name__)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

SPLIT_CODES = {"asr": 1, "mt": 2, "st_train": 3, "st_dev": 4, "st_test": 5}


def _derive_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


def _token_names(count: int, rng: np.random.Generator) -> List[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    names: List[str] = []
    seen: Set[str] = set()
    while len(names) < count:
        name = "".join(rng.choice(syllables, size=2))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def make_vocab(n_source: int, n_target: int, seed: int) -> ExtendedVocab:
    """Build both vocabularies and the source-to-target cipher for ``seed``."""
    if n_source < 2 or n_target < 2:
        raise VocabError(f"vocabularies need at least 2 tokens, got {n_source} source / {n_target} target")
    rng = np.random.default_rng(_derive_seed(seed, 0))
    source = _token_names(n_source, rng)
    target = [name.upper() for name in _token_names(n_target, rng)]
    cipher = None
    if n_target >= n_source:
        cipher = [int(3 + t) for t in rng.permutation(n_target)[:n_source]]
    return ExtendedVocab(
        source_tokens=source,
        target_tokens=target,
        blank_id=n_source,
        cipher=cipher,
        seed=seed,
    )


def make_templates(n_source: int, d_feat: int, seed: int) -> np.ndarray:
    """One fixed acoustic template vector per source token."""
    rng = np.random.default_rng(_derive_seed(seed, 7))
    return rng.normal(size=(n_source, d_feat)).astype(np.float32)


def synthesize_speech(
    x: Sequence[int],
    templates: np.ndarray,
    noise_sigma: float,
    seed: int,
    repeat_range: Tuple[int, int] = (2, 4),
    silence_prob: float = 0.3,
    frames_per_unit: int = 4,
    downsample: int = 4,
    fixed_repeat: Optional[int] = None,
) -> np.ndarray:
    """Render a transcript as noisy template frames.

    Every token's template fills ``r`` units (``r`` drawn from ``repeat_range``
    unless ``fixed_repeat``), silence units may follow each token but the
    last, and trailing silence is appended until the downsampled length can
    hold ``2|x|+1`` CTC frames. A unit spans ``frames_per_unit`` raw frames.
    """
    if len(x) == 0:
        raise ValueError("cannot synthesize speech for an empty transcript")
    rng = np.random.default_rng(seed)
    d_feat = templates.shape[1]
    silence = np.zeros(d_feat, dtype=np.float32)
    units: List[np.ndarray] = []
    for i, token in enumerate(x):
        r = fixed_repeat if fixed_repeat is not None else int(rng.integers(repeat_range[0], repeat_range[1] + 1))
        units.extend([templates[token]] * r)
        if i < len(x) - 1 and rng.random() < silence_prob:
            units.append(silence)
    needed = downsample * 2 * len(x) + 1
    while len(units) * frames_per_unit < needed:
        units.append(silence)
    frames = np.repeat(np.stack(units), frames_per_unit, axis=0)
    noise = rng.normal(scale=1.0, size=frames.shape).astype(np.float32)
    return (frames + np.float32(noise_sigma) * noise).astype(np.float32)


def translate_reference(x: Sequence[int], vocab: ExtendedVocab) -> List[int]:
    """Cipher every token, then swap neighbours pairwise (0<->1, 2<->3, ...)."""
    if vocab.cipher is None:
        raise VocabError("vocabulary has no cipher (target side smaller than source side)")
    y = [vocab.cipher[token] for token in x]
    for i in range(0, len(y) - 1, 2):
        y[i], y[i + 1] = y[i + 1], y[i]
    return y


def invert_reference(y: Sequence[int], vocab: ExtendedVocab) -> List[int]:
    if vocab.cipher is None:
        raise VocabError("vocabulary has no cipher")
    inverse = {target: source for source, target in enumerate(vocab.cipher)}
    x = [inverse[token] for token in y]
    for i in range(0, len(x) - 1, 2):
        x[i], x[i + 1] = x[i + 1], x[i]
    return x


def _transcripts(
    rng: np.random.Generator, count: int, config: CorpusConfig, exclude: Set[Tuple[int, ...]], unique: bool
) -> List[Tuple[int, ...]]:
    out: List[Tuple[int, ...]] = []
    taken: Set[Tuple[int, ...]] = set()
    while len(out) < count:
        length = int(rng.integers(config.min_len, config.max_len + 1))
        x = tuple(int(t) for t in rng.integers(0, config.n_source, size=length))
        if x in exclude or (unique and x in taken):
            continue
        taken.add(x)
        out.append(x)
    return out


def build_corpus(config: CorpusConfig, seed: int) -> CorpusBundle:
    """Generate every split as a pure function of ``(config, seed)``.

    Dev and test transcripts are drawn first, are unique, and never occur in
    any training split.
    """
    vocab = make_vocab(config.n_source, config.n_target, seed)
    if vocab.cipher is None:
        raise VocabError(f"target vocabulary ({config.n_target}) must cover the source ({config.n_source})")
    templates = make_templates(config.n_source, config.d_feat, seed)
    rng = np.random.default_rng(_derive_seed(seed, 1))

    held_out = _transcripts(rng, config.n_st_dev + config.n_st_test, config, set(), unique=True)
    excluded = set(held_out)
    plan = {
        "st_dev": held_out[: config.n_st_dev],
        "st_test": held_out[config.n_st_dev :],
        "st_train": _transcripts(rng, config.n_st_train, config, excluded, unique=False),
        "asr": _transcripts(rng, config.n_asr, config, excluded, unique=False),
        "mt": _transcripts(rng, config.n_mt, config, excluded, unique=False),
    }

    def render(split: str, with_speech: bool, with_translation: bool) -> List[UtteranceTriple]:
        items = []
        for i, x in enumerate(plan[split]):
            speech = None
            if with_speech:
                speech = synthesize_speech(
                    x,
                    templates,
                    config.noise_sigma,
                    _derive_seed(seed, SPLIT_CODES[split], i),
                    repeat_range=(config.repeat_min, config.repeat_max),
                    silence_prob=config.silence_prob,
                    frames_per_unit=config.frames_per_unit,
                    downsample=config.downsample,
                )
            items.append(
                UtteranceTriple(
                    uid=f"{split}-{i:05d}",
                    x=list(x),
                    y=translate_reference(x, vocab) if with_translation else None,
                    speech=speech,
                )
            )
        return items

    bundle = CorpusBundle(
        vocab=vocab,
        config=config,
        templates=templates,
        asr=render("asr", True, False),
        mt=render("mt", False, True),
        st_train=render("st_train", True, True),
        st_dev=render("st_dev", True, True),
        st_test=render("st_test", True, True),
        seed=seed,
    )
    logger.info(f"Built synthetic corpus (seed {seed}): {bundle.sizes()}")
    return bundle


def _pad(sequences: List[List[int]], pad: int) -> Tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in sequences], dtype=torch.long)
    out = torch.full((len(sequences), max(len(s) for s in sequences)), pad, dtype=torch.long)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out, lengths


def make_batch(items: Sequence[UtteranceTriple], vocab: ExtendedVocab, pad_frames: int = 0) -> Batch:
    """Pad one group of utterances; ``pad_frames`` adds extra all-padding frames."""
    transcripts = [list(item.x) for item in items]
    src, src_lens = _pad(transcripts, 0)
    batch = Batch(
        uids=[item.uid for item in items],
        transcripts=transcripts,
        references=[list(item.y) if item.y is not None else [] for item in items],
        src=src,
        src_lens=src_lens,
    )
    if all(item.speech is not None for item in items):
        lengths = [item.frames for item in items]
        dtype = torch.get_default_dtype()
        speech = torch.zeros(len(items), max(lengths) + pad_frames, items[0].speech.shape[1], dtype=dtype)
        for i, item in enumerate(items):
            speech[i, : lengths[i]] = torch.from_numpy(item.speech).to(dtype)
        batch.speech = speech
        batch.speech_lens = torch.tensor(lengths, dtype=torch.long)
    if all(item.y is not None for item in items):
        batch.tgt_in, lens = _pad([[vocab.bos_id] + list(item.y) for item in items], vocab.pad_id)
        batch.tgt_out, _ = _pad([list(item.y) + [vocab.eos_id] for item in items], vocab.pad_id)
        batch.tgt_mask = torch.arange(batch.tgt_out.shape[1]).unsqueeze(0) < lens.unsqueeze(1)
    return batch


def batch(
    split: Sequence[UtteranceTriple],
    batch_size: int,
    vocab: ExtendedVocab,
    shuffle_seed: Optional[int] = None,
) -> List[Batch]:
    """Cut a split into padded batches, optionally in a seeded random order."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.arange(len(split))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(split))
    return [
        make_batch([split[i] for i in order[start : start + batch_size]], vocab)
        for start in range(0, len(split), batch_size)
    ]


def _write_speech(path: Path, items: Sequence[UtteranceTriple]):
    d_feat = items[0].speech.shape[1] if items else 0
    header = np.array([len(items), d_feat] + [item.frames for item in items], dtype="<i4")
    with path.open("wb") as handle:
        handle.write(header.tobytes())
        for item in items:
            handle.write(item.speech.astype("<f4").tobytes())


def _read_speech(path: Path) -> List[np.ndarray]:
    raw = path.read_bytes()
    n_utts, d_feat = np.frombuffer(raw, dtype="<i4", count=2)
    frames = np.frombuffer(raw, dtype="<i4", count=int(n_utts), offset=8)
    payload = np.frombuffer(raw, dtype="<f4", offset=8 + 4 * int(n_utts))
    out, cursor = [], 0
    for count in frames:
        size = int(count) * int(d_feat)
        out.append(payload[cursor : cursor + size].reshape(int(count), int(d_feat)).astype(np.float32))
        cursor += size
    return out


def _ids(text: str) -> Optional[List[int]]:
    return [int(t) for t in text.split()] if text.strip() else None


def export_corpus(bundle: CorpusBundle, directory: Path):
    """Write ``<split>.txt`` (transcript ids, tab, translation ids) plus speech sidecars."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"seed": bundle.seed, "config": bundle.config.dict(), "vocab": json.loads(bundle.vocab.json())}
    (directory / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    np.save(directory / "templates.npy", bundle.templates)
    for name in CorpusBundle.split_names():
        items = bundle.split(name)
        lines = [
            " ".join(map(str, item.x)) + "\t" + (" ".join(map(str, item.y)) if item.y is not None else "")
            for item in items
        ]
        (directory / f"{name}.txt").write_text("\n".join(lines) + "\n")
        if items and items[0].speech is not None:
            _write_speech(directory / f"{name}.speech.bin", items)
    logger.info(f"Exported corpus to {directory}")


def import_corpus(directory: Path) -> CorpusBundle:
    directory = Path(directory)
    meta = json.loads((directory / "corpus.json").read_text())
    splits = {}
    for name in CorpusBundle.split_names():
        lines = [line for line in (directory / f"{name}.txt").read_text().split("\n") if line]
        speech_path = directory / f"{name}.speech.bin"
        speech: Iterable[Optional[np.ndarray]] = (
            _read_speech(speech_path) if speech_path.is_file() else [None] * len(lines)
        )
        splits[name] = [
            UtteranceTriple(uid=f"{name}-{i:05d}", x=_ids(line.split("\t")[0]), y=_ids(line.split("\t")[1]), speech=s)
            for i, (line, s) in enumerate(zip(lines, speech))
        ]
    return CorpusBundle(
        vocab=ExtendedVocab(**meta["vocab"]),
        config=CorpusConfig(**meta["config"]),
        templates=np.load(directory / "templates.npy"),
        seed=meta["seed"],
        **splits,
    )
