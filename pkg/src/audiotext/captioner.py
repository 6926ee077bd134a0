"""Tag-guided audio captioning: bi-GRU audio encoder, transformer decoder, beam search.

Every decoder input embedding is ``WE(y_n) + pos_n + e^g`` where ``e^g`` is the
mean of the clip's tag embeddings.  With ``use_tags=False`` the tag term is
skipped entirely (the tag-free ablation).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_state_into, read_state_file, write_state_file
from .diffcore import (GRU, Adam, DecoderBlock, Embedding, LayerNorm, Linear, Module, Parameter, Tensor,
                       causal_mask, no_grad, ops)
from .diffcore import functional as F
from .errors import CheckpointError, ConfigError, DegenerateInputError, DimensionError
from .textproc import Vocabulary, pad_batch, tokenize

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2


@dataclass
class CaptionerConfig:
    mel_bins: int = 32
    time_pool: int = 2          # average this many feature frames before the GRU
    gru_hidden: int = 64
    gru_layers: int = 3
    width: int = 128
    decoder_layers: int = 2
    heads: int = 4
    ff: int = 256
    max_len: int = 20
    use_tags: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


class CaptionModel(Module):
    def __init__(self, cfg: CaptionerConfig, vocab_size: int, tags: Sequence[str], seed: int = 0):
        super().__init__()
        if not tags:
            raise ConfigError("caption model needs a non-empty tag registry")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.tag_names: Tuple[str, ...] = tuple(tags)
        self._tag_index = {t: i for i, t in enumerate(self.tag_names)}
        self.register_buffer("feat_mean", np.zeros(cfg.mel_bins))
        self.register_buffer("feat_std", np.ones(cfg.mel_bins))
        self.encoder = GRU(cfg.mel_bins, cfg.gru_hidden, cfg.gru_layers, rng, bidirectional=True)
        self.bridge = Linear(self.encoder.output_dim, cfg.width, rng)
        self.word_emb = Embedding(vocab_size, cfg.width, rng)
        self.tag_emb = Embedding(len(self.tag_names), cfg.width, rng)
        self.pos = Parameter(rng.normal(0.0, 0.1, (cfg.max_len + 1, cfg.width)))
        self.blocks = [DecoderBlock(cfg.width, cfg.heads, cfg.ff, rng) for _ in range(cfg.decoder_layers)]
        self.ln = LayerNorm(cfg.width)
        self.out = Linear(cfg.width, vocab_size, rng)

    @property
    def vocab_size(self) -> int:
        return self.out.weight.shape[1]

    def set_feature_stats(self, frames: np.ndarray) -> None:
        flat = frames.reshape(-1, frames.shape[-1])
        self._buffers["feat_mean"][...] = flat.mean(axis=0)
        self._buffers["feat_std"][...] = flat.std(axis=0) + 1e-5

    def trainable(self) -> List[Tuple[str, Parameter]]:
        """Named parameters the optimiser updates; the tag table is frozen when tags are off."""
        return [(n, p) for n, p in self.named_parameters()
                if self.cfg.use_tags or not n.startswith("tag_emb.")]

    # -- pieces -----------------------------------------------------------------------------
    def encode(self, frames: np.ndarray) -> Tensor:
        """(B, T, F) log-mel -> audio memory e^a of shape (B, T', width)."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != self.cfg.mel_bins:
            raise DimensionError(f"captioner: expected (B, T, {self.cfg.mel_bins}) frames, got {frames.shape}")
        B, T, Fb = frames.shape
        p = self.cfg.time_pool
        if T < p:
            raise DegenerateInputError(f"captioner: {T} frames is fewer than the time pool {p}")
        x = (frames - self._buffers["feat_mean"]) / self._buffers["feat_std"]
        x = x[:, :T - T % p].reshape(B, T // p, p, Fb).mean(axis=2)
        return self.bridge(self.encoder(Tensor(x)))

    def tag_index(self, tags: Sequence[str]) -> List[int]:
        unknown = [t for t in tags if t not in self._tag_index]
        if unknown:
            raise KeyError(f"unknown tag(s) {unknown}; registry has {list(self.tag_names)}")
        return [self._tag_index[t] for t in tags]

    def fuse_tags(self, tag_sets: Sequence[Sequence[str]]) -> Optional[Tensor]:
        """Mean tag embedding per clip, shape (B, width); None when tags are disabled."""
        if not self.cfg.use_tags:
            return None
        weights = np.zeros((len(tag_sets), len(self.tag_names)))
        for i, tags in enumerate(tag_sets):
            if len(tags) == 0:
                raise DegenerateInputError(f"clip {i} has an empty tag set")
            for j in self.tag_index(sorted(set(tags))):
                weights[i, j] = 1.0
            weights[i] /= weights[i].sum()
        return ops.matmul(Tensor(weights), self.tag_emb.weight)

    def decode(self, memory: Tensor, prefixes: np.ndarray, e_g: Optional[Tensor]) -> Tensor:
        """Teacher-forced logits (B, L, V) for (B, L) prefixes starting with <BOS>."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        B, L = prefixes.shape
        if L > self.cfg.max_len + 1:
            raise DimensionError(f"captioner: prefix length {L} exceeds max_len + 1 = {self.cfg.max_len + 1}")
        x = self.word_emb(prefixes) + self.pos[:L]
        if e_g is not None:
            x = x + ops.reshape(e_g, (B, 1, self.cfg.width))
        mask = causal_mask(L)
        for block in self.blocks:
            x = block(x, memory, mask)
        return self.out(self.ln(x))

    def forward(self, frames, prefixes, tag_sets) -> Tensor:
        return self.decode(self.encode(frames), prefixes, self.fuse_tags(tag_sets))


def decode_step(model: CaptionModel, memory: Tensor, prefixes: np.ndarray, e_g: Optional[Tensor]) -> np.ndarray:
    """Next-token probabilities p_t for each prefix, shape (B, V)."""
    prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
    if np.any(prefixes[:, 0] != BOS_ID):
        raise ConfigError("prefixes must start with <BOS>")
    if np.any(prefixes == PAD_ID):
        raise ConfigError("prefix contains <PAD>")
    with no_grad():
        logits = model.decode(memory, prefixes, e_g)
        return ops.softmax(logits[:, -1, :], axis=-1).data


# -- data --------------------------------------------------------------------------------

@dataclass
class CaptionData:
    frames: np.ndarray                 # (N, T, F)
    tokens: List[List[int]]            # caption tokens without BOS/EOS
    tags: List[Tuple[str, ...]]
    ids: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.tags)

    def subset(self, idx) -> "CaptionData":
        idx = list(idx)
        return CaptionData(self.frames[idx], [self.tokens[i] for i in idx], [self.tags[i] for i in idx],
                           [self.ids[i] for i in idx] if self.ids else [])


def teacher_forcing_batch(tokens: Sequence[Sequence[int]], max_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs ``[BOS] + y`` and targets ``y + [EOS]``, right-padded with PAD."""
    seqs = [list(t)[:max_len - 1] for t in tokens]
    inputs = pad_batch([[BOS_ID] + s for s in seqs])
    targets = pad_batch([s + [EOS_ID] for s in seqs])
    return inputs, targets


def caption_loss(model: CaptionModel, frames, tokens, tag_sets) -> Tensor:
    """Per-token teacher-forced cross-entropy, PAD positions ignored."""
    inputs, targets = teacher_forcing_batch(tokens, model.cfg.max_len)
    logits = model(frames, inputs, tag_sets)
    return F.cross_entropy(logits, targets, ignore_index=PAD_ID)


def evaluate_ce(model: CaptionModel, data: CaptionData, batch_size: int = 100) -> float:
    """Token-weighted teacher-forced CE over a dataset, inference mode."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(data), batch_size):
            chunk = data.subset(range(s, min(s + batch_size, len(data))))
            n_tok = sum(min(len(t), model.cfg.max_len - 1) + 1 for t in chunk.tokens)
            total += caption_loss(model, chunk.frames, chunk.tokens, chunk.tags).item() * n_tok
            count += n_tok
    model.train(was)
    return total / count


# -- training ----------------------------------------------------------------------------

@dataclass
class CaptionTrainConfig:
    epochs: int = 25
    batch_size: int = 64
    max_lr: float = 5e-4
    min_lr: float = 5e-7
    warmup_iters: int = 0       # 0 means one epoch
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.min_lr <= self.max_lr:
            raise ConfigError(f"need 0 < min_lr <= max_lr, got {self.min_lr}, {self.max_lr}")


def warmup_exp_decay(it: int, total: int, warmup: int, max_lr: float, min_lr: float) -> float:
    """Linear warmup to max_lr, then geometric decay reaching min_lr at ``total``."""
    if it < warmup:
        return max_lr * (it + 1) / warmup
    span = max(total - warmup, 1)
    return max_lr * (min_lr / max_lr) ** (min(it - warmup, span) / span)


@dataclass
class CaptionTrainResult:
    losses: List[float]
    val_ce: List[float]          # per epoch
    best_epoch: int


def train_captioner(model: CaptionModel, train: CaptionData, val: Optional[CaptionData],
                    cfg: CaptionTrainConfig, on_epoch: Optional[Callable[[int, float], None]] = None
                    ) -> CaptionTrainResult:
    """Teacher-forced CE training; keeps the epoch with the lowest validation CE."""
    cfg.validate()
    if len(train) == 0:
        raise ConfigError("caption corpus is empty")
    model.set_feature_stats(train.frames)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.trainable(), lr=cfg.max_lr)
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    warmup = cfg.warmup_iters or per_epoch
    losses, val_ce = [], []
    best, best_epoch, best_state = math.inf, 0, None
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = rng.permutation(len(train))
        for s in range(0, len(train), cfg.batch_size):
            batch = train.subset(perm[s:s + cfg.batch_size])
            loss = caption_loss(model, batch.frames, batch.tokens, batch.tags)
            opt.zero_grad()
            loss.backward()
            opt.step(warmup_exp_decay(it, total, warmup, cfg.max_lr, cfg.min_lr))
            losses.append(loss.item())
            it += 1
        if val is not None:
            ce = evaluate_ce(model, val)
            val_ce.append(ce)
            if on_epoch:
                on_epoch(epoch, ce)
            if ce < best:
                best, best_epoch = ce, epoch
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    model.train()
    return CaptionTrainResult(losses, val_ce, best_epoch)


# -- beam search -------------------------------------------------------------------------

@dataclass
class BeamHypothesis:
    tokens: List[int]            # generated tokens after <BOS>, including <EOS> when finished
    score: float                 # raw sum of step log-probabilities
    finished: bool = False
    forced: bool = False         # force-finished at max_len without <EOS>


# step(item_indices (R,), prefixes (R, L)) -> log-probabilities (R, V)
StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def beam_search_many(step: StepFn, n_items: int, beam_size: int, max_len: int = 20,
                     bos: int = BOS_ID, eos: int = EOS_ID) -> List[BeamHypothesis]:
    """Independent beam searches for ``n_items`` inputs, batched through one step function.

    Per item: keep the ``beam_size`` best candidates by summed log-probability;
    candidates ending in <EOS> are set aside as finished.  A search stops once
    no live hypothesis can beat the best finished one (log-probabilities are
    <= 0), and hypotheses reaching ``max_len`` generated tokens are
    force-finished.  No length normalisation.
    """
    if beam_size < 1 or max_len < 2:
        raise ConfigError(f"need beam_size >= 1 and max_len >= 2, got {beam_size}, {max_len}")
    live: List[List[Tuple[List[int], float]]] = [[([], 0.0)] for _ in range(n_items)]
    finished: List[List[BeamHypothesis]] = [[] for _ in range(n_items)]
    for t in range(max_len):
        rows = [(i, seq, score) for i in range(n_items) for seq, score in live[i]]
        if not rows:
            break
        items = np.array([r[0] for r in rows])
        prefixes = np.array([[bos] + r[1] for r in rows], dtype=np.int64)
        logp = np.asarray(step(items, prefixes), dtype=np.float64)
        cand: Dict[int, List[Tuple[float, int, int]]] = {}
        for r, (i, seq, score) in enumerate(rows):
            bucket = cand.setdefault(i, [])
            for w in range(logp.shape[1]):
                if np.isfinite(logp[r, w]):
                    bucket.append((score + float(logp[r, w]), r, w))
        for i in range(n_items):
            live[i] = []
            ranked = sorted(cand.get(i, []), key=lambda c: -c[0])[:beam_size]  # stable: ties keep order
            for score, r, w in ranked:
                seq = rows[r][1] + [w]
                if w == eos:
                    finished[i].append(BeamHypothesis(seq, score, True))
                elif t == max_len - 1:
                    finished[i].append(BeamHypothesis(seq, score, True, forced=True))
                else:
                    live[i].append((seq, score))
            if finished[i] and live[i]:
                best_done = max(h.score for h in finished[i])
                if best_done >= max(s for _, s in live[i]):
                    live[i] = []
    out = []
    for i in range(n_items):
        best = finished[i][0]
        for h in finished[i][1:]:
            if h.score > best.score:
                best = h
        out.append(best)
    return out


def beam_search(step: Callable[[np.ndarray], np.ndarray], beam_size: int, max_len: int = 20,
                bos: int = BOS_ID, eos: int = EOS_ID) -> BeamHypothesis:
    """Single-input beam search; ``step(prefixes (R, L)) -> log-probs (R, V)``."""
    return beam_search_many(lambda _items, prefixes: step(prefixes), 1, beam_size, max_len, bos, eos)[0]


def greedy_decode(step: Callable[[np.ndarray], np.ndarray], max_len: int = 20,
                  bos: int = BOS_ID, eos: int = EOS_ID) -> BeamHypothesis:
    seq, score = [], 0.0
    for t in range(max_len):
        logp = np.asarray(step(np.array([[bos] + seq])))[0]
        w = int(np.argmax(logp))
        seq.append(w)
        score += float(logp[w])
        if w == eos:
            return BeamHypothesis(seq, score, True)
    return BeamHypothesis(seq, score, True, forced=True)


def generate_captions(model: CaptionModel, frames: np.ndarray, tag_sets: Sequence[Sequence[str]],
                      beam_size: int = 3, max_len: Optional[int] = None,
                      batch_size: int = 64) -> List[BeamHypothesis]:
    """Beam-search captions for a batch of clips using their tags."""
    max_len = max_len or model.cfg.max_len
    was = model.training
    model.eval()
    out: List[BeamHypothesis] = []
    try:
        with no_grad():
            for s in range(0, len(frames), batch_size):
                memory = model.encode(frames[s:s + batch_size])
                e_g = model.fuse_tags(tag_sets[s:s + batch_size])

                def step(items, prefixes, memory=memory, e_g=e_g):
                    mem = Tensor(memory.data[items])
                    eg = None if e_g is None else Tensor(e_g.data[items])
                    logits = model.decode(mem, prefixes, eg)
                    return ops.log_softmax(logits[:, -1, :], axis=-1).data

                out.extend(beam_search_many(step, memory.shape[0], beam_size, max_len))
    finally:
        model.train(was)
    return out


def hypothesis_text(h: BeamHypothesis, vocab: Vocabulary) -> str:
    words = [vocab.tokens[w] for w in h.tokens if w not in (PAD_ID, BOS_ID, EOS_ID)]
    return " ".join(words)


def caption_data(corpus, vocab: Vocabulary, frames: np.ndarray) -> CaptionData:
    items = list(corpus)
    return CaptionData(frames, [tokenize(it.caption, vocab) for it in items],
                       [tuple(it.tags) for it in items], [it.clip_id for it in items])


def save_captioner(model: CaptionModel, path) -> str:
    meta = {"kind": "captioner", "config": model.cfg.to_dict(), "vocab_size": model.vocab_size,
            "tags": list(model.tag_names)}
    return write_state_file(path, model, meta)


def load_captioner(path) -> CaptionModel:
    header, state = read_state_file(path)
    if header.get("kind") != "captioner":
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r} model, not a captioner")
    model = CaptionModel(CaptionerConfig(**header["config"]), header["vocab_size"], header["tags"])
    load_state_into(model, state, str(path))
    return model
