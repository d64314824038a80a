"""Discrete speech tokenizer: encoder front half + vector quantizer.

The quantizer sits in the middle of a supervised recognizer: features flow
through the first encoder stage, get snapped to the nearest codebook vector,
and continue (with a fresh positional embedding added after quantization)
through the second stage into the usual multi-task heads. Tokens therefore
carry whatever the recognition task needs them to carry, at 50 per second:
100 fps mel frames stacked in pairs, one code per stacked frame.

The codebook trains by exponential moving averages with straight-through
gradients and a commitment term; gradients never touch the code vectors.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import dsp
from . import numerics as nm
from .corpus import Utterance
from .errors import ContractError, LengthError, StateError
from .recognizer import (RecognizerModel, SanmEncoder, EncoderConfig, Vocabulary,
                         _init_linear, ctc_greedy_collapse, multitask_loss,
                         lid_teacher_replace)

STACK_TOKENIZER = 2
TOKEN_RATE = 50.0


@dataclass
class TokenizerConfig:
    depth: int = 4
    split: int = 2            # layers before the quantizer
    dim: int = 96
    heads: int = 4
    memory_kernel: int = 15
    ffn_dim: int = 192
    codebook_size: int = 256
    commitment_beta: float = 0.25
    ema_decay: float = 0.99
    max_positions: int = 512

    def __post_init__(self):
        if not (1 <= self.split <= self.depth - 1):
            raise ContractError(f"split {self.split} outside [1, {self.depth - 1}]")
        if self.dim % self.heads != 0:
            raise ContractError("dim must divide into heads")
        if self.codebook_size < 2 and self.codebook_size != 1:
            raise ContractError("codebook needs >= 1 entries")

    def half(self, first: bool) -> EncoderConfig:
        layers = self.split if first else self.depth - self.split
        return EncoderConfig(depth=layers, dim=self.dim, heads=self.heads,
                             memory_kernel=self.memory_kernel, ffn_dim=self.ffn_dim)


class VectorQuantizer:
    """Single-codebook nearest-neighbor quantizer with EMA updates."""

    def __init__(self, k: int, dim: int, rng: np.random.Generator,
                 decay: float = 0.99):
        self.k = k
        self.dim = dim
        self.decay = decay
        self.vectors = (rng.standard_normal((k, dim)) * 0.5).astype(np.float32)
        self.ema_counts = np.ones(k, dtype=np.float64)
        self.ema_sums = self.vectors.astype(np.float64).copy()
        self.epoch_usage = np.zeros(k, dtype=np.int64)

    def assign(self, h: np.ndarray) -> np.ndarray:
        """Nearest code per row; ties resolve to the lowest index."""
        if h.size == 0:
            raise LengthError("cannot quantize an empty feature matrix")
        d2 = (h * h).sum(axis=1, keepdims=True) \
            - 2.0 * h @ self.vectors.T \
            + (self.vectors * self.vectors).sum(axis=1)
        return np.argmin(d2, axis=1)

    def ema_update(self, h: np.ndarray, ids: np.ndarray, decay: float | None = None):
        decay = self.decay if decay is None else decay
        counts = np.bincount(ids, minlength=self.k).astype(np.float64)
        sums = np.zeros_like(self.ema_sums)
        np.add.at(sums, ids, h.astype(np.float64))
        self.ema_counts = decay * self.ema_counts + (1 - decay) * counts
        self.ema_sums = decay * self.ema_sums + (1 - decay) * sums
        self.epoch_usage += counts.astype(np.int64)
        nonzero = self.ema_counts > 1e-6
        self.vectors[nonzero] = (self.ema_sums[nonzero]
                                 / self.ema_counts[nonzero, None]).astype(np.float32)

    def reseed_dead(self, pool: np.ndarray, rng: np.random.Generator) -> int:
        """Replace codes unused this epoch with random rows from `pool`."""
        dead = np.flatnonzero(self.epoch_usage == 0)
        for k in dead:
            row = pool[int(rng.integers(0, pool.shape[0]))]
            self.vectors[k] = row.astype(np.float32)
            self.ema_sums[k] = row.astype(np.float64)
            self.ema_counts[k] = 1.0
        self.epoch_usage[:] = 0
        return dead.size

    def usage_entropy(self) -> float:
        p = self.ema_counts / self.ema_counts.sum()
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())


def straight_through(h: nm.Tensor, q_data: np.ndarray) -> nm.Tensor:
    """Output the quantized values, pass gradients through untouched."""
    out = nm.Tensor(q_data.astype(h.dtype), requires_grad=h.requires_grad,
                    op="straight_through", parents=(h,))
    if out.requires_grad:
        out._backward = lambda g: h._accumulate(g)
    return out


def commitment_loss(h: nm.Tensor, q_data: np.ndarray, beta: float) -> nm.Tensor:
    """beta * mean((h - stop_grad(q))^2); pulls the encoder toward its codes."""
    diff = h.data - q_data
    out = nm.Tensor(np.array(beta * (diff * diff).mean(), dtype=h.dtype),
                    requires_grad=h.requires_grad, op="commitment", parents=(h,))
    if out.requires_grad:
        scale = 2.0 * beta / diff.size

        def _bw(g):
            h._accumulate((scale * float(g)) * diff.astype(h.dtype))
        out._backward = _bw
    return out


class TokenizerModel:
    NUM_QUERY_POSITIONS = 4

    def __init__(self, cfg: TokenizerConfig | None = None, seed: int = 0):
        self.cfg = cfg or TokenizerConfig()
        self.vocab = Vocabulary()
        rng = np.random.default_rng([seed, 0x70CE])
        self.params: dict[str, nm.Tensor] = {}
        d = self.cfg.dim
        feat_dim = dsp.N_MELS * STACK_TOKENIZER
        _init_linear(rng, feat_dim, d, "inproj", self.params)
        self.enc1 = SanmEncoder(self.cfg.half(first=True), rng, "enc1", self.params)
        self.quantizer = VectorQuantizer(self.cfg.codebook_size, d, rng,
                                         decay=self.cfg.ema_decay)
        self.params["posemb"] = nm.Tensor(
            (rng.standard_normal((self.cfg.max_positions, d)) * 0.02).astype(np.float32),
            requires_grad=True)
        self.params["tok_emb"] = nm.Tensor(
            (rng.standard_normal((len(self.vocab), d)) * 0.02).astype(np.float32),
            requires_grad=True)
        self.enc2 = SanmEncoder(self.cfg.half(first=False), rng, "enc2", self.params)
        self.params["head_ln.g"] = nm.ones((d,), requires_grad=True)
        self.params["head_ln.b"] = nm.zeros((d,), requires_grad=True)
        _init_linear(rng, d, len(self.vocab), "head", self.params, zero=True)
        self.trained = False

    def parameters(self):
        return list(self.params.values())

    # .. persistence ..

    def save(self, path, extra_meta: dict | None = None):
        tensors = dict(self.params)
        tensors["codebook.vectors"] = nm.Tensor(self.quantizer.vectors)
        tensors["codebook.counts"] = nm.Tensor(self.quantizer.ema_counts.astype(np.float32))
        tensors["codebook.sums"] = nm.Tensor(self.quantizer.ema_sums.astype(np.float32))
        meta = {"kind": "tokenizer", "config": vars(self.cfg), "trained": self.trained}
        meta.update(extra_meta or {})
        nm.save_tensors(path, tensors, meta=meta)

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        arrays, meta = nm.load_tensors(path, with_meta=True)
        if not meta or meta.get("kind") != "tokenizer":
            raise StateError(f"{path} is not a tokenizer checkpoint")
        model = cls(cfg=TokenizerConfig(**meta["config"]))
        for name, arr in arrays.items():
            if name == "codebook.vectors":
                model.quantizer.vectors = arr.astype(np.float32)
            elif name == "codebook.counts":
                model.quantizer.ema_counts = arr.astype(np.float64)
            elif name == "codebook.sums":
                model.quantizer.ema_sums = arr.astype(np.float64)
            else:
                model.params[name].data = arr.astype(np.float32)
        model.trained = bool(meta.get("trained", False))
        return model

    # .. forward ..

    def encode_stage1(self, feats: list[np.ndarray]):
        """Features -> pre-quantization hidden states.

        Returns (h, key_mask, lengths): h (B, Tmax, D) with padded rows zeroed.
        """
        b = len(feats)
        tmax = max(f.shape[0] for f in feats)
        batch = np.zeros((b, tmax, feats[0].shape[1]), dtype=np.float32)
        mask = np.zeros((b, tmax), dtype=np.float32)
        for i, f in enumerate(feats):
            batch[i, :f.shape[0]] = f
            mask[i, :f.shape[0]] = 1.0
        x = nm.add(nm.matmul(nm.Tensor(batch), self.params["inproj.w"]),
                   self.params["inproj.b"])
        h = self.enc1(x, key_mask=mask)
        return h, mask, [f.shape[0] for f in feats]

    def quantize_batch(self, h: nm.Tensor, mask: np.ndarray):
        """Nearest-code lookup on valid positions; padded rows get code 0
        (they stay masked downstream)."""
        b, t, d = h.shape
        flat = h.data.reshape(-1, d)
        valid = mask.reshape(-1) > 0
        ids = np.zeros(b * t, dtype=np.int64)
        ids[valid] = self.quantizer.assign(flat[valid])
        q_data = self.quantizer.vectors[ids].reshape(b, t, d)
        q_data = q_data * mask[:, :, None]
        return ids.reshape(b, t), q_data

    def forward_batch(self, feats: list[np.ndarray], task_tokens: list[tuple]):
        """Full path for training; returns (log_probs, lengths, ids, commit, h)."""
        h, mask, lengths = self.encode_stage1(feats)
        b, t, d = h.shape
        ids, q_data = self.quantize_batch(h, mask)
        commit = commitment_loss(h, q_data, self.cfg.commitment_beta)
        q = straight_through(h, q_data)
        q = nm.add(q, self.params["posemb"][0:t, :])

        rows = [list(toks) for toks in task_tokens]
        queries = nm.embedding(self.params["tok_emb"], np.asarray(rows))
        full_mask = np.concatenate(
            [np.ones((b, self.NUM_QUERY_POSITIONS), dtype=np.float32), mask], axis=1)
        x = nm.concat([queries, q], axis=1)
        enc = self.enc2(x, key_mask=full_mask)
        hh = nm.layer_norm(enc, self.params["head_ln.g"], self.params["head_ln.b"])
        logits = nm.add(nm.matmul(hh, self.params["head.w"]), self.params["head.b"])
        return nm.log_softmax(logits, axis=-1), lengths, ids, commit, h, mask

    # .. the tokenizer proper ..

    def tokenize_features(self, feat: np.ndarray) -> list[int]:
        if not self.trained:
            raise StateError("tokenizer is untrained; train or load a checkpoint first")
        h, mask, lengths = self.encode_stage1([feat])
        ids, _ = self.quantize_batch(h, mask)
        return [int(x) for x in ids[0, :lengths[0]]]

    def tokenize(self, w: dsp.Waveform) -> list[int]:
        return self.tokenize_features(waveform_features(w))


def waveform_features(w: dsp.Waveform) -> np.ndarray:
    mel = dsp.log_mel(w)
    return dsp.stack_downsample(mel, STACK_TOKENIZER).frames.astype(np.float32)


def prepare_token_dataset(utts: list[Utterance], speakers, seed: int,
                          wav_cache: dict | None = None) -> list[dict]:
    from .corpus import explode_text, render_utterance
    vocab = Vocabulary()
    out = []
    for u in utts:
        if wav_cache is not None and u.id in wav_cache:
            w = wav_cache[u.id]
        else:
            w = render_utterance(u, speakers[u.speaker], seed=seed)
            if wav_cache is not None:
                wav_cache[u.id] = w
        out.append({
            "id": u.id,
            "feat": waveform_features(w),
            "text_ids": vocab.text_ids(explode_text(u.text)),
            "itn_ids": vocab.text_ids(explode_text(u.itn_text)),
            "lang": vocab.lang_id(u.lang),
            "emotion": vocab.emotion_id(u.emotion),
            "event": vocab.event_id(u.event),
            "text": u.text,
            "itn_text": u.itn_text,
        })
    return out


def evaluate_token_cer(model: TokenizerModel, dataset: list[dict]) -> float:
    """CER through the full quantized path with greedy CTC decoding."""
    from .evaluation import edit_distance
    v = model.vocab
    errs = total = 0
    for item in dataset:
        toks = (v.id_of["<LID>"], v.id_of["<SER>"], v.id_of["<AEC>"], v.id_of["<NoITN>"])
        log_probs, lengths, _, _, _, _ = model.forward_batch([item["feat"]], [toks])
        rows = log_probs.data[0, model.NUM_QUERY_POSITIONS:
                              model.NUM_QUERY_POSITIONS + lengths[0]]
        hyp = ctc_greedy_collapse(rows.argmax(axis=1), v.blank)
        d, _ = edit_distance(item["text_ids"], hyp)
        errs += d
        total += len(item["text_ids"])
    return errs / max(total, 1)


def train_tokenizer(train_set: list[dict], dev_set: list[dict],
                    cfg: TokenizerConfig | None = None, seed: int = 0,
                    max_epochs: int = 20, batch_size: int = 16, lr: float = 1e-3,
                    target_cer: float = 0.04, log=lambda s: None):
    """End-to-end training of encoder + codebook + heads.

    Commitment loss joins the multitask objective; the codebook moves by EMA
    after every step; codes unused for a whole epoch reseed from a pool of
    recent encoder outputs.
    """
    model = TokenizerModel(cfg=cfg, seed=seed)
    v = model.vocab
    rng = np.random.default_rng([seed, 0x70AD])
    opt = nm.Adam(model.parameters(), lr=lr, grad_clip=5.0)
    steps_per_epoch = max(len(train_set) // batch_size, 1)
    total_steps = max_epochs * steps_per_epoch
    curve = {"epoch_loss": [], "commit": [], "dev_cer": [], "entropy": [],
             "reseeded": [], "seconds": []}
    step = 0
    t_start = time.time()
    for epoch in range(max_epochs):
        order = rng.permutation(len(train_set))
        order = sorted(order, key=lambda i: train_set[i]["feat"].shape[0])
        batches = [order[b0:b0 + batch_size]
                   for b0 in range(0, steps_per_epoch * batch_size, batch_size)]
        rng.shuffle(batches)
        losses, commits = [], []
        pool = None
        for idxs in batches:
            batch = [train_set[i] for i in idxs]
            if not batch:
                continue
            toks, styles = [], []
            for item in batch:
                lid = lid_teacher_replace(v.id_of["<LID>"], item["lang"], rng)
                style = v.id_of["<ITN>"] if rng.random() < 0.5 else v.id_of["<NoITN>"]
                toks.append((lid, v.id_of["<SER>"], v.id_of["<AEC>"], style))
                styles.append(style)
            opt.lr = nm.cosine_lr(step, total_steps, lr, warmup=steps_per_epoch // 2)
            log_probs, lengths, ids, commit, h, mask = model.forward_batch(
                [b["feat"] for b in batch], toks)
            task = multitask_loss(model, log_probs, lengths, batch, styles)
            loss = nm.add(task, commit)
            nm.check_finite(loss, "tokenizer loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            valid = mask.reshape(-1) > 0
            flat_h = h.data.reshape(-1, model.cfg.dim)[valid]
            model.quantizer.ema_update(flat_h, ids.reshape(-1)[valid])
            pool = flat_h
            losses.append(task.item())
            commits.append(commit.item())
            step += 1
        reseeded = model.quantizer.reseed_dead(pool, rng) if pool is not None else 0
        model.trained = True
        dev_cer = evaluate_token_cer(model, dev_set)
        curve["epoch_loss"].append(float(np.mean(losses)))
        curve["commit"].append(float(np.mean(commits)))
        curve["dev_cer"].append(dev_cer)
        curve["entropy"].append(model.quantizer.usage_entropy())
        curve["reseeded"].append(int(reseeded))
        curve["seconds"].append(time.time() - t_start)
        log(f"epoch {epoch}: loss {np.mean(losses):.3f} commit {np.mean(commits):.4f} "
            f"dev_cer {dev_cer:.4f} entropy {curve['entropy'][-1]:.2f}")
        if dev_cer <= target_cer:
            break
    return model, curve


# -- semantic probe ----------------------------------------------------------


class TokenProbe:
    """Frozen token embedding + 2-layer encoder + CTC head.

    Measures how much transcript the token ids alone still carry.
    """

    def __init__(self, codebook: np.ndarray, seed: int = 0, dim: int = 64):
        self.vocab = Vocabulary()
        rng = np.random.default_rng([seed, 0x9B0E])
        self.params: dict[str, nm.Tensor] = {}
        k, cdim = codebook.shape
        # frozen: code vectors projected once into the probe width
        proj = (rng.standard_normal((cdim, dim)) / np.sqrt(cdim)).astype(np.float32)
        self.frozen_emb = (codebook @ proj).astype(np.float32)
        self.encoder = SanmEncoder(EncoderConfig(depth=2, dim=dim, heads=4,
                                                 memory_kernel=15, ffn_dim=128),
                                   rng, "probe", self.params)
        self.params["ln.g"] = nm.ones((dim,), requires_grad=True)
        self.params["ln.b"] = nm.zeros((dim,), requires_grad=True)
        _init_linear(rng, dim, len(self.vocab), "head", self.params, zero=True)

    def forward(self, token_batch: list[list[int]]):
        b = len(token_batch)
        tmax = max(len(t) for t in token_batch)
        ids = np.zeros((b, tmax), dtype=np.int64)
        mask = np.zeros((b, tmax), dtype=np.float32)
        for i, t in enumerate(token_batch):
            ids[i, :len(t)] = t
            mask[i, :len(t)] = 1.0
        x = nm.Tensor(self.frozen_emb[ids])
        enc = self.encoder(x, key_mask=mask)
        h = nm.layer_norm(enc, self.params["ln.g"], self.params["ln.b"])
        logits = nm.add(nm.matmul(h, self.params["head.w"]), self.params["head.b"])
        return nm.log_softmax(logits, axis=-1), [len(t) for t in token_batch]


def train_probe(pairs: list[tuple[list[int], list[int]]], seed: int,
                codebook: np.ndarray, epochs: int = 8, batch_size: int = 16,
                lr: float = 2e-3, log=lambda s: None) -> TokenProbe:
    """pairs: (token ids, target text ids)."""
    from .recognizer import ctc_loss
    probe = TokenProbe(codebook, seed=seed)
    params = list(probe.params.values())
    opt = nm.Adam(params, lr=lr, grad_clip=5.0)
    rng = np.random.default_rng([seed, 0x9B1E])
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for b0 in range(0, len(pairs) - batch_size + 1, batch_size):
            batch = [pairs[i] for i in order[b0:b0 + batch_size]]
            log_probs, lengths = probe.forward([p[0] for p in batch])
            terms = []
            for i, (toks, target) in enumerate(batch):
                l = ctc_loss(log_probs[i, 0:lengths[i], :], target)
                if not np.isinf(l.data):
                    terms.append(l)
            if not terms:
                continue
            loss = terms[0]
            for t in terms[1:]:
                loss = nm.add(loss, t)
            loss = nm.mul(loss, 1.0 / len(terms))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log(f"probe epoch {epoch}: loss {np.mean(losses):.3f}")
    return probe


def probe_cer(probe: TokenProbe, pairs: list[tuple[list[int], list[int]]]) -> float:
    from .evaluation import edit_distance
    errs = total = 0
    for toks, target in pairs:
        log_probs, lengths = probe.forward([toks])
        rows = log_probs.data[0, :lengths[0]]
        hyp = ctc_greedy_collapse(rows.argmax(axis=1), probe.vocab.blank)
        d, _ = edit_distance(target, hyp)
        errs += d
        total += len(target)
    return errs / max(total, 1)
