"""Non-autoregressive multi-task recognizer.

A memory-equipped self-attention encoder over stacked log-mel features with
four query embeddings prepended to the input:

    position 0: language query (or the true language token, teacher-style)
    position 1: emotion query
    position 2: audio-event query
    position 3: transcript-style selector (plain vs normalized text)

Positions 0..2 train with cross-entropy against the utterance labels;
positions 4..T+3 train with CTC against the symbol stream. Decoding is greedy
CTC collapse plus restricted argmax over the three label groups.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from . import numerics as nm
from .corpus import (DIGIT_WORDS, DIGITS, EMOTIONS, EVENTS, LANGS, LETTERS,
                     PERIOD, Utterance, explode_text, render_utterance)
from .errors import ContractError, DimensionError, NumericError, StateError

STACK_RECOGNIZER = 6

# Initial bias on the CTC blank logit. Stacked frames nearly match symbol
# durations, so reference alignments are blank-poor; a blank-heavy start is
# a hard-to-escape local optimum under the CTC loss.
BLANK_BIAS_INIT = -4.0


# -- vocabulary --------------------------------------------------------------


class Vocabulary:
    """Token inventory shared by the CTC head and the classification heads.

    Blank is id 0; every token group occupies a contiguous id range.
    """

    def __init__(self):
        self.tokens: list[str] = ["<blank>"]
        self.groups: dict[str, list[int]] = {}

        def grow(group: str, toks):
            ids = []
            for t in toks:
                ids.append(len(self.tokens))
                self.tokens.append(t)
            self.groups[group] = ids

        grow("letter", list(LETTERS))
        grow("digit_word", DIGIT_WORDS)
        grow("digit", list(DIGITS))
        grow("punct", [PERIOD])
        grow("lang", [f"<{l}>" for l in LANGS])
        grow("emotion", [f"<{e}>" for e in EMOTIONS])
        grow("event", [f"<{e}>" for e in EVENTS])
        grow("style", ["<ITN>", "<NoITN>"])
        grow("query", ["<LID>", "<SER>", "<AEC>"])
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        assert len(self.id_of) == len(self.tokens), "duplicate token"

    def __len__(self):
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return 0

    def text_ids(self, symbols: list[str]) -> list[int]:
        return [self.id_of[s] for s in symbols]

    def lang_id(self, lang: str) -> int:
        return self.id_of[f"<{lang}>"]

    def emotion_id(self, emotion: str) -> int:
        return self.id_of[f"<{emotion}>"]

    def event_id(self, event: str) -> int:
        return self.id_of[f"<{event}>"]

    def group_of(self, tok_id: int) -> str:
        for g, ids in self.groups.items():
            if tok_id in ids:
                return g
        return "blank" if tok_id == 0 else "unknown"


@dataclass
class EncoderConfig:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    memory_kernel: int = 15
    ffn_dim: int = 256

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class RichTranscription:
    lang: str
    emotion: str
    event: str
    text: str
    itn_applied: bool

    def as_dict(self):
        return {"lang": self.lang, "emotion": self.emotion, "event": self.event,
                "text": self.text, "itn": self.itn_applied}


# -- CTC ---------------------------------------------------------------------


def ctc_required_length(target: list[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _ctc_alpha_beta(logp: np.ndarray, target: list[int], blank: int):
    """Forward/backward tables over the blank-interleaved label sequence.

    alpha[t, s] includes the emission at t; beta[t, s] excludes it (it is the
    log-probability of completing the path from state s after emitting at t).
    """
    t_len, _ = logp.shape
    lab = np.empty(2 * len(target) + 1, dtype=np.int64)
    lab[0::2] = blank
    lab[1::2] = target
    s_len = lab.size
    ninf = -np.inf

    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = (lab[2:] != blank) & (lab[2:] != lab[:-2])

    alpha = np.full((t_len, s_len), ninf)
    alpha[0, 0] = logp[0, lab[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, lab[1]]
    for t in range(1, t_len):
        stay = alpha[t - 1]
        step = np.concatenate(([ninf], alpha[t - 1, :-1]))
        skip = np.concatenate(([ninf, ninf], alpha[t - 1, :-2]))
        skip = np.where(can_skip, skip, ninf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + logp[t, lab]

    beta = np.full((t_len, s_len), ninf)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, lab]
        stay = nxt
        step = np.concatenate((nxt[1:], [ninf]))
        skip = np.concatenate((nxt[2:], [ninf, ninf]))
        skip_ok = np.zeros(s_len, dtype=bool)
        skip_ok[:-2] = can_skip[2:]
        skip = np.where(skip_ok, skip, ninf)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)

    tail = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        tail = np.logaddexp(tail, alpha[t_len - 1, s_len - 2])
    return alpha, beta, lab, tail


def ctc_loss(log_probs: nm.Tensor, target: list[int], blank: int = 0) -> nm.Tensor:
    """Negative log-probability of all alignments of `target`, by forward DP.

    Infeasible targets (longer than the frame budget allows) yield +inf with
    no gradient, so a caller can detect and skip them.
    """
    t_len = log_probs.shape[0]
    if log_probs.ndim != 2:
        raise DimensionError(f"ctc_loss wants T x V log-probs, got {log_probs.shape}")
    if ctc_required_length(target) > t_len or (not target and t_len == 0):
        return nm.Tensor(np.inf)
    if not target:
        # single alignment: blank everywhere
        return nm.mul(nm.reduce_sum(log_probs[:, blank]), -1.0)

    logp = log_probs.data.astype(np.float64)
    alpha, beta, lab, log_p_total = _ctc_alpha_beta(logp, target, blank)
    if not np.isfinite(log_p_total):
        return nm.Tensor(np.inf)

    out = nm.Tensor(np.array(-log_p_total, dtype=log_probs.dtype),
                    requires_grad=log_probs.requires_grad,
                    op="ctc", parents=(log_probs,))
    if out.requires_grad:
        def _bw(g):
            # d(-logP)/d logp[t,k] = -sum_{s: lab(s)=k} exp(alpha+beta - logP)
            post = np.exp(alpha + beta - log_p_total)   # (T, S)
            grad = np.zeros_like(logp)
            np.add.at(grad.T, lab, post.T)
            log_probs._accumulate((-grad * float(g)).astype(log_probs.dtype))
        out._backward = _bw
    return out


def ctc_loss_bruteforce(log_probs: np.ndarray, target: list[int], blank: int = 0) -> float:
    """Exhaustive alignment enumeration; exponential, for oracle use only."""
    t_len, _ = log_probs.shape
    total = -np.inf

    def collapse(path):
        out = []
        prev = None
        for p in path:
            if p != prev and p != blank:
                out.append(p)
            prev = p
        return out

    def rec(t, path, acc):
        nonlocal total
        if t == t_len:
            if collapse(path) == list(target):
                total = np.logaddexp(total, acc)
            return
        for k in range(log_probs.shape[1]):
            rec(t + 1, path + [k], acc + log_probs[t, k])

    rec(0, [], 0.0)
    return float(-total)


def ctc_greedy_collapse(frame_ids: np.ndarray, blank: int = 0) -> list[int]:
    out = []
    prev = -1
    for k in frame_ids:
        if k != blank and k != prev:
            out.append(int(k))
        prev = int(k)
    return out


# -- model -------------------------------------------------------------------


def _init_linear(rng, fan_in, fan_out, name, params, zero=False, bias=True):
    scale = 0.0 if zero else 1.0 / np.sqrt(fan_in)
    w = nm.Tensor((rng.standard_normal((fan_in, fan_out)) * scale).astype(np.float32),
                  requires_grad=True)
    params[name + ".w"] = w
    if bias:
        b = nm.zeros((fan_out,), requires_grad=True)
        params[name + ".b"] = b
        return w, b
    return w, None


class SanmEncoder:
    """Pre-norm self-attention stack with a depthwise-conv memory branch.

    Per layer: y1 = x + Attn(LN(x)) + DWConv(V(LN(x))); y = y1 + FFN(LN(y1)).
    No positional encoding: ordering information enters through the conv.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 prefix: str, params: dict):
        self.cfg = cfg
        self.prefix = prefix
        self.params = params
        d = cfg.dim
        for i in range(cfg.depth):
            p = f"{prefix}.layer{i}"
            _init_linear(rng, d, 3 * d, p + ".qkv", params)
            _init_linear(rng, d, d, p + ".out", params)
            params[p + ".mem.k"] = nm.Tensor(
                (rng.standard_normal((cfg.memory_kernel, d)) / np.sqrt(cfg.memory_kernel)
                 ).astype(np.float32), requires_grad=True)
            _init_linear(rng, d, cfg.ffn_dim, p + ".ffn1", params)
            _init_linear(rng, cfg.ffn_dim, d, p + ".ffn2", params)
            for ln in (".ln1", ".ln2"):
                params[p + ln + ".g"] = nm.ones((d,), requires_grad=True)
                params[p + ln + ".b"] = nm.zeros((d,), requires_grad=True)

    def __call__(self, x: nm.Tensor, key_mask: np.ndarray | None = None) -> nm.Tensor:
        """x: (B, T, D); key_mask: (B, T) with 1 at valid positions."""
        cfg = self.cfg
        b, t, d = x.shape
        heads, dh = cfg.heads, d // cfg.heads
        if key_mask is not None:
            add_mask = np.where(key_mask[:, None, None, :] > 0, 0.0, -1e9)
            add_mask = np.broadcast_to(add_mask, (b, heads, t, t)).astype(np.float32)
            keep = key_mask[:, :, None].astype(np.float32)
        for i in range(cfg.depth):
            p = f"{self.prefix}.layer{i}"
            g = self.params
            if key_mask is not None:
                x = nm.mul(x, nm.Tensor(np.broadcast_to(keep, (b, t, d))))
            h = nm.layer_norm(x, g[p + ".ln1.g"], g[p + ".ln1.b"])
            qkv = nm.add(nm.matmul(h, g[p + ".qkv.w"]), g[p + ".qkv.b"])
            q = qkv[:, :, 0 * d:1 * d]
            k = qkv[:, :, 1 * d:2 * d]
            v = qkv[:, :, 2 * d:3 * d]

            def split(z):
                return nm.swapaxes(nm.reshape(z, (b, t, heads, dh)), 1, 2)

            att = nm.attention(split(q), split(k), split(v),
                               mask=add_mask if key_mask is not None else None)
            att = nm.reshape(nm.swapaxes(att, 1, 2), (b, t, d))
            att = nm.add(nm.matmul(att, g[p + ".out.w"]), g[p + ".out.b"])
            vmem = v if key_mask is None else nm.mul(
                v, nm.Tensor(np.broadcast_to(keep, (b, t, d))))
            mem = nm.depthwise_conv1d(vmem, g[p + ".mem.k"])
            x = nm.add(nm.add(x, att), mem)

            h2 = nm.layer_norm(x, g[p + ".ln2.g"], g[p + ".ln2.b"])
            f1 = nm.gelu(nm.add(nm.matmul(h2, g[p + ".ffn1.w"]), g[p + ".ffn1.b"]))
            f2 = nm.add(nm.matmul(f1, g[p + ".ffn2.w"]), g[p + ".ffn2.b"])
            x = nm.add(x, f2)
        return x


class RecognizerModel:
    NUM_QUERY_POSITIONS = 4

    def __init__(self, vocab: Vocabulary | None = None,
                 cfg: EncoderConfig | None = None, seed: int = 0):
        self.vocab = vocab or Vocabulary()
        self.cfg = cfg or EncoderConfig()
        rng = np.random.default_rng([seed, 0x5EC0])
        self.params: dict[str, nm.Tensor] = {}
        d = self.cfg.dim
        feat_dim = dsp.N_MELS * STACK_RECOGNIZER
        # input standardization; identity until a trainer fills it in
        self.feat_mu = np.zeros(feat_dim, dtype=np.float32)
        self.feat_sd = np.ones(feat_dim, dtype=np.float32)
        _init_linear(rng, feat_dim, d, "inproj", self.params)
        self.params["tok_emb"] = nm.Tensor(
            (rng.standard_normal((len(self.vocab), d)) * 0.02).astype(np.float32),
            requires_grad=True)
        self.encoder = SanmEncoder(self.cfg, rng, "enc", self.params)
        self.params["head_ln.g"] = nm.ones((d,), requires_grad=True)
        self.params["head_ln.b"] = nm.zeros((d,), requires_grad=True)
        # zero init so the untrained model emits near-uniform distributions,
        # except the blank bias. Symbols here run ~1.5-2.8 frames, so true
        # alignments contain few blanks; starting blank improbable makes the
        # early CTC path posterior track the near-uniform time-stretch
        # alignment instead of collapsing onto an all-blank template.
        _init_linear(rng, d, len(self.vocab), "head", self.params, zero=True)
        self.params["head.b"].data[self.vocab.blank] = BLANK_BIAS_INIT

    # .. plumbing ..

    def parameters(self) -> list[nm.Tensor]:
        return list(self.params.values())

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "recognizer", "config": vars(self.cfg),
                "vocab_size": len(self.vocab)}
        meta.update(extra_meta or {})
        tensors = dict(self.params)
        tensors["featnorm.mu"] = nm.Tensor(self.feat_mu)
        tensors["featnorm.sd"] = nm.Tensor(self.feat_sd)
        nm.save_tensors(path, tensors, meta=meta)

    @classmethod
    def load(cls, path) -> "RecognizerModel":
        arrays, meta = nm.load_tensors(path, with_meta=True)
        if not meta or meta.get("kind") != "recognizer":
            raise StateError(f"{path} is not a recognizer checkpoint")
        model = cls(cfg=EncoderConfig(**meta["config"]))
        for name, arr in arrays.items():
            if name == "featnorm.mu":
                model.feat_mu = arr.astype(np.float32)
            elif name == "featnorm.sd":
                model.feat_sd = arr.astype(np.float32)
            else:
                model.params[name].data = arr.astype(np.float32)
        return model

    def set_feature_norm(self, feats: list[np.ndarray]):
        """Per-dimension standardization statistics from training features."""
        allf = np.concatenate(feats, axis=0)
        self.feat_mu = allf.mean(axis=0).astype(np.float32)
        self.feat_sd = (allf.std(axis=0) + 1e-3).astype(np.float32)

    # .. forward ..

    def validate_task_tokens(self, lid_tok: int, ser_tok: int, aec_tok: int,
                             style_tok: int):
        v = self.vocab
        checks = [
            (lid_tok, ("lang",), "<LID>"),
            (ser_tok, ("emotion",), "<SER>"),
            (aec_tok, ("event",), "<AEC>"),
            (style_tok, ("style",), None),
        ]
        for tok, groups, query in checks:
            ok = v.group_of(tok) in groups or (query and tok == v.id_of[query])
            if not ok:
                raise ContractError(
                    f"token {tok} ({v.tokens[tok]}) not valid for slot {groups[0]}")

    def prepend_task_embeddings(self, x_speech: nm.Tensor, lid_tok: int,
                                ser_tok: int, aec_tok: int, style_tok: int) -> nm.Tensor:
        """(T, D) speech frames -> (T+4, D) with query rows 0..3 in front."""
        self.validate_task_tokens(lid_tok, ser_tok, aec_tok, style_tok)
        ids = [lid_tok, ser_tok, aec_tok, style_tok]
        queries = nm.embedding(self.params["tok_emb"], ids)
        if x_speech.shape[0] == 0:
            return queries
        return nm.concat([queries, x_speech], axis=0)

    def _project(self, stacked: np.ndarray) -> nm.Tensor:
        x = nm.Tensor(((stacked - self.feat_mu) / self.feat_sd).astype(np.float32))
        return nm.add(nm.matmul(x, self.params["inproj.w"]), self.params["inproj.b"])

    def forward_batch(self, feats: list[np.ndarray], task_tokens: list[tuple]) -> tuple:
        """Padded batch forward.

        feats: per-utterance (T_i, 480) stacked features; task_tokens: per
        utterance (lid, ser, aec, style). Returns (log_probs, lengths):
        log_probs (B, 4+Tmax, V) with rows beyond 4+T_i mask-padded.
        """
        b = len(feats)
        tmax = max(f.shape[0] for f in feats)
        nq = self.NUM_QUERY_POSITIONS
        d = self.cfg.dim
        batch = np.zeros((b, tmax, feats[0].shape[1]), dtype=np.float32)
        key_mask = np.zeros((b, nq + tmax), dtype=np.float32)
        for i, f in enumerate(feats):
            batch[i, :f.shape[0]] = f
            key_mask[i, :nq + f.shape[0]] = 1.0
        x = self._project(batch)

        rows = []
        for i, toks in enumerate(task_tokens):
            self.validate_task_tokens(*toks)
            rows.append(list(toks))
        queries = nm.embedding(self.params["tok_emb"], np.asarray(rows))  # (B,4,D)
        x = nm.concat([queries, x], axis=1)
        enc = self.encoder(x, key_mask=key_mask)
        h = nm.layer_norm(enc, self.params["head_ln.g"], self.params["head_ln.b"])
        logits = nm.add(nm.matmul(h, self.params["head.w"]), self.params["head.b"])
        log_probs = nm.log_softmax(logits, axis=-1)
        lengths = [f.shape[0] for f in feats]
        return log_probs, lengths

    def encode_forward(self, stacked: np.ndarray, lid_tok=None, ser_tok=None,
                       aec_tok=None, style_tok=None) -> np.ndarray:
        """Single utterance: (T,480) -> (T+4, V) probability rows."""
        v = self.vocab
        toks = (lid_tok if lid_tok is not None else v.id_of["<LID>"],
                ser_tok if ser_tok is not None else v.id_of["<SER>"],
                aec_tok if aec_tok is not None else v.id_of["<AEC>"],
                style_tok if style_tok is not None else v.id_of["<NoITN>"])
        log_probs, _ = self.forward_batch([stacked], [toks])
        probs = np.exp(log_probs.data[0])
        if not np.all(np.isfinite(probs)):
            raise NumericError("non-finite recognizer output")
        return probs

    # .. decoding ..

    def decode(self, probs: np.ndarray, itn: bool = False) -> RichTranscription:
        """probs: (4+T, V) rows; greedy CTC over speech rows, restricted
        argmax over the three label groups."""
        v = self.vocab
        nq = self.NUM_QUERY_POSITIONS

        def pick(row: np.ndarray, group: str) -> str:
            ids = v.groups[group]
            return v.tokens[ids[int(np.argmax(row[ids]))]]

        lang = pick(probs[0], "lang").strip("<>")
        emotion = pick(probs[1], "emotion").strip("<>")
        event = pick(probs[2], "event").strip("<>")
        frame_ids = probs[nq:].argmax(axis=1)
        symbols = [v.tokens[k] for k in ctc_greedy_collapse(frame_ids, v.blank)]
        return RichTranscription(lang=lang, emotion=emotion, event=event,
                                 text=join_symbols(symbols), itn_applied=itn)

    def transcribe(self, stacked: np.ndarray, lang: str | None = None,
                   itn: bool = False) -> RichTranscription:
        v = self.vocab
        lid = v.lang_id(lang) if lang else v.id_of["<LID>"]
        style = v.id_of["<ITN>"] if itn else v.id_of["<NoITN>"]
        probs = self.encode_forward(stacked, lid_tok=lid, style_tok=style)
        return self.decode(probs, itn=itn)


def join_symbols(symbols: list[str]) -> str:
    """Symbol stream back to space-separated words (inverse of explode_text
    up to word grouping: multi-char symbols become their own words, letter
    and digit runs merge)."""
    words: list[str] = []
    run = ""
    for s in symbols:
        if len(s) == 1 and s in LETTERS + DIGITS:
            run += s
        else:
            if run:
                words.append(run)
                run = ""
            if s == PERIOD and words:
                words[-1] += PERIOD
            else:
                words.append(s)
    if run:
        words.append(run)
    return " ".join(words)


# -- features and training ---------------------------------------------------


def utterance_features(w) -> np.ndarray:
    mel = dsp.log_mel(w)
    return dsp.stack_downsample(mel, STACK_RECOGNIZER).frames


def prepare_dataset(utts: list[Utterance], speakers, seed: int,
                    wav_cache: dict | None = None) -> list[dict]:
    """Render (or reuse) audio and extract stacked features plus targets."""
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
            "feat": utterance_features(w).astype(np.float32),
            "text_ids": vocab.text_ids(explode_text(u.text)),
            "itn_ids": vocab.text_ids(explode_text(u.itn_text)),
            "lang": vocab.lang_id(u.lang),
            "emotion": vocab.emotion_id(u.emotion),
            "event": vocab.event_id(u.event),
            "text": u.text,
            "itn_text": u.itn_text,
        })
    return out


def multitask_loss(model: RecognizerModel, log_probs: nm.Tensor, lengths: list[int],
                   labels: list[dict], styles: list[int],
                   ce_weight: float = 1.0, ctc_weight: float = 1.0) -> nm.Tensor:
    """Cross-entropy at the three label positions plus CTC over speech rows.

    `styles` holds the per-utterance style token id; it selects which target
    symbol stream the CTC term uses.
    """
    v = model.vocab
    nq = model.NUM_QUERY_POSITIONS
    terms = []
    for i, lab in enumerate(labels):
        for key in ("lang", "emotion", "event"):
            if key not in lab:
                raise ContractError(f"label dict missing {key!r}")
        ce_rows = log_probs[i, 0:3, :]
        picks = nm.Tensor(_one_hot([lab["lang"], lab["emotion"], lab["event"]],
                                   len(v)).astype(np.float32))
        ce = nm.mul(nm.reduce_sum(nm.mul(ce_rows, picks)), -1.0)
        target = lab["itn_ids"] if styles[i] == v.id_of["<ITN>"] else lab["text_ids"]
        ctc = ctc_loss(log_probs[i, nq:nq + lengths[i], :], target, blank=v.blank)
        if np.isinf(ctc.data):
            ctc = nm.Tensor(0.0)  # infeasible sample contributes no CTC signal
        terms.append(nm.add(nm.mul(ce, ce_weight), nm.mul(ctc, ctc_weight)))
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    return nm.mul(total, 1.0 / len(terms))


def _one_hot(ids, width):
    m = np.zeros((len(ids), width))
    m[np.arange(len(ids)), ids] = 1.0
    return m


def lid_teacher_replace(lid_query: int, truth: int, rng: np.random.Generator,
                        p: float = 0.8) -> int:
    return truth if rng.random() < p else lid_query


def evaluate_cer(model: RecognizerModel, dataset: list[dict],
                 lang_specified: bool = False, batch_size: int = 16) -> float:
    """Symbol-stream edit distance over the dataset, greedy decoding.

    Batched by length buckets; per-utterance results match encode_forward
    because padding is masked out of every layer.
    """
    from .evaluation import edit_distance
    errs, total = 0, 0
    v = model.vocab
    nq = model.NUM_QUERY_POSITIONS
    order = sorted(range(len(dataset)), key=lambda i: dataset[i]["feat"].shape[0])
    for b0 in range(0, len(order), batch_size):
        idxs = order[b0:b0 + batch_size]
        batch = [dataset[i] for i in idxs]
        toks = []
        for item in batch:
            lid = item["lang"] if lang_specified else v.id_of["<LID>"]
            toks.append((lid, v.id_of["<SER>"], v.id_of["<AEC>"],
                         v.id_of["<NoITN>"]))
        log_probs, lengths = model.forward_batch([b["feat"] for b in batch], toks)
        for i, item in enumerate(batch):
            rows = log_probs.data[i, nq:nq + lengths[i]]
            hyp = ctc_greedy_collapse(rows.argmax(axis=1), v.blank)
            d, _ = edit_distance(item["text_ids"], hyp)
            errs += d
            total += len(item["text_ids"])
    return errs / max(total, 1)


def spec_augment(feat: np.ndarray, rng: np.random.Generator,
                 fill: np.ndarray | None = None,
                 n_freq_masks: int = 2, freq_width: int = 10,
                 n_time_masks: int = 1, time_width: int = 2,
                 stack: int = STACK_RECOGNIZER) -> np.ndarray:
    """Random frequency-band and time-step masking on stacked features.

    A frequency band is blanked consistently across the frames inside each
    stack group, so the model cannot key on any single mel band; this pushes
    it toward relational (cross-frame, cross-band) decoding. `fill` should be
    the per-dimension feature mean; masked cells then normalize to zero
    downstream. Log-mel floors sit near -23, so a literal zero would read as
    loud energy.
    """
    out = feat.copy()
    t, d = out.shape
    bins = d // stack
    view = out.reshape(t, stack, bins)
    fill_v = np.zeros((stack, bins), feat.dtype) if fill is None \
        else fill.reshape(stack, bins).astype(feat.dtype)
    for _ in range(n_freq_masks):
        w = int(rng.integers(1, freq_width + 1))
        f0 = int(rng.integers(0, max(bins - w, 1)))
        view[:, :, f0:f0 + w] = fill_v[:, f0:f0 + w]
    for _ in range(n_time_masks):
        w = int(rng.integers(1, time_width + 1))
        if t > w:
            s = int(rng.integers(0, t - w))
            view[s:s + w] = fill_v
    return out


def train_recognizer(train_set: list[dict], dev_set: list[dict],
                     cfg: EncoderConfig | None = None, seed: int = 0,
                     max_epochs: int = 30, batch_size: int = 16,
                     lr: float = 3e-3, target_cer: float = 0.02,
                     lid_replace_p: float = 0.8, warmup_steps: int = 200,
                     lr_floor: float = 0.15,  # fraction of lr kept at the end
                     weight_decay: float = 0.02, augment: bool = True,
                     log=lambda s: None) -> tuple[RecognizerModel, dict]:
    """Adam + warmup/cosine schedule, early stop at dev CER <= target_cer.

    The first epoch runs shortest-first: CTC locks symbol identities in on
    short clips quickly, which drags the rest of the curve forward. Later
    epochs shuffle length-bucketed batches. Feature masking plus weight decay
    keep the model off per-clip shortcuts; the corpus is clean enough to
    memorize otherwise.
    """
    model = RecognizerModel(cfg=cfg, seed=seed)
    model.set_feature_norm([item["feat"] for item in train_set])
    v = model.vocab
    rng = np.random.default_rng([seed, 0x7EA2])
    opt = nm.Adam(model.parameters(), lr=lr, grad_clip=5.0,
                  weight_decay=weight_decay)
    steps_per_epoch = max(len(train_set) // batch_size, 1)
    total_steps = max_epochs * steps_per_epoch
    curve = {"epoch_loss": [], "dev_cer": [], "seconds": []}
    step = 0
    t_start = time.time()
    for epoch in range(max_epochs):
        # group similar lengths to keep padding small, then shuffle the batches
        order = rng.permutation(len(train_set))
        order = sorted(order, key=lambda i: train_set[i]["feat"].shape[0])
        batches = [order[b0:b0 + batch_size]
                   for b0 in range(0, steps_per_epoch * batch_size, batch_size)]
        if epoch > 0:
            rng.shuffle(batches)
        losses = []
        for idxs in batches:
            batch = [train_set[i] for i in idxs]
            if not batch:
                continue
            toks, styles = [], []
            for item in batch:
                lid = lid_teacher_replace(v.id_of["<LID>"], item["lang"], rng,
                                          p=lid_replace_p)
                style = v.id_of["<ITN>"] if rng.random() < 0.5 else v.id_of["<NoITN>"]
                toks.append((lid, v.id_of["<SER>"], v.id_of["<AEC>"], style))
                styles.append(style)
            opt.lr = nm.cosine_lr(step, total_steps, lr, warmup=warmup_steps,
                                  floor=lr_floor * lr)
            if augment:
                feats = [spec_augment(b["feat"], rng, fill=model.feat_mu)
                         for b in batch]
            else:
                feats = [b["feat"] for b in batch]
            log_probs, lengths = model.forward_batch(feats, toks)
            loss = multitask_loss(model, log_probs, lengths, batch, styles)
            nm.check_finite(loss, "recognizer loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        dev_cer = evaluate_cer(model, dev_set)
        curve["epoch_loss"].append(float(np.mean(losses)))
        curve["dev_cer"].append(dev_cer)
        curve["seconds"].append(time.time() - t_start)
        log(f"epoch {epoch}: loss {np.mean(losses):.3f} dev_cer {dev_cer:.4f}")
        if dev_cer <= target_cer:
            break
    return model, curve
