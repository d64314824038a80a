"""Autoregressive text-to-speech-token language model.

A causal transformer over a mixed vocabulary: text symbols, discrete speech
tokens in a disjoint id range, and a handful of structural specials. Training
is teacher-forced with the loss restricted to speech-token and end-of-sequence
positions; generation samples from the speech sublattice only.

Sequence layouts follow two shapes: voice-continuation (prompt text and prompt
speech tokens precede the new text, generation continues the prompt audio) and
cross-lingual (text only, no prompt material in the LM input).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import (DIGITS, DIGIT_WORDS, EMOTIONS, LETTERS, PERIOD,
                     explode_text)
from .errors import (ContractError, LengthError, ParameterError, ParseError,
                     StateError, VocabularyError)

MARKER_POINTS = ("[laughter]", "[breath]")
MARKER_SPANS = (("<laughter>", "</laughter>"), ("<strong>", "</strong>"))


class LMVocabulary:
    """Text ids, speech-token ids, and specials in disjoint ranges."""

    def __init__(self, codebook_size: int = 256):
        self.codebook_size = codebook_size
        text = ["<pad>"]
        text += list(LETTERS) + list(DIGIT_WORDS) + list(DIGITS) + [PERIOD]
        text += list(MARKER_POINTS)
        for open_tag, close_tag in MARKER_SPANS:
            text += [open_tag, close_tag]
        text += [f"<style:{e}>" for e in EMOTIONS] + ["<endofprompt>"]
        self.text_tokens = text
        specials = ["<S>", "<T>", "<E>", "<L1>", "<L2>"]
        self.tokens = text + specials
        self.speech_base = len(self.tokens)
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        self.pad = self.id_of["<pad>"]
        self.start = self.id_of["<S>"]
        self.text_end = self.id_of["<T>"]
        self.eos = self.id_of["<E>"]

    def __len__(self):
        return self.speech_base + self.codebook_size

    def speech_id(self, code: int) -> int:
        if not 0 <= code < self.codebook_size:
            raise VocabularyError(f"speech code {code} outside codebook")
        return self.speech_base + code

    def speech_code(self, token_id: int) -> int:
        if not self.is_speech(token_id):
            raise VocabularyError(f"id {token_id} is not a speech token")
        return token_id - self.speech_base

    def is_speech(self, token_id: int) -> bool:
        return self.speech_base <= token_id < len(self)

    def is_text(self, token_id: int) -> bool:
        return 0 < token_id < len(self.text_tokens)

    def lang_id(self, lang: str) -> int:
        if f"<{lang}>" not in self.id_of:
            raise VocabularyError(f"unknown language {lang!r}")
        return self.id_of[f"<{lang}>"]

    def text_token_ids(self, text: str) -> list[int]:
        return [self.id_of[s] for s in explode_text(text)]


@dataclass
class TokenLMSequence:
    ids: list[int]
    boundary: int

    def __post_init__(self):
        if not 0 <= self.boundary <= len(self.ids):
            raise ContractError("boundary outside sequence")


def _check_sequence(seq: TokenLMSequence, vocab: LMVocabulary):
    for i, t in enumerate(seq.ids[:seq.boundary]):
        if vocab.is_speech(t):
            raise ContractError(f"speech token before boundary at {i}")
    if vocab.eos in seq.ids[:-1]:
        raise ContractError("end-of-sequence token not terminal")


def build_icl_sequence(prompt_text: str, prompt_tokens: list[int],
                       input_text: str, lang: str = "L1",
                       vocab: LMVocabulary | None = None) -> TokenLMSequence:
    """Voice-continuation layout: the prompt's speech tokens come last so
    generation extends them directly."""
    vocab = vocab or LMVocabulary()
    if not input_text:
        raise ContractError("input_text must be non-empty")
    ids = [vocab.start, vocab.lang_id(lang)]
    if prompt_text:
        ids += vocab.text_token_ids(prompt_text)
    ids += vocab.text_token_ids(input_text)
    ids.append(vocab.text_end)
    boundary = len(ids)
    ids += [vocab.speech_id(c) for c in prompt_tokens]
    seq = TokenLMSequence(ids, boundary)
    _check_sequence(seq, vocab)
    return seq


def build_crosslingual_sequence(input_text: str, target_lang: str,
                                vocab: LMVocabulary | None = None) -> TokenLMSequence:
    """Text-only layout: no prompt text, no prompt tokens in the LM input."""
    vocab = vocab or LMVocabulary()
    if not input_text:
        raise ContractError("input_text must be non-empty")
    ids = [vocab.start, vocab.lang_id(target_lang)]
    ids += vocab.text_token_ids(input_text)
    ids.append(vocab.text_end)
    seq = TokenLMSequence(ids, len(ids))
    _check_sequence(seq, vocab)
    return seq


def build_training_sequence(text_ids: list[int], speech_codes: list[int],
                            lang: str, vocab: LMVocabulary) -> TokenLMSequence:
    ids = [vocab.start, vocab.lang_id(lang)]
    ids += text_ids
    ids.append(vocab.text_end)
    boundary = len(ids)
    ids += [vocab.speech_id(c) for c in speech_codes]
    ids.append(vocab.eos)
    return TokenLMSequence(ids, boundary)


# -- instruction parsing -----------------------------------------------------


@dataclass
class Instruction:
    style_text: str | None
    content_text: str
    markers: list = field(default_factory=list)  # dicts {kind, start, end}


def parse_instruction(raw_text: str) -> Instruction:
    """Split an instruction-prefixed text and lift inline markers out.

    Marker positions index into the cleaned content text. Span offsets refer
    to the covered substring; point markers have start == end.
    """
    sep = "<endofprompt>"
    if sep in raw_text:
        idx = raw_text.index(sep)
        style: str | None = raw_text[:idx]
        content_raw = raw_text[idx + len(sep):]
    else:
        style = None
        content_raw = raw_text

    markers: list[dict] = []
    out: list[str] = []
    stack: list[tuple[str, int, int]] = []  # (open tag, raw offset, clean offset)
    i = 0
    n = len(content_raw)
    while i < n:
        matched = False
        for tag in MARKER_POINTS:
            if content_raw.startswith(tag, i):
                pos = len("".join(out).rstrip())
                markers.append({"kind": tag.strip("[]"), "start": pos, "end": pos})
                i += len(tag)
                matched = True
                break
        if matched:
            continue
        for open_tag, close_tag in MARKER_SPANS:
            if content_raw.startswith(open_tag, i):
                stack.append((open_tag, i, len("".join(out))))
                i += len(open_tag)
                matched = True
                break
            if content_raw.startswith(close_tag, i):
                if not stack or stack[-1][0] != open_tag:
                    raise ParseError(f"unmatched {close_tag}", offset=i)
                tag, _, clean_start = stack.pop()
                kind = "laugh-span" if tag == "<laughter>" else "strong"
                markers.append({"kind": kind, "start": clean_start,
                                "end": len("".join(out))})
                i += len(close_tag)
                matched = True
                break
        if matched:
            continue
        out.append(content_raw[i])
        i += 1
    if stack:
        tag, raw_off, _ = stack[-1]
        raise ParseError(f"unclosed {tag}", offset=raw_off)
    content = "".join(out)
    # strip whitespace left behind by removed point markers
    cleaned = content.rstrip()
    return Instruction(style_text=style, content_text=cleaned, markers=markers)


def instruction_token_ids(ins: Instruction, vocab: LMVocabulary) -> list[int]:
    """Token stream for the instruct-mode text section: style token, then
    content symbols with marker-control tokens inline."""
    ids: list[int] = []
    if ins.style_text is not None:
        styled = ins.style_text.strip().rstrip(".").lower()
        tok = f"<style:{styled}>"
        if tok not in vocab.id_of:
            raise VocabularyError(f"unknown style {ins.style_text!r}")
        ids.append(vocab.id_of[tok])
        ids.append(vocab.id_of["<endofprompt>"])

    opens = sorted(
        (m for m in ins.markers if m["kind"] in ("strong", "laugh-span")),
        key=lambda m: m["start"])
    content = ins.content_text
    events: list[tuple[int, int, str]] = []  # (char pos, order, token)
    for m in ins.markers:
        if m["kind"] in ("laughter", "breath"):
            events.append((m["end"], 1, f"[{m['kind']}]"))
        else:
            open_tag = "<laughter>" if m["kind"] == "laugh-span" else "<strong>"
            close_tag = "</" + open_tag[1:]
            events.append((m["start"], 0, open_tag))
            events.append((m["end"], 1, close_tag))
    events.sort(key=lambda e: (e[0], e[1]))
    ei = 0
    pos = 0
    for pos in range(len(content) + 1):
        while ei < len(events) and events[ei][0] == pos:
            ids.append(vocab.id_of[events[ei][2]])
            ei += 1
        if pos < len(content):
            ch = content[pos]
            if ch.isspace():
                continue
            word = _word_at(content, pos)
            if word is not None:
                start, text_word = word
                if pos == start:
                    ids += vocab.text_token_ids(text_word)
            # non-initial chars of a recognized word are consumed by the
            # word-level branch above; single symbols fall through there too
    return ids


def _word_at(content: str, pos: int):
    """The whitespace-delimited word covering pos, as (start, word)."""
    if content[pos].isspace():
        return None
    start = pos
    while start > 0 and not content[start - 1].isspace():
        start -= 1
    end = pos
    while end < len(content) and not content[end].isspace():
        end += 1
    return start, content[start:end]


# -- the model ---------------------------------------------------------------


@dataclass
class LMConfig:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    max_len: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ContractError("dim must divide into heads")


class TokenLM:
    def __init__(self, vocab: LMVocabulary | None = None,
                 cfg: LMConfig | None = None, seed: int = 0):
        self.vocab = vocab or LMVocabulary()
        self.cfg = cfg or LMConfig()
        rng = np.random.default_rng([seed, 0x71BA])
        d = self.cfg.dim
        self.params: dict[str, nm.Tensor] = {}
        self.params["tok_emb"] = nm.Tensor(
            (rng.standard_normal((len(self.vocab), d)) * 0.02).astype(np.float32),
            requires_grad=True)
        self.params["pos_emb"] = nm.Tensor(
            (rng.standard_normal((self.cfg.max_len, d)) * 0.02).astype(np.float32),
            requires_grad=True)
        for i in range(self.cfg.depth):
            p = f"layer{i}"
            _lin(rng, d, 3 * d, p + ".qkv", self.params)
            _lin(rng, d, d, p + ".out", self.params)
            _lin(rng, d, 4 * d, p + ".ffn1", self.params)
            _lin(rng, 4 * d, d, p + ".ffn2", self.params)
            for ln in (".ln1", ".ln2"):
                self.params[p + ln + ".g"] = nm.ones((d,), requires_grad=True)
                self.params[p + ln + ".b"] = nm.zeros((d,), requires_grad=True)
        self.params["final_ln.g"] = nm.ones((d,), requires_grad=True)
        self.params["final_ln.b"] = nm.zeros((d,), requires_grad=True)
        _lin(rng, d, len(self.vocab), "head", self.params)
        self.trained = False

    def parameters(self):
        return list(self.params.values())

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "token_lm", "config": vars(self.cfg),
                "codebook_size": self.vocab.codebook_size,
                "trained": self.trained}
        meta.update(extra_meta or {})
        nm.save_tensors(path, self.params, meta=meta)

    @classmethod
    def load(cls, path) -> "TokenLM":
        arrays, meta = nm.load_tensors(path, with_meta=True)
        if not meta or meta.get("kind") != "token_lm":
            raise StateError(f"{path} is not a token LM checkpoint")
        model = cls(vocab=LMVocabulary(meta["codebook_size"]),
                    cfg=LMConfig(**meta["config"]))
        for name, arr in arrays.items():
            model.params[name].data = arr.astype(np.float32)
        model.trained = bool(meta.get("trained", False))
        return model

    # .. forward (graph path, used in training) ..

    def forward(self, ids_batch: np.ndarray, dropout_rng=None) -> nm.Tensor:
        """(B, T) int ids -> (B, T, V) next-token log-probs."""
        b, t = ids_batch.shape
        if t > self.cfg.max_len:
            raise LengthError(f"sequence length {t} exceeds {self.cfg.max_len}")
        d = self.cfg.dim
        heads, dh = self.cfg.heads, d // self.cfg.heads
        g = self.params
        x = nm.add(nm.embedding(g["tok_emb"], ids_batch),
                   g["pos_emb"][0:t, :])
        causal = np.triu(np.full((t, t), -1e9, dtype=np.float32), k=1)
        causal = np.broadcast_to(causal, (b, heads, t, t))
        for i in range(self.cfg.depth):
            p = f"layer{i}"
            h = nm.layer_norm(x, g[p + ".ln1.g"], g[p + ".ln1.b"])
            qkv = nm.add(nm.matmul(h, g[p + ".qkv.w"]), g[p + ".qkv.b"])
            q = qkv[:, :, 0 * d:1 * d]
            k = qkv[:, :, 1 * d:2 * d]
            v = qkv[:, :, 2 * d:3 * d]

            def split(z):
                return nm.swapaxes(nm.reshape(z, (b, t, heads, dh)), 1, 2)

            att = nm.attention(split(q), split(k), split(v), mask=causal)
            att = nm.reshape(nm.swapaxes(att, 1, 2), (b, t, d))
            att = nm.add(nm.matmul(att, g[p + ".out.w"]), g[p + ".out.b"])
            if dropout_rng is not None and self.cfg.dropout > 0:
                att = nm.dropout(att, self.cfg.dropout, dropout_rng)
            x = nm.add(x, att)
            h2 = nm.layer_norm(x, g[p + ".ln2.g"], g[p + ".ln2.b"])
            f1 = nm.gelu(nm.add(nm.matmul(h2, g[p + ".ffn1.w"]), g[p + ".ffn1.b"]))
            f2 = nm.add(nm.matmul(f1, g[p + ".ffn2.w"]), g[p + ".ffn2.b"])
            if dropout_rng is not None and self.cfg.dropout > 0:
                f2 = nm.dropout(f2, self.cfg.dropout, dropout_rng)
            x = nm.add(x, f2)
        h = nm.layer_norm(x, g["final_ln.g"], g["final_ln.b"])
        logits = nm.add(nm.matmul(h, g["head.w"]), g["head.b"])
        return nm.log_softmax(logits, axis=-1)

    # .. forward (numpy path with KV cache, used in sampling) ..

    def _np_step(self, token_id: int, pos: int, cache: list) -> np.ndarray:
        """Advance one position; returns logits for the next token."""
        g = self.params
        d = self.cfg.dim
        heads, dh = self.cfg.heads, d // self.cfg.heads
        x = g["tok_emb"].data[token_id] + g["pos_emb"].data[pos]
        for i in range(self.cfg.depth):
            p = f"layer{i}"
            h = _np_ln(x, g[p + ".ln1.g"].data, g[p + ".ln1.b"].data)
            qkv = h @ g[p + ".qkv.w"].data + g[p + ".qkv.b"].data
            q, k, v = qkv[0:d], qkv[d:2 * d], qkv[2 * d:3 * d]
            ck, cv = cache[i]
            ck.append(k)
            cv.append(v)
            ks = np.asarray(ck)          # (T_so_far, D)
            vs = np.asarray(cv)
            att = np.empty(d, dtype=np.float32)
            qh = q.reshape(heads, dh)
            kh = ks.reshape(-1, heads, dh)
            vh = vs.reshape(-1, heads, dh)
            for hh in range(heads):
                scores = kh[:, hh, :] @ qh[hh] / np.sqrt(dh)
                scores -= scores.max()
                w = np.exp(scores)
                w /= w.sum()
                att[hh * dh:(hh + 1) * dh] = w @ vh[:, hh, :]
            x = x + att @ g[p + ".out.w"].data + g[p + ".out.b"].data
            h2 = _np_ln(x, g[p + ".ln2.g"].data, g[p + ".ln2.b"].data)
            f1 = _np_gelu(h2 @ g[p + ".ffn1.w"].data + g[p + ".ffn1.b"].data)
            x = x + f1 @ g[p + ".ffn2.w"].data + g[p + ".ffn2.b"].data
        h = _np_ln(x, g["final_ln.g"].data, g["final_ln.b"].data)
        return h @ g["head.w"].data + g["head.b"].data


def _lin(rng, fan_in, fan_out, name, params):
    params[name + ".w"] = nm.Tensor(
        (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(np.float32),
        requires_grad=True)
    params[name + ".b"] = nm.zeros((fan_out,), requires_grad=True)


def _np_ln(x, gamma, beta, eps=1e-5):
    mu = x.mean()
    var = x.var()
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def _np_gelu(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


# -- training ----------------------------------------------------------------


def lm_loss(model: TokenLM, sequences: list[TokenLMSequence],
            dropout_rng=None) -> nm.Tensor:
    """Teacher-forced CE restricted to speech-token and <E> targets."""
    v = model.vocab
    b = len(sequences)
    tmax = max(len(s.ids) for s in sequences)
    ids = np.full((b, tmax), v.pad, dtype=np.int64)
    weight = np.zeros((b, tmax, len(v)), dtype=np.float32)
    count = 0
    for i, s in enumerate(sequences):
        ids[i, :len(s.ids)] = s.ids
        for pos in range(len(s.ids) - 1):
            nxt = s.ids[pos + 1]
            if v.is_speech(nxt) or nxt == v.eos:
                weight[i, pos, nxt] = 1.0
                count += 1
    if count == 0:
        raise ContractError("no speech or <E> targets in batch")
    log_probs = model.forward(ids, dropout_rng=dropout_rng)
    picked = nm.reduce_sum(nm.mul(log_probs, nm.Tensor(weight)))
    return nm.mul(picked, -1.0 / count)


def train_lm(pairs: list[tuple[list[int], list[int], str]],
             codebook_size: int = 256, cfg: LMConfig | None = None,
             seed: int = 0, max_epochs: int = 15, batch_size: int = 16,
             lr: float = 1e-3, target_loss: float = 0.0,
             log=lambda s: None) -> tuple[TokenLM, dict]:
    """pairs: (text_ids, speech_codes, lang) triples."""
    vocab = LMVocabulary(codebook_size)
    model = TokenLM(vocab=vocab, cfg=cfg, seed=seed)
    seqs = [build_training_sequence(t, s, lang, vocab) for t, s, lang in pairs]
    rng = np.random.default_rng([seed, 0x71E0])
    drop_rng = np.random.default_rng([seed, 0x71E1])
    opt = nm.Adam(model.parameters(), lr=lr, grad_clip=5.0)
    steps_per_epoch = max(len(seqs) // batch_size, 1)
    total = max_epochs * steps_per_epoch
    curve = {"epoch_loss": [], "seconds": []}
    step = 0
    t0 = time.time()
    for epoch in range(max_epochs):
        order = rng.permutation(len(seqs))
        order = sorted(order, key=lambda i: len(seqs[i].ids))
        batches = [order[b0:b0 + batch_size]
                   for b0 in range(0, steps_per_epoch * batch_size, batch_size)]
        rng.shuffle(batches)
        losses = []
        for idxs in batches:
            batch = [seqs[i] for i in idxs]
            opt.lr = nm.cosine_lr(step, total, lr, warmup=min(100, total // 10))
            loss = lm_loss(model, batch, dropout_rng=drop_rng)
            nm.check_finite(loss, "lm loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        curve["epoch_loss"].append(float(np.mean(losses)))
        curve["seconds"].append(time.time() - t0)
        log(f"epoch {epoch}: loss {np.mean(losses):.4f}")
        if curve["epoch_loss"][-1] <= target_loss:
            break
    model.trained = True
    return model, curve


# -- sampling ----------------------------------------------------------------


@dataclass
class SampledTokens:
    codes: list[int]
    truncated: bool


def sample_speech_tokens(model: TokenLM, prefix: TokenLMSequence,
                         rng: np.random.Generator, temperature: float = 1.0,
                         top_k: int = 25,
                         max_new: int | None = None) -> SampledTokens:
    """Continue `prefix` with speech tokens until <E> or length runs out.

    Only speech-token ids and <E> can be emitted; text ids are masked away.
    """
    if not model.trained:
        raise StateError("token LM is untrained")
    if temperature < 0:
        raise ParameterError("temperature must be >= 0")
    v = model.vocab
    budget = model.cfg.max_len - len(prefix.ids)
    if max_new is not None:
        budget = min(budget, max_new)
    if budget <= 0:
        raise LengthError("prefix leaves no room to generate")

    cache = [([], []) for _ in range(model.cfg.depth)]
    logits = None
    for pos, tok in enumerate(prefix.ids):
        logits = model._np_step(tok, pos, cache)
    allowed = np.zeros(len(v), dtype=bool)
    allowed[v.speech_base:len(v)] = True
    allowed[v.eos] = True

    codes: list[int] = []
    truncated = False
    pos = len(prefix.ids)
    while True:
        masked = np.where(allowed, logits, -np.inf)
        if temperature == 0:
            nxt = int(np.argmax(masked))
        else:
            z = masked / temperature
            if top_k and top_k < int(allowed.sum()):
                kth = np.partition(z, -top_k)[-top_k]
                z = np.where(z >= kth, z, -np.inf)
            z = z - z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(len(p), p=p))
        if nxt == v.eos:
            break
        codes.append(v.speech_code(nxt))
        if len(codes) >= budget:
            truncated = True
            break
        logits = model._np_step(nxt, pos, cache)
        pos += 1
    return SampledTokens(codes=codes, truncated=truncated)


def rerank_candidates(candidates, target_text: str, recognizer,
                      lang: str | None = None) -> tuple[int, list[float]]:
    """Pick the candidate whose recognition is closest to the target text.

    candidates: waveforms. Returns (best index, per-candidate CER). Ties keep
    the earliest candidate, which is the lowest seed in seed-set order.
    """
    from .evaluation import edit_distance
    from .recognizer import utterance_features
    if len(candidates) == 0:
        raise ContractError("need at least one candidate")
    if recognizer is None:
        raise StateError("re-ranking needs a trained recognizer")
    ref = explode_text(target_text)
    cers = []
    for w in candidates:
        hyp = recognizer.transcribe(utterance_features(w), lang=lang).text
        d, _ = edit_distance(ref, explode_text(hyp) if hyp else [])
        cers.append(d / max(len(ref), 1))
    best = int(np.argmin(cers))
    return best, cers
