"""Evaluation protocols: text normalization, error rates, timing, similarity.

A "word" here is a toy symbol (letter, digit word, digit, period), so word and
character error rates coincide on the symbol stream; reports label the metric
CER. Multi-seed protocols use the repo-wide seed set {0, 7, 42, 123, 1337}.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import DIGITS, LETTERS, PERIOD, _DIGIT_TO_WORD
from .errors import ContractError, ParameterError

SEED_SET = (0, 7, 42, 123, 1337)


@dataclass
class NormalizationConfig:
    lowercase: bool = True
    strip_punct: str = ".,!?"
    digits_to_words: bool = True


def normalize_text(s: str, cfg: NormalizationConfig | None = None) -> str:
    """Lowercase, strip punctuation, expand numerals to digit words.

    Idempotent: the output contains nothing the pipeline would change again.
    """
    cfg = cfg or NormalizationConfig()
    if cfg.lowercase:
        s = s.lower()
    out: list[str] = []
    for word in s.split():
        if cfg.strip_punct:
            word = word.strip(cfg.strip_punct)
        if not word:
            continue
        if cfg.digits_to_words and all(ch in DIGITS for ch in word):
            out.extend(_DIGIT_TO_WORD[ch] for ch in word)
        else:
            out.append(word)
    return " ".join(out)


def text_symbols(s: str) -> list[str]:
    """Symbol stream of a transcript; tolerant of malformed hypothesis text."""
    symbols: list[str] = []
    for word in s.split():
        if word in _DIGIT_TO_WORD.values():
            symbols.append(word)
        elif all(ch in LETTERS + DIGITS + PERIOD for ch in word):
            symbols.extend(word)
        else:
            symbols.extend(word)  # unknown junk: count per character
    return symbols


# -- error rates -------------------------------------------------------------


@dataclass
class ErrorRate:
    rate: float
    ins: int
    dels: int
    subs: int
    ref_len: int

    @property
    def distance(self) -> int:
        return self.ins + self.dels + self.subs


def edit_distance(ref: list, hyp: list) -> tuple[int, dict]:
    """Levenshtein DP with an alignment backtrace for operation counts."""
    m, n = len(ref), len(hyp)
    d = np.zeros((m + 1, n + 1), dtype=np.int64)
    d[:, 0] = np.arange(m + 1)
    d[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        sub_cost = np.where(np.array([ref[i - 1] == h for h in hyp]), 0, 1)
        for j in range(1, n + 1):
            d[i, j] = min(d[i - 1, j] + 1,           # deletion
                          d[i, j - 1] + 1,           # insertion
                          d[i - 1, j - 1] + sub_cost[j - 1])
    i, j = m, n
    ins = dels = subs = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(d[m, n]), {"ins": ins, "del": dels, "sub": subs}


def cer(ref_text: str, hyp_text: str,
        cfg: NormalizationConfig | None = None) -> ErrorRate:
    """Symbol error rate after normalization."""
    ref = text_symbols(normalize_text(ref_text, cfg))
    hyp = text_symbols(normalize_text(hyp_text, cfg))
    if not ref:
        raise ContractError("reference is empty after normalization; rate undefined")
    dist, counts = edit_distance(ref, hyp)
    return ErrorRate(rate=dist / len(ref), ins=counts["ins"], dels=counts["del"],
                     subs=counts["sub"], ref_len=len(ref))


def wer(ref_text: str, hyp_text: str,
        cfg: NormalizationConfig | None = None) -> ErrorRate:
    """Word-level rate; identical to cer when every word is one symbol."""
    ref = normalize_text(ref_text, cfg).split()
    hyp = normalize_text(hyp_text, cfg).split()
    if not ref:
        raise ContractError("reference is empty after normalization; rate undefined")
    dist, counts = edit_distance(ref, hyp)
    return ErrorRate(rate=dist / len(ref), ins=counts["ins"], dels=counts["del"],
                     subs=counts["sub"], ref_len=len(ref))


def corpus_cer(pairs: list[tuple[str, str]],
               cfg: NormalizationConfig | None = None) -> ErrorRate:
    """Pooled rate over (ref, hyp) pairs: total edits / total ref symbols."""
    ins = dels = subs = total = 0
    for ref_text, hyp_text in pairs:
        r = cer(ref_text, hyp_text, cfg)
        ins, dels, subs = ins + r.ins, dels + r.dels, subs + r.subs
        total += r.ref_len
    if total == 0:
        raise ContractError("no reference symbols in corpus")
    return ErrorRate(rate=(ins + dels + subs) / total, ins=ins, dels=dels,
                     subs=subs, ref_len=total)


# -- timing ------------------------------------------------------------------


def rtf_bench(model_fn, clips: list, min_clips: int = 10) -> dict:
    """Real-time factor of model_fn over audio clips, warmup excluded.

    rtf = total wall seconds / total audio seconds, batch size 1. The 10 s
    latency figure is measured on clips of at least 9.5 s when present,
    otherwise extrapolated from the pooled rtf.
    """
    if len(clips) < min_clips:
        raise ParameterError(f"rtf_bench wants >= {min_clips} clips, got {len(clips)}")
    model_fn(clips[0])  # warmup: exclude one-time setup from timing
    wall_total = 0.0
    audio_total = 0.0
    long_walls = []
    for clip in clips:
        t0 = time.perf_counter()
        model_fn(clip)
        dt = time.perf_counter() - t0
        wall_total += dt
        audio_total += clip.duration
        if clip.duration >= 9.5:
            long_walls.append(dt)
    rtf = wall_total / audio_total
    latency = float(np.mean(long_walls)) if long_walls else rtf * 10.0
    return {"rtf": rtf, "latency_10s": latency,
            "wall_seconds": wall_total, "audio_seconds": audio_total}


# -- similarity --------------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        raise ParameterError("cosine of zero vector")
    return float(np.dot(a, b) / denom)


def speaker_similarity(gen, prompt, embed_fn) -> float:
    """Cosine between speaker embeddings of generated and prompt audio."""
    return cosine(embed_fn(gen), embed_fn(prompt))


# -- protocol harnesses ------------------------------------------------------


def emotion_control_eval(synth_fn, classify_fn, emotions: list[str],
                         per_emotion_n: int, seeds=SEED_SET) -> dict:
    """Accuracy of landing the intended emotion, with and without the
    instruction prefix.

    synth_fn(emotion, with_instruction, index, seed) -> Waveform;
    classify_fn(Waveform) -> emotion label.
    """
    table: dict = {"per_emotion": {}, "seeds": list(seeds)}
    for emotion in emotions:
        acc = {"with": [], "without": []}
        for seed in seeds:
            hits = {"with": 0, "without": 0}
            for i in range(per_emotion_n):
                for mode in ("with", "without"):
                    w = synth_fn(emotion, mode == "with", i, seed)
                    hits[mode] += int(classify_fn(w) == emotion)
            for mode in ("with", "without"):
                acc[mode].append(hits[mode] / per_emotion_n)
        table["per_emotion"][emotion] = {
            mode: {"mean": float(np.mean(acc[mode])), "std": float(np.std(acc[mode])),
                   "per_seed": [float(x) for x in acc[mode]]}
            for mode in ("with", "without")}
    return table


def data_generator_experiment(recipes: dict[str, tuple], eval_fn) -> dict:
    """Train an ASR per recipe and evaluate each on the same real test set.

    recipes: name -> (train_fn, dataset); eval_fn(model) -> CER. Names follow
    the convention: real, syn_same_text, real_plus_syn, real_plus_syn_new_text.
    """
    rows = {}
    for name, (train_fn, dataset) in recipes.items():
        t0 = time.time()
        model = train_fn(dataset)
        rows[name] = {"cer": float(eval_fn(model)), "train_size": len(dataset),
                      "wall_seconds": time.time() - t0}
    return {"experiment": "asr-data-generator", "rows": rows}


# -- report plumbing ---------------------------------------------------------


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def make_report(metric: str, value, config: dict | None = None, **extra) -> dict:
    report = {"metric": metric, "value": value,
              "config_digest": config_digest(config or {}),
              "wall_clock": time.strftime("%Y-%m-%dT%H:%M:%S")}
    report.update(extra)
    for v in report.values():
        if isinstance(v, float) and not np.isfinite(v):
            raise ContractError(f"non-finite value in report: {metric}")
    return report


def save_report(path, report: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


def strip_wall_clock(report):
    """Deterministic view of a report for byte-comparison across runs."""
    if isinstance(report, dict):
        return {k: strip_wall_clock(v) for k, v in sorted(report.items())
                if k not in ("wall_clock", "wall_seconds", "seconds",
                             "latency_10s", "rtf")}
    if isinstance(report, list):
        return [strip_wall_clock(v) for v in report]
    return report


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned-column text rendering of report rows."""
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    widths = {c: max(len(c), *(len(fmt(r.get(c, ""))) for r in rows)) for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    lines.append("  ".join("-" * widths[c] for c in columns))
    for r in rows:
        lines.append("  ".join(fmt(r.get(c, "")).ljust(widths[c]) for c in columns))
    return "\n".join(lines)
