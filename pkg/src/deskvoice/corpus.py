"""Synthetic tone-language corpus.

Two toy languages over a 16-letter alphabet plus ten digit words. Every
utterance is rendered as a sequence of harmonic tones whose frequencies encode
the symbols, so content, speaker, language, emotion, and event labels are all
independently recoverable from the audio by construction:

  * speaker s sits on an exact pitch grid: base_f0 = 110 * 2^(m/16) with
    m = 2s, and carries a fixed 3-harmonic timbre and speaking rate,
  * letter k plays at slot m+k (language L1) or m+15-k (L2); digit d at the
    half slots m+d+0.5 / m+14.5-d, so symbol identity is a frequency offset
    from the speaker's base,
  * emotions scale pitch (happy 1.25, sad 0.8) and tempo (0.9 / 1.15),
  * L2 additionally carries a 10 Hz amplitude tremolo, making language
    identity audible even on symbol-palindromic texts,
  * events are a 1 kHz beep or a noise burst dropped into the middle.

Everything is a pure function of the seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .dsp import SAMPLE_RATE, Waveform, write_wav
from .errors import ContractError, ParameterError, VocabularyError

LETTERS = "abcdefghijklmnop"
DIGIT_WORDS = ["zero", "one", "two", "three", "four",
               "five", "six", "seven", "eight", "nine"]
DIGITS = "0123456789"
PERIOD = "."
LANGS = ("L1", "L2")
EMOTIONS = ("neutral", "happy", "sad")
EVENTS = ("none", "beep", "burst")

EMOTION_PITCH = {"neutral": 1.0, "happy": 1.25, "sad": 0.8}
EMOTION_RATE = {"neutral": 1.0, "happy": 0.9, "sad": 1.15}

NUM_SPEAKERS = 16
BASE_SYMBOL_SECONDS = 0.120
RAMP_SECONDS = 0.010
EVENT_SECONDS = 0.080
TONE_AMP = 0.4
TREMOLO_HZ = 10.0
TREMOLO_DEPTH = 0.35
STRONG_GAIN = 2.0          # +6 dB
MAX_SYMBOLS = 32

_WORD_TO_DIGIT = dict(zip(DIGIT_WORDS, DIGITS))
_DIGIT_TO_WORD = dict(zip(DIGITS, DIGIT_WORDS))


# -- text layer --------------------------------------------------------------


def explode_text(text: str) -> list[str]:
    """Split a transcript into its symbol stream.

    "ab one cd" -> [a, b, one, c, d]; ITN forms contribute digit and period
    symbols: "ab 10 cd." -> [a, b, 1, 0, c, d, .].
    """
    symbols: list[str] = []
    for word in text.split():
        if word in _WORD_TO_DIGIT:
            symbols.append(word)
        else:
            trailing_period = word.endswith(PERIOD)
            core = word[:-1] if trailing_period else word
            for ch in core:
                if ch in LETTERS or ch in DIGITS:
                    symbols.append(ch)
                else:
                    raise VocabularyError(f"unknown symbol {ch!r} in {word!r}")
            if trailing_period:
                symbols.append(PERIOD)
    return symbols


def toy_itn(text: str) -> str:
    """Digit-word runs become numerals; a sentence-final period is appended.

    Already-converted input passes through unchanged (idempotent).
    """
    words = text.split()
    if words and words[-1].endswith(PERIOD):
        words[-1] = words[-1][:-1]
        if not words[-1]:
            words.pop()
    out: list[str] = []
    run: list[str] = []

    def flush():
        if run:
            out.append("".join(_WORD_TO_DIGIT[w] for w in run))
            run.clear()

    for w in words:
        if w in _WORD_TO_DIGIT:
            run.append(w)
        else:
            flush()
            out.append(w)
    flush()
    if not out:
        return PERIOD
    return " ".join(out) + PERIOD


def itn_inverse(itn_text: str) -> str:
    """Numerals back to digit words, final period dropped."""
    words = itn_text.split()
    if words and words[-1].endswith(PERIOD):
        words[-1] = words[-1][:-1]
        if not words[-1]:
            words.pop()
    out: list[str] = []
    for w in words:
        if w and all(ch in DIGITS for ch in w):
            out.extend(_DIGIT_TO_WORD[ch] for ch in w)
        else:
            out.append(w)
    return " ".join(out)


# -- speakers ----------------------------------------------------------------


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    base_f0: float
    timbre: tuple[float, float, float]
    rate: float


def _timbre_table() -> list[np.ndarray]:
    """16 harmonic-weight triples, pairwise well separated.

    Farthest-point selection over the simplex grid {(i,j,k)/20 : i+j+k=20,
    all >= 3}; every harmonic keeps >= 0.15 weight so autocorrelation pitch
    tracking stays well-posed for every voice.
    """
    grid = [np.array([i, j, 20 - i - j]) / 20.0
            for i in range(3, 15) for j in range(3, 18 - i)]
    chosen = [grid[0]]
    while len(chosen) < NUM_SPEAKERS:
        dists = [min(np.abs(g - c).sum() for c in chosen) for g in grid]
        chosen.append(grid[int(np.argmax(dists))])
    return chosen


def make_speakers(seed: int) -> list[SpeakerProfile]:
    """16 profiles; the f0 grid and timbre set are fixed, the assignment of
    timbres to grid positions and the speaking rates come from the seed."""
    rng = np.random.default_rng([seed, 0xBEEF])
    timbres = [_timbre_table()[i] for i in rng.permutation(NUM_SPEAKERS)]
    rates = rng.uniform(0.85, 1.15, size=NUM_SPEAKERS)
    return [
        SpeakerProfile(
            speaker_id=i,
            base_f0=110.0 * 2.0 ** ((2 * i) / 16.0),
            timbre=tuple(float(x) for x in timbres[i]),
            rate=float(rates[i]),
        )
        for i in range(NUM_SPEAKERS)
    ]


def symbol_slot(symbol: str, lang: str) -> float:
    """Frequency slot of a symbol relative to the speaker's base, in 16ths
    of an octave. L2 mirrors the mapping so the languages sound different."""
    if symbol in LETTERS:
        k = LETTERS.index(symbol)
        return float(k if lang == "L1" else 15 - k)
    if symbol in _WORD_TO_DIGIT or symbol in DIGITS:
        d = int(_WORD_TO_DIGIT.get(symbol, symbol))
        return d + 0.5 if lang == "L1" else 14.5 - d
    if symbol == PERIOD:
        # rendered at the far end of the grid, outside letter slots
        return 16.5 if lang == "L1" else -1.5
    raise VocabularyError(f"unknown symbol {symbol!r}")


def symbol_frequency(symbol: str, lang: str, profile: SpeakerProfile,
                     emotion: str = "neutral") -> float:
    return profile.base_f0 * 2.0 ** (symbol_slot(symbol, lang) / 16.0) * EMOTION_PITCH[emotion]


# -- utterances --------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    text: str
    lang: str
    speaker: int
    emotion: str
    event: str
    itn_text: str = ""
    markers: list = dataclasses.field(default_factory=list)
    audio: str = ""

    def __post_init__(self):
        if not self.text:
            raise ContractError("utterance text must be non-empty")
        if len(explode_text(self.text)) > MAX_SYMBOLS:
            raise ContractError(f"utterance exceeds {MAX_SYMBOLS} symbols")
        if self.lang not in LANGS or self.emotion not in EMOTIONS or self.event not in EVENTS:
            raise ContractError(f"bad label combination on {self.id}")
        if not self.itn_text:
            self.itn_text = toy_itn(self.text)

    def instruct_text(self) -> str:
        """Instruction-prefixed form with inline markers."""
        content = _apply_markers_to_text(self.text, self.markers)
        return f"{self.emotion.capitalize()}.<endofprompt>{content}"


def _apply_markers_to_text(text: str, markers: list) -> str:
    words = text.split()
    for m in markers:
        if m["kind"] == "strong":
            i = m["word_index"]
            words[i] = f"<strong>{words[i]}</strong>"
    tail = "".join(
        " [laughter]" if m["kind"] == "laughter" else " [breath]"
        for m in markers if m["kind"] in ("laughter", "breath"))
    return " ".join(words) + tail


def _tone(freq: float, seconds: float, timbre, amp: float) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    sig = np.zeros(n)
    for h, a in enumerate(timbre, start=1):
        sig += a * np.sin(2.0 * np.pi * freq * h * t)
    ramp = int(RAMP_SECONDS * SAMPLE_RATE)
    env = np.ones(n)
    if 2 * ramp <= n:
        ramp_shape = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = ramp_shape
        env[n - ramp:] = ramp_shape[::-1]
    return amp * sig * env


def _laughter_pattern(profile: SpeakerProfile) -> np.ndarray:
    # four voiced pulses at 1.5x base pitch: a stylized "ha-ha-ha-ha"
    seg = _tone(profile.base_f0 * 1.5, 0.150, profile.timbre, TONE_AMP)
    t = np.arange(seg.size) / SAMPLE_RATE
    gate = 0.5 + 0.5 * np.sign(np.sin(2.0 * np.pi * 26.67 * t))
    return seg * gate


def _breath_pattern(rng: np.random.Generator) -> np.ndarray:
    n = int(0.100 * SAMPLE_RATE)
    noise = rng.uniform(-1.0, 1.0, n)
    smooth = np.convolve(noise, np.ones(8) / 8.0, mode="same")
    env = np.sin(np.pi * np.arange(n) / n)
    return 0.1 * smooth * env


def render_utterance(u: Utterance, profile: SpeakerProfile, seed: int = 0) -> Waveform:
    """Deterministic audio for an utterance; the seed covers event noise only."""
    rng = np.random.default_rng([seed, u.speaker, _stable_hash(u.id)])
    symbols = explode_text(u.text)
    strong_words = {m["word_index"] for m in u.markers if m["kind"] == "strong"}
    strong_syms = _strong_symbol_indices(u.text, strong_words)
    sym_seconds = BASE_SYMBOL_SECONDS * profile.rate * EMOTION_RATE[u.emotion]

    pieces: list[np.ndarray] = []
    event_at = len(symbols) // 2
    for i, sym in enumerate(symbols):
        if u.event != "none" and i == event_at:
            pieces.append(_event_audio(u.event, rng))
        freq = symbol_frequency(sym, u.lang, profile, u.emotion)
        tone = _tone(freq, sym_seconds, profile.timbre, TONE_AMP)
        if i in strong_syms:
            tone = tone * STRONG_GAIN
        pieces.append(tone)
    if u.event != "none" and event_at >= len(symbols):
        pieces.append(_event_audio(u.event, rng))
    for m in u.markers:
        if m["kind"] == "laughter":
            pieces.append(_laughter_pattern(profile))
        elif m["kind"] == "breath":
            pieces.append(_breath_pattern(rng))

    samples = np.concatenate(pieces)
    if u.lang == "L2":
        t = np.arange(samples.size) / SAMPLE_RATE
        trem = 1.0 - TREMOLO_DEPTH * (0.5 + 0.5 * np.sin(2.0 * np.pi * TREMOLO_HZ * t))
        samples = samples * trem
    peak = np.abs(samples).max()
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples)


def _strong_symbol_indices(text: str, strong_words: set[int]) -> set[int]:
    out: set[int] = set()
    pos = 0
    for wi, word in enumerate(text.split()):
        n = len(explode_text(word))
        if wi in strong_words:
            out.update(range(pos, pos + n))
        pos += n
    return out


def _event_audio(event: str, rng: np.random.Generator) -> np.ndarray:
    if event == "beep":
        return _tone(1000.0, EVENT_SECONDS, (1.0, 0.0, 0.0), TONE_AMP)
    # -10 dB RMS uniform noise: amplitude sqrt(3) * 10^(-10/20)
    n = int(EVENT_SECONDS * SAMPLE_RATE)
    return rng.uniform(-1.0, 1.0, n) * (np.sqrt(3.0) * 10 ** (-0.5))


def _stable_hash(s: str) -> int:
    h = 2166136261
    for ch in s.encode("utf-8"):
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


# -- corpus generation -------------------------------------------------------


def _sample_text(rng: np.random.Generator) -> str:
    words: list[str] = []
    total = 0
    for _ in range(int(rng.integers(1, 5))):
        if rng.random() < 0.35:
            n = int(rng.integers(1, 4))
            picks = [DIGIT_WORDS[int(rng.integers(0, 10))] for _ in range(n)]
            words.extend(picks)
        else:
            n = int(rng.integers(1, 6))
            word = "".join(LETTERS[int(rng.integers(0, 16))] for _ in range(n))
            words.append(word)
        total += n
        if total >= 12:
            break
    return " ".join(words)


def _sample_markers(rng: np.random.Generator, text: str) -> list:
    markers: list = []
    words = text.split()
    if rng.random() < 0.30:
        markers.append({"kind": "strong", "word_index": int(rng.integers(0, len(words)))})
    r = rng.random()
    if r < 0.10:
        markers.append({"kind": "laughter"})
    elif r < 0.20:
        markers.append({"kind": "breath"})
    return markers


def sample_utterance(rng: np.random.Generator, uid: str,
                     speaker_pool: list[int]) -> Utterance:
    text = _sample_text(rng)
    return Utterance(
        id=uid,
        text=text,
        lang=LANGS[int(rng.integers(0, 2))],
        speaker=int(speaker_pool[int(rng.integers(0, len(speaker_pool)))]),
        emotion=EMOTIONS[int(rng.integers(0, 3))],
        event=EVENTS[int(rng.integers(0, 3))],
        markers=_sample_markers(rng, text),
    )


def generate_corpus(seed: int, n_train: int, n_dev: int, n_test: int,
                    out_dir: str | os.PathLike | None = None,
                    speaker_disjoint: bool = False,
                    write_audio: bool = True) -> dict:
    """Build manifests (and audio under out_dir) for the three splits.

    Returns {"train": [Utterance...], "dev": [...], "test": [...],
    "speakers": [SpeakerProfile...]}. With speaker_disjoint, dev/test use
    speakers 12..15 and train uses 0..11.
    """
    if min(n_train, n_dev, n_test) < 1:
        raise ParameterError("split sizes must be >= 1")
    speakers = make_speakers(seed)
    train_pool = list(range(12)) if speaker_disjoint else list(range(NUM_SPEAKERS))
    eval_pool = list(range(12, 16)) if speaker_disjoint else list(range(NUM_SPEAKERS))

    splits = {"train": (n_train, train_pool), "dev": (n_dev, eval_pool),
              "test": (n_test, eval_pool)}
    corpus: dict = {"speakers": speakers}
    for split, (count, pool) in splits.items():
        rng = np.random.default_rng([seed, {"train": 1, "dev": 2, "test": 3}[split]])
        utts = [sample_utterance(rng, f"{split}-{i:05d}", pool) for i in range(count)]
        for u in utts:
            u.audio = f"audio/{u.id}.wav"
        corpus[split] = utts

    if out_dir is not None:
        out_dir = str(out_dir)
        os.makedirs(os.path.join(out_dir, "audio"), exist_ok=True)
        for split in ("train", "dev", "test"):
            if write_audio:
                for u in corpus[split]:
                    w = render_utterance(u, speakers[u.speaker], seed=seed)
                    write_wav(os.path.join(out_dir, u.audio), w)
            write_manifest(os.path.join(out_dir, f"{split}.jsonl"), corpus[split])
        with open(os.path.join(out_dir, "speakers.json"), "w", encoding="utf-8") as fh:
            json.dump([dataclasses.asdict(s) for s in speakers], fh, indent=1)
    return corpus


def write_manifest(path: str, utts: list[Utterance]):
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            row = {"id": u.id, "audio": u.audio, "text": u.text,
                   "itn_text": u.itn_text, "lang": u.lang, "speaker": u.speaker,
                   "emotion": u.emotion, "event": u.event, "markers": u.markers}
            fh.write(json.dumps(row) + "\n")


def read_manifest(path: str) -> list[Utterance]:
    utts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                row.pop("instruct_text", None)
                utts.append(Utterance(**row))
    return utts


def pangram_text() -> str:
    """All 16 letters once: the mean-pitch speaker probe."""
    return LETTERS


def estimate_f0(w: Waveform, lo_hz: float = 70.0, hi_hz: float = 1100.0) -> float:
    """Median autocorrelation pitch over 40 ms hops; oracle for speaker tests."""
    win = int(0.040 * SAMPLE_RATE)
    hop = win // 2
    lo_lag = int(SAMPLE_RATE / hi_hz)
    hi_lag = int(SAMPLE_RATE / lo_hz)
    values = []
    for start in range(0, w.samples.size - win, hop):
        seg = w.samples[start:start + win]
        if np.sqrt((seg ** 2).mean()) < 1e-3:
            continue
        seg = seg - seg.mean()
        ac = np.correlate(seg, seg, mode="full")[win - 1:]
        if ac[0] <= 0:
            continue
        lag = lo_lag + int(np.argmax(ac[lo_lag:hi_lag]))
        values.append(SAMPLE_RATE / lag)
    if not values:
        raise ContractError("no voiced frames for f0 estimation")
    return float(np.median(values))


def identify_speaker_by_f0(w: Waveform, mean_slot: float = 7.5) -> int:
    """Nearest grid speaker given a pangram clip's median f0."""
    est_base = estimate_f0(w) / 2.0 ** (mean_slot / 16.0)
    grid = 110.0 * 2.0 ** (2 * np.arange(NUM_SPEAKERS) / 16.0)
    return int(np.argmin(np.abs(np.log2(grid) - np.log2(est_base))))
