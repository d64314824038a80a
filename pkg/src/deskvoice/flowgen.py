"""Mel generation by conditional flow matching.

A small convolutional U-Net regresses the straight-path velocity field from
noise to normalized mel frames, conditioned on speech tokens (two mel frames
per token), a speaker vector, and a partially masked reference mel. Sampling
integrates the learned field with a handful of Euler steps; classifier-free
guidance sharpens the conditioning by extrapolating away from the
unconditional prediction.

The speaker vector comes from a tiny classifier trained on corpus speaker
labels; its penultimate activations, L2-normalized, serve as the embedding.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from . import numerics as nm
from .errors import (ContractError, DimensionError, FormatError, LengthError,
                     NumericError, ParameterError, StateError)

SIGMA_MIN = 1e-4
FRAMES_PER_TOKEN = 2       # 50 tokens/s against 100 mel frames/s
TIME_EMB_DIM = 32
MIN_SPEAKER_SECONDS = 0.5


# -- straight transport paths ------------------------------------------------


def ot_path(x0: np.ndarray, x1: np.ndarray, t: float,
            sigma_min: float = SIGMA_MIN) -> tuple[np.ndarray, np.ndarray]:
    """Point and velocity on the straight path from noise x0 to data x1.

    x_t = (1 - (1 - sigma_min) t) x0 + t x1;  u_t = x1 - (1 - sigma_min) x0.
    The velocity is constant in t, which is what makes few-step Euler viable.
    """
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise DimensionError(f"path endpoints differ: {x0.shape} vs {x1.shape}")
    if not (0.0 <= t <= 1.0):
        raise ParameterError(f"path time {t} outside [0, 1]")
    x_t = (1.0 - (1.0 - sigma_min) * t) * x0 + t * x1
    u_t = x1 - (1.0 - sigma_min) * x0
    return x_t, u_t


# -- conditioning ------------------------------------------------------------


@dataclass
class FlowCondition:
    """Everything the field network may condition on for one utterance.

    `ref_mel` holds raw (unnormalized) mel rows; `ref_mask` marks the rows
    that are actually visible. Rows with a False mask are zeroed after
    normalization, and the mask itself is fed as an extra channel so the
    network can tell silence from absence.
    """

    tokens: list[int]
    speaker: np.ndarray
    ref_mel: np.ndarray
    ref_mask: np.ndarray

    def __post_init__(self):
        self.speaker = np.asarray(self.speaker, dtype=np.float32)
        self.ref_mel = np.asarray(self.ref_mel, dtype=np.float32)
        self.ref_mask = np.asarray(self.ref_mask, dtype=bool)
        if len(self.tokens) == 0:
            raise ContractError("condition needs at least one token")
        if any((not isinstance(t, (int, np.integer))) or t < 0 for t in self.tokens):
            raise ContractError("token ids must be non-negative integers")
        if self.speaker.ndim != 1:
            raise DimensionError("speaker vector must be 1-d")
        if self.ref_mel.ndim != 2 or self.ref_mel.shape[1] != dsp.N_MELS:
            raise DimensionError(
                f"ref mel must be T x {dsp.N_MELS}, got {self.ref_mel.shape}")
        if self.ref_mask.shape != (self.ref_mel.shape[0],):
            raise ContractError(
                f"mask length {self.ref_mask.shape} != ref frames "
                f"{self.ref_mel.shape[0]}")


def empty_reference() -> tuple[np.ndarray, np.ndarray]:
    """A zero-frame reference for unprompted generation."""
    return (np.zeros((0, dsp.N_MELS), dtype=np.float32),
            np.zeros((0,), dtype=bool))


def time_embedding(t: float, dim: int = TIME_EMB_DIM) -> np.ndarray:
    """Sinusoidal features of the path time, spread over a frequency ladder."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = 1000.0 * t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


# -- the field network -------------------------------------------------------


@dataclass
class FlowConfig:
    width: int = 64
    token_dim: int = 48
    speaker_dim: int = 64
    codebook_size: int = 256
    kernel: int = 5
    heads: int = 4

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ContractError("width must divide into heads")


@dataclass
class ODEConfig:
    steps: int = 10
    beta: float = 0.7
    sigma_min: float = SIGMA_MIN

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"ODE needs at least one step, got {self.steps}")
        if self.beta < 0:
            raise ParameterError(f"guidance strength must be >= 0, got {self.beta}")


class FieldNet:
    """Velocity-field estimator: a 2-down/2-up conv stack with an attention
    block at the coarsest scale.

    Works in normalized mel space; the affine statistics travel with the
    checkpoint. All conditioning enters as extra input channels so the
    unconditional pass is just the same canvas with those channels zeroed.
    """

    def __init__(self, cfg: FlowConfig | None = None, seed: int = 0):
        self.cfg = cfg or FlowConfig()
        rng = np.random.default_rng([seed, 0xF10])
        self.params: dict[str, nm.Tensor] = {}
        cfgv = self.cfg
        w = cfgv.width
        self.in_dim = (dsp.N_MELS + cfgv.token_dim + dsp.N_MELS + 1
                       + cfgv.speaker_dim + TIME_EMB_DIM)
        p = self.params
        p["tok_emb"] = nm.Tensor(
            (rng.standard_normal((cfgv.codebook_size, cfgv.token_dim)) * 0.05
             ).astype(np.float32), requires_grad=True)
        self._lin(rng, self.in_dim, w, "inproj")
        for name in ("blk_in", "blk_d1", "blk_d2", "blk_u2", "blk_u1"):
            self._conv_block(rng, name)
        self._conv(rng, 4, w, w, "down1")
        self._conv(rng, 4, w, w, "down2")
        self._attn_block(rng, "mid")
        self._conv(rng, cfgv.kernel, w, w, "up2")
        self._conv(rng, cfgv.kernel, w, w, "up1")
        p["out_ln.g"] = nm.ones((w,), requires_grad=True)
        p["out_ln.b"] = nm.zeros((w,), requires_grad=True)
        # zero-init output: the untrained field is exactly zero, so sampling
        # from an untrained net returns (denormalized) noise rather than junk
        p["out.w"] = nm.zeros((w, dsp.N_MELS), requires_grad=True)
        p["out.b"] = nm.zeros((dsp.N_MELS,), requires_grad=True)
        self.mel_mu = np.zeros(dsp.N_MELS, dtype=np.float32)
        self.mel_sd = np.ones(dsp.N_MELS, dtype=np.float32)
        self.trained = False

    # .. parameter helpers ..

    def _lin(self, rng, fi, fo, name):
        self.params[name + ".w"] = nm.Tensor(
            (rng.standard_normal((fi, fo)) / np.sqrt(fi)).astype(np.float32),
            requires_grad=True)
        self.params[name + ".b"] = nm.zeros((fo,), requires_grad=True)

    def _conv(self, rng, k, ci, co, name):
        self.params[name + ".w"] = nm.Tensor(
            (rng.standard_normal((k, ci, co)) / np.sqrt(k * ci)).astype(np.float32),
            requires_grad=True)
        self.params[name + ".b"] = nm.zeros((co,), requires_grad=True)

    def _conv_block(self, rng, name):
        w = self.cfg.width
        self.params[name + ".ln.g"] = nm.ones((w,), requires_grad=True)
        self.params[name + ".ln.b"] = nm.zeros((w,), requires_grad=True)
        self._conv(rng, self.cfg.kernel, w, w, name + ".c1")
        self._conv(rng, self.cfg.kernel, w, w, name + ".c2")

    def _attn_block(self, rng, name):
        w = self.cfg.width
        for ln in (".ln1", ".ln2"):
            self.params[name + ln + ".g"] = nm.ones((w,), requires_grad=True)
            self.params[name + ln + ".b"] = nm.zeros((w,), requires_grad=True)
        self._lin(rng, w, 3 * w, name + ".qkv")
        self._lin(rng, w, w, name + ".out")
        self._lin(rng, w, 2 * w, name + ".ffn1")
        self._lin(rng, 2 * w, w, name + ".ffn2")

    def parameters(self):
        return list(self.params.values())

    # .. persistence ..

    def save(self, path, extra_meta: dict | None = None):
        tensors = dict(self.params)
        tensors["norm.mu"] = nm.Tensor(self.mel_mu)
        tensors["norm.sd"] = nm.Tensor(self.mel_sd)
        meta = {"kind": "flowgen", "config": vars(self.cfg),
                "trained": self.trained}
        meta.update(extra_meta or {})
        nm.save_tensors(path, tensors, meta=meta)

    @classmethod
    def load(cls, path) -> "FieldNet":
        arrays, meta = nm.load_tensors(path, with_meta=True)
        if not meta or meta.get("kind") != "flowgen":
            raise StateError(f"{path} is not a flow checkpoint")
        net = cls(cfg=FlowConfig(**meta["config"]))
        for name, arr in arrays.items():
            if name == "norm.mu":
                net.mel_mu = arr.astype(np.float32)
            elif name == "norm.sd":
                net.mel_sd = arr.astype(np.float32)
            else:
                net.params[name].data = arr.astype(np.float32)
        net.trained = bool(meta.get("trained", False))
        return net

    def set_mel_norm(self, mels: list[np.ndarray]):
        allm = np.concatenate(mels, axis=0)
        self.mel_mu = allm.mean(axis=0).astype(np.float32)
        self.mel_sd = (allm.std(axis=0) + 1e-3).astype(np.float32)

    def normalize(self, mel: np.ndarray) -> np.ndarray:
        return ((mel - self.mel_mu) / self.mel_sd).astype(np.float32)

    def denormalize(self, mel: np.ndarray) -> np.ndarray:
        return mel * self.mel_sd + self.mel_mu

    # .. canvas assembly ..

    def _condition_channels(self, t_frames: int, cond: FlowCondition | None,
                            t: float) -> np.ndarray:
        """(T, token+ref+mask+speaker+time) conditioning canvas.

        cond None means the unconditional (null) branch: every conditioning
        channel is zero but the time features stay, since the field is always
        time-dependent.
        """
        cfg = self.cfg
        cols = np.zeros((t_frames, self.in_dim - dsp.N_MELS), dtype=np.float32)
        o_tok = 0
        o_ref = cfg.token_dim
        o_mask = o_ref + dsp.N_MELS
        o_spk = o_mask + 1
        o_time = o_spk + cfg.speaker_dim
        if cond is not None:
            ids = np.asarray(cond.tokens, dtype=np.int64)
            if ids.max() >= cfg.codebook_size:
                raise ContractError(
                    f"token id {ids.max()} outside codebook of {cfg.codebook_size}")
            tok = np.repeat(self.params["tok_emb"].data[ids],
                            FRAMES_PER_TOKEN, axis=0)
            n = min(t_frames, tok.shape[0])
            cols[:n, o_tok:o_tok + cfg.token_dim] = tok[:n]
            if cond.speaker.shape[0] != cfg.speaker_dim:
                raise DimensionError(
                    f"speaker dim {cond.speaker.shape[0]} != {cfg.speaker_dim}")
            cols[:, o_spk:o_spk + cfg.speaker_dim] = cond.speaker
            n_ref = min(cond.ref_mel.shape[0], t_frames)
            if n_ref:
                vis = cond.ref_mask[:n_ref]
                ref = self.normalize(cond.ref_mel[:n_ref]) * vis[:, None]
                cols[:n_ref, o_ref:o_ref + dsp.N_MELS] = ref
                cols[:n_ref, o_mask] = vis.astype(np.float32)
        cols[:, o_time:o_time + TIME_EMB_DIM] = time_embedding(t)
        return cols

    # .. forward ..

    def _block(self, x, name):
        g = self.params
        h = nm.layer_norm(x, g[name + ".ln.g"], g[name + ".ln.b"])
        h = nm.gelu(nm.conv1d(h, g[name + ".c1.w"], g[name + ".c1.b"]))
        h = nm.conv1d(h, g[name + ".c2.w"], g[name + ".c2.b"])
        return nm.add(x, h)

    def _mid(self, x, key_mask):
        g = self.params
        b, t, d = x.shape
        heads, dh = self.cfg.heads, d // self.cfg.heads
        h = nm.layer_norm(x, g["mid.ln1.g"], g["mid.ln1.b"])
        qkv = nm.add(nm.matmul(h, g["mid.qkv.w"]), g["mid.qkv.b"])

        def split(z):
            return nm.swapaxes(nm.reshape(z, (b, t, heads, dh)), 1, 2)

        mask = None
        if key_mask is not None:
            mask = np.where(key_mask[:, None, None, :] > 0, 0.0, -1e9)
            mask = np.broadcast_to(mask, (b, heads, t, t)).astype(np.float32)
        att = nm.attention(split(qkv[:, :, 0:d]), split(qkv[:, :, d:2 * d]),
                           split(qkv[:, :, 2 * d:3 * d]), mask=mask)
        att = nm.reshape(nm.swapaxes(att, 1, 2), (b, t, d))
        x = nm.add(x, nm.add(nm.matmul(att, g["mid.out.w"]), g["mid.out.b"]))
        h2 = nm.layer_norm(x, g["mid.ln2.g"], g["mid.ln2.b"])
        f = nm.gelu(nm.add(nm.matmul(h2, g["mid.ffn1.w"]), g["mid.ffn1.b"]))
        f = nm.add(nm.matmul(f, g["mid.ffn2.w"]), g["mid.ffn2.b"])
        return nm.add(x, f)

    def forward_canvas(self, canvas: np.ndarray,
                       key_mask: np.ndarray | None = None) -> nm.Tensor:
        """(B, T, in_dim) assembled input -> (B, T, mel) velocity estimate.

        T is padded internally to a multiple of 4 for the two downsamplings.
        """
        g = self.params
        b, t, _ = canvas.shape
        pad = (-t) % 4
        x = nm.add(nm.matmul(nm.Tensor(canvas), g["inproj.w"]), g["inproj.b"])
        if pad:
            x = nm.pad_axis(x, 1, 0, pad)
        x0 = self._block(x, "blk_in")
        d1 = nm.conv1d(x0, g["down1.w"], g["down1.b"], stride=2)
        d1 = self._block(d1, "blk_d1")
        d2 = nm.conv1d(d1, g["down2.w"], g["down2.b"], stride=2)
        d2 = self._block(d2, "blk_d2")
        if key_mask is not None:
            km = np.zeros((b, t + pad), dtype=np.float32)
            km[:, :t] = key_mask
            km4 = km.reshape(b, -1, 4).max(axis=2)
        else:
            km4 = None
        mid = self._mid(d2, km4)
        u2 = nm.upsample_repeat(mid, 2, axis=1)
        u2 = nm.conv1d(u2, g["up2.w"], g["up2.b"])
        u2 = self._block(nm.add(u2, d1), "blk_u2")
        u1 = nm.upsample_repeat(u2, 2, axis=1)
        u1 = nm.conv1d(u1, g["up1.w"], g["up1.b"])
        u1 = self._block(nm.add(u1, x0), "blk_u1")
        h = nm.layer_norm(u1, g["out_ln.g"], g["out_ln.b"])
        out = nm.add(nm.matmul(h, g["out.w"]), g["out.b"])
        if pad:
            out = nm.take_slice(out, (slice(None), slice(0, t)))
        return out

    def __call__(self, x_t: np.ndarray, t: float,
                 cond: FlowCondition | None) -> nm.Tensor:
        """Single utterance: normalized (T, mel) point -> (T, mel) velocity."""
        if x_t.ndim != 2 or x_t.shape[1] != dsp.N_MELS:
            raise DimensionError(f"x_t must be T x {dsp.N_MELS}, got {x_t.shape}")
        cols = self._condition_channels(x_t.shape[0], cond, t)
        canvas = np.concatenate([x_t.astype(np.float32), cols], axis=1)[None]
        return nm.take_slice(self.forward_canvas(canvas), 0)


# -- training ----------------------------------------------------------------


def mask_fraction(rng: np.random.Generator, lo: float = 0.7,
                  hi: float = 1.0) -> float:
    return float(rng.uniform(lo, hi))


def cfm_train_step(net: FieldNet, batch: list[dict], rng: np.random.Generator,
                   p_uncond: float = 0.1) -> nm.Tensor:
    """One regression step of the velocity field on a batch of utterances.

    batch items: {"tokens": list[int], "speaker": (D,), "mel": raw (T, mel)}.
    Per item: t ~ U[0,1], x0 ~ N(0,I); the reference is the utterance's own
    mel with a trailing fraction m ~ U[0.7, 1.0] hidden, so the net learns to
    continue a visible prefix. With probability p_uncond all conditioning is
    dropped, which trains the null branch that guidance subtracts.
    """
    if not batch:
        raise ContractError("empty flow batch")
    b = len(batch)
    tmax = max(item["mel"].shape[0] for item in batch)
    canvas = np.zeros((b, tmax, net.in_dim), dtype=np.float32)
    target = np.zeros((b, tmax, dsp.N_MELS), dtype=np.float32)
    weight = np.zeros((b, tmax, dsp.N_MELS), dtype=np.float32)
    key_mask = np.zeros((b, tmax), dtype=np.float32)
    times = []
    for i, item in enumerate(batch):
        mel = np.asarray(item["mel"], dtype=np.float32)
        t_i = float(rng.uniform(0.0, 1.0))
        times.append(t_i)
        x1 = net.normalize(mel)
        x0 = rng.standard_normal(x1.shape).astype(np.float32)
        x_t, u_t = ot_path(x0, x1, t_i)
        n = mel.shape[0]
        if rng.random() < p_uncond:
            cond = None
        else:
            m = mask_fraction(rng)
            visible = int(round((1.0 - m) * n))
            mask = np.zeros(n, dtype=bool)
            mask[:visible] = True
            cond = FlowCondition(tokens=item["tokens"], speaker=item["speaker"],
                                 ref_mel=mel, ref_mask=mask)
        cols = net._condition_channels(n, cond, t_i)
        canvas[i, :n] = np.concatenate([x_t.astype(np.float32), cols], axis=1)
        target[i, :n] = u_t
        weight[i, :n] = 1.0 / (n * dsp.N_MELS * b)
        key_mask[i, :n] = 1.0
    pred = net.forward_canvas(canvas, key_mask=key_mask)
    diff = nm.sub(pred, nm.Tensor(target))
    loss = nm.reduce_sum(nm.mul(nm.mul(diff, diff), nm.Tensor(weight)))
    if not np.isfinite(loss.data):
        raise NumericError(
            f"flow loss is not finite (batch of {b}, t values {times})")
    return loss


def train_flow(items: list[dict], seed: int = 0, max_epochs: int = 4,
               batch_size: int = 16, lr: float = 1e-3,
               log=lambda s: None) -> tuple[FieldNet, dict]:
    """Fit the velocity field on (tokens, speaker, mel) triples."""
    cfg = FlowConfig(speaker_dim=items[0]["speaker"].shape[0])
    net = FieldNet(cfg=cfg, seed=seed)
    net.set_mel_norm([np.asarray(it["mel"], dtype=np.float32) for it in items])
    rng = np.random.default_rng([seed, 0xF10A])
    opt = nm.Adam(net.parameters(), lr=lr, grad_clip=1.0)
    steps_per_epoch = max(len(items) // batch_size, 1)
    total_steps = max_epochs * steps_per_epoch
    curve = {"epoch_loss": [], "seconds": []}
    step = 0
    t_start = time.time()
    for epoch in range(max_epochs):
        order = rng.permutation(len(items))
        order = sorted(order, key=lambda i: items[i]["mel"].shape[0])
        batches = [order[b0:b0 + batch_size]
                   for b0 in range(0, steps_per_epoch * batch_size, batch_size)]
        rng.shuffle(batches)
        losses = []
        for idxs in batches:
            if len(idxs) == 0:
                continue
            opt.lr = nm.cosine_lr(step, total_steps, lr,
                                  warmup=steps_per_epoch // 2, floor=0.1 * lr)
            loss = cfm_train_step(net, [items[i] for i in idxs], rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        curve["epoch_loss"].append(float(np.mean(losses)))
        curve["seconds"].append(time.time() - t_start)
        log(f"epoch {epoch}: loss {np.mean(losses):.4f}")
    net.trained = True
    return net, curve


# -- guidance and sampling ---------------------------------------------------


def cfg_field(net: FieldNet, x_t: np.ndarray, t: float,
              cond: FlowCondition | None, beta: float) -> np.ndarray:
    """(1 + beta) * conditional - beta * unconditional velocity estimate."""
    v_cond = net(x_t, t, cond).data
    if beta == 0.0 or cond is None:
        return v_cond
    v_null = net(x_t, t, None).data
    return (1.0 + beta) * v_cond - beta * v_null


def ode_generate(net: FieldNet, cond: FlowCondition,
                 cfg: ODEConfig | None = None,
                 rng: np.random.Generator | None = None) -> dsp.MelSpectrogram:
    """Integrate the guided field from noise; length = tokens x 2 frames."""
    cfg = cfg or ODEConfig()
    if not net.trained:
        raise StateError("flow net is untrained; train or load a checkpoint")
    rng = rng or np.random.default_rng(0)
    t_frames = len(cond.tokens) * FRAMES_PER_TOKEN
    x = rng.standard_normal((t_frames, dsp.N_MELS)).astype(np.float32)
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        v = cfg_field(net, x, k * dt, cond, cfg.beta)
        x = x + dt * v.astype(np.float32)
    return dsp.MelSpectrogram(frames=net.denormalize(x))


# -- speaker embeddings ------------------------------------------------------


class SpeakerNet:
    """Two-hidden-layer classifier over pooled mel statistics.

    The embedding is the second hidden layer, L2-normalized; class logits
    exist only to give that layer something speaker-shaped to learn.
    """

    FEAT_DIM = 2 * dsp.N_MELS

    def __init__(self, n_speakers: int = 16, seed: int = 0):
        self.n_speakers = n_speakers
        rng = np.random.default_rng([seed, 0x5BEA])
        self.params: dict[str, nm.Tensor] = {}
        self._dims = (self.FEAT_DIM, 128, 64, n_speakers)
        for i, (fi, fo) in enumerate(zip(self._dims, self._dims[1:])):
            self.params[f"l{i}.w"] = nm.Tensor(
                (rng.standard_normal((fi, fo)) / np.sqrt(fi)).astype(np.float32),
                requires_grad=True)
            self.params[f"l{i}.b"] = nm.zeros((fo,), requires_grad=True)
        self.feat_mu = np.zeros(self.FEAT_DIM, dtype=np.float32)
        self.feat_sd = np.ones(self.FEAT_DIM, dtype=np.float32)
        self.trained = False

    @staticmethod
    def pooled_features(w: dsp.Waveform) -> np.ndarray:
        mel = dsp.log_mel(w).frames
        return np.concatenate([mel.mean(axis=0), mel.std(axis=0)])

    def _hidden(self, feats: np.ndarray) -> nm.Tensor:
        x = nm.Tensor(((feats - self.feat_mu) / self.feat_sd).astype(np.float32))
        h = nm.gelu(nm.add(nm.matmul(x, self.params["l0.w"]), self.params["l0.b"]))
        return nm.gelu(nm.add(nm.matmul(h, self.params["l1.w"]), self.params["l1.b"]))

    def logits(self, feats: np.ndarray) -> nm.Tensor:
        h = self._hidden(feats)
        return nm.add(nm.matmul(h, self.params["l2.w"]), self.params["l2.b"])

    def embed(self, w: dsp.Waveform) -> np.ndarray:
        if w.samples.size < int(MIN_SPEAKER_SECONDS * dsp.SAMPLE_RATE):
            raise LengthError(
                f"speaker embedding needs >= {MIN_SPEAKER_SECONDS} s of audio")
        h = self._hidden(self.pooled_features(w)[None]).data[0]
        norm = np.linalg.norm(h)
        if norm == 0:
            raise NumericError("degenerate zero embedding")
        return (h / norm).astype(np.float32)

    def classify(self, w: dsp.Waveform) -> int:
        return int(self.logits(self.pooled_features(w)[None]).data[0].argmax())

    def save(self, path):
        meta = {"kind": "speaker", "n_speakers": self.n_speakers,
                "trained": self.trained}
        tensors = dict(self.params)
        tensors["norm.mu"] = nm.Tensor(self.feat_mu)
        tensors["norm.sd"] = nm.Tensor(self.feat_sd)
        nm.save_tensors(path, tensors, meta=meta)

    @classmethod
    def load(cls, path) -> "SpeakerNet":
        arrays, meta = nm.load_tensors(path, with_meta=True)
        if not meta or meta.get("kind") != "speaker":
            raise StateError(f"{path} is not a speaker checkpoint")
        net = cls(n_speakers=int(meta["n_speakers"]))
        for name, arr in arrays.items():
            if name == "norm.mu":
                net.feat_mu = arr.astype(np.float32)
            elif name == "norm.sd":
                net.feat_sd = arr.astype(np.float32)
            else:
                net.params[name].data = arr.astype(np.float32)
        net.trained = bool(meta.get("trained", False))
        return net


def train_speaker_classifier(waves: list[dsp.Waveform], labels: list[int],
                             n_speakers: int = 16, seed: int = 0,
                             epochs: int = 30, batch_size: int = 32,
                             lr: float = 3e-3,
                             log=lambda s: None) -> SpeakerNet:
    """Fit the classifier on labeled clips; inputs are pooled mel statistics."""
    if len(waves) != len(labels):
        raise ContractError("waves and labels differ in length")
    net = SpeakerNet(n_speakers=n_speakers, seed=seed)
    feats = np.stack([SpeakerNet.pooled_features(w) for w in waves])
    net.feat_mu = feats.mean(axis=0).astype(np.float32)
    net.feat_sd = (feats.std(axis=0) + 1e-3).astype(np.float32)
    y = np.asarray(labels)
    rng = np.random.default_rng([seed, 0x5BEB])
    opt = nm.Adam(net.parameters(), lr=lr)
    for epoch in range(epochs):
        order = rng.permutation(len(waves))
        losses = []
        for b0 in range(0, len(order), batch_size):
            idx = order[b0:b0 + batch_size]
            logits = net.logits(feats[idx])
            logp = nm.log_softmax(logits, axis=-1)
            hot = np.zeros(logp.shape, dtype=np.float32)
            hot[np.arange(len(idx)), y[idx]] = 1.0
            loss = nm.mul(nm.reduce_sum(nm.mul(logp, nm.Tensor(hot))),
                          -1.0 / len(idx))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log(f"speaker epoch {epoch}: loss {np.mean(losses):.4f}")
    net.trained = True
    return net


# -- mel artifacts -----------------------------------------------------------


def save_mel(path: str | os.PathLike, m: dsp.MelSpectrogram):
    """Raw little-endian float32 rows plus a JSON sidecar describing them."""
    frames = np.ascontiguousarray(m.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(frames.tobytes())
    side = {"frames": int(frames.shape[0]), "bins": int(frames.shape[1]),
            "hop": m.hop}
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=1)


def load_mel(path: str | os.PathLike) -> dsp.MelSpectrogram:
    try:
        with open(str(path) + ".json") as fh:
            side = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing mel sidecar for {path}")
    except json.JSONDecodeError as e:
        raise FormatError(f"bad mel sidecar for {path}: {e}")
    raw = np.fromfile(path, dtype="<f4")
    want = side["frames"] * side["bins"]
    if raw.size != want:
        raise FormatError(
            f"{path}: {raw.size} floats, sidecar promises {want}")
    return dsp.MelSpectrogram(frames=raw.reshape(side["frames"], side["bins"])
                              .astype(np.float32), hop=side["hop"])
