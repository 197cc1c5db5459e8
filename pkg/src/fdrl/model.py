"""
FDRL network components over diffcore tensors.

Shared encoder (one parameter set for both modalities), two private
encoders, a global domain discriminator, a bank of per-class local
subdomain discriminators, a modality discriminator on the private codes,
the one-layer fine-grained predictor and the attention fusion head.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError, HeaderError, ValidationError

SPEECH, TEXT = 0, 1
N_CODES = 4  # S_a, S_t, P_a, P_t


def _uniform(rng, fan_in, fan_out):
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros((1, n)), requires_grad=True)


@dataclass
class MLP2:
    """Linear -> ReLU -> Linear. Used for encoders and discriminators."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, d_in, hidden, d_out):
        return cls(_uniform(rng, d_in, hidden), _zeros(hidden), _uniform(rng, hidden, d_out), _zeros(d_out))

    @property
    def input_dim(self):
        return self.W1.rows

    @property
    def out_dim(self):
        return self.W2.cols

    def __call__(self, x):
        if x.cols != self.input_dim:
            raise DimensionError(f"input width {x.cols} does not match layer input {self.input_dim}")
        h = dc.relu(dc.add_bias(dc.matmul(x, self.W1), self.b1))
        return dc.add_bias(dc.matmul(h, self.W2), self.b2)

    def named(self, prefix):
        return {f"{prefix}.W1": self.W1, f"{prefix}.b1": self.b1,
                f"{prefix}.W2": self.W2, f"{prefix}.b2": self.b2}


# Encoder and discriminator parameter sets share the same two-layer shape.
EncoderParams = MLP2
DiscriminatorParams = MLP2


@dataclass
class PredictorParams:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, d, classes):
        return cls(_uniform(rng, d, classes), _zeros(classes))

    def named(self, prefix):
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


@dataclass
class FusionParams:
    Wq: list
    Wk: list
    Wv: list
    W_task: Tensor
    b_task: Tensor

    @classmethod
    def init(cls, rng, d, heads, classes):
        if d % heads:
            raise ConfigError(f"d={d} is not divisible by heads={heads}")
        dh = d // heads
        Wq, Wk, Wv = [], [], []
        for _ in range(heads):
            Wq.append(_uniform(rng, d, dh))
            Wk.append(_uniform(rng, d, dh))
            Wv.append(_uniform(rng, d, dh))
        return cls(Wq, Wk, Wv, _uniform(rng, N_CODES * d, classes), _zeros(classes))

    @property
    def heads(self):
        return len(self.Wq)

    @property
    def head_dim(self):
        return self.Wq[0].cols

    def named(self, prefix):
        out = {}
        for i in range(self.heads):
            out[f"{prefix}.q.{i}"] = self.Wq[i]
            out[f"{prefix}.k.{i}"] = self.Wk[i]
            out[f"{prefix}.v.{i}"] = self.Wv[i]
        out[f"{prefix}.task.W"] = self.W_task
        out[f"{prefix}.task.b"] = self.b_task
        return out


@dataclass
class LatentPack:
    S_a: Tensor
    S_t: Tensor
    P_a: Tensor
    P_t: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.S_a, self.S_t, self.P_a, self.P_t)}
        if len(shapes) != 1:
            raise DimensionError(f"latent codes must share shape, got {sorted(shapes)}")

    @property
    def batch(self):
        return self.S_a.rows

    @property
    def modality_labels(self):
        """y_m for a row-stack of a speech block followed by a text block."""
        return modality_labels(self.batch, self.batch)


def modality_labels(n_a, n_t):
    return np.concatenate([np.full(n_a, SPEECH), np.full(n_t, TEXT)]).astype(np.int64)


@dataclass
class FDRLModel:
    shared: MLP2
    priv_a: MLP2
    priv_t: MLP2
    global_disc: MLP2
    local_discs: list
    modality_disc: MLP2
    predictor: PredictorParams
    fusion: FusionParams

    @classmethod
    def init(cls, d_in, d, classes, heads=4, hidden=None, seed=0):
        hidden = hidden or d
        if d % heads:
            raise ConfigError(f"d={d} is not divisible by heads={heads}")
        rng = np.random.default_rng(seed)
        return cls(
            shared=MLP2.init(rng, d_in, hidden, d),
            priv_a=MLP2.init(rng, d_in, hidden, d),
            priv_t=MLP2.init(rng, d_in, hidden, d),
            global_disc=MLP2.init(rng, d, hidden, 2),
            local_discs=[MLP2.init(rng, d, hidden, 2) for _ in range(classes)],
            modality_disc=MLP2.init(rng, d, hidden, 2),
            predictor=PredictorParams.init(rng, d, classes),
            fusion=FusionParams.init(rng, d, heads, classes),
        )

    @classmethod
    def from_config(cls, cfg):
        return cls.init(cfg.d_in, cfg.d, cfg.classes, cfg.heads, cfg.hidden_dim, cfg.seed)

    @property
    def d_in(self):
        return self.shared.input_dim

    @property
    def d(self):
        return self.shared.out_dim

    @property
    def classes(self):
        return self.predictor.W.cols

    def parameters(self):
        """Ordered name -> Tensor mapping of every trainable parameter."""
        out = {}
        out.update(self.shared.named("shared"))
        out.update(self.priv_a.named("priv_a"))
        out.update(self.priv_t.named("priv_t"))
        out.update(self.global_disc.named("global_disc"))
        for c, disc in enumerate(self.local_discs):
            out.update(disc.named(f"local_disc.{c}"))
        out.update(self.modality_disc.named("modality_disc"))
        out.update(self.predictor.named("predictor"))
        out.update(self.fusion.named("fusion"))
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def load_arrays(self, arrays):
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValidationError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def encode(H_a, H_t, shared, priv_a, priv_t):
    H_a, H_t = dc._as_tensor(H_a), dc._as_tensor(H_t)
    if H_a.shape != H_t.shape:
        raise DimensionError(f"speech batch {H_a.shape} and text batch {H_t.shape} differ")
    for enc in (shared, priv_a, priv_t):
        if H_a.cols != enc.input_dim:
            raise DimensionError(f"feature width {H_a.cols} does not match encoder input {enc.input_dim}")
    return LatentPack(S_a=shared(H_a), S_t=shared(H_t), P_a=priv_a(H_a), P_t=priv_t(H_t))


def global_domain_logits(S, disc, lam):
    """Discriminator logits behind a gradient reversal layer.

    ``lam=None`` replaces the reversal by the identity (used to verify the
    reversal contract).
    """
    x = S if lam is None else dc.grad_reverse(S, lam)
    return disc(x)


def _check_probs(class_probs, rows, classes):
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.shape != (rows, classes):
        raise DimensionError(f"class_probs shape {probs.shape}, expected {(rows, classes)}")
    dev = np.abs(probs.sum(axis=1) - 1.0)
    if dev.size and dev.max() > 1e-6:
        raise ValidationError(f"class probability rows must sum to 1 (worst deviation {dev.max():.3g})")
    return probs


def local_domain_logits(S, class_probs, discs, lam):
    """Per-class subdomain logits: list of C tensors, each B x 2.

    Class c's discriminator sees the shared codes weighted row-wise by the
    (constant) probability of class c.
    """
    probs = _check_probs(class_probs, S.rows, len(discs))
    out = []
    for c, disc in enumerate(discs):
        weighted = dc.mul_rows(S, probs[:, c])
        out.append(disc(weighted if lam is None else dc.grad_reverse(weighted, lam)))
    return out


def modality_disc_logits(P, disc):
    return disc(P)


def predict_fine(x, pred):
    return dc.add_bias(dc.matmul(x, pred.W), pred.b)


def class_probabilities(S, pred):
    """Predictor softmax on S, detached from the graph."""
    return dc.softmax_np(S.data @ pred.W.data + pred.b.data)


def stack_codes(pack):
    """(4B) x d matrix; rows 4b..4b+3 are S_a, S_t, P_a, P_t of sample b."""
    B, d = pack.S_a.shape
    wide = dc.concat_cols([pack.S_a, pack.S_t, pack.P_a, pack.P_t])
    return dc.reshape(wide, N_CODES * B, d)


def multi_head_attention(F, fusion, block=N_CODES, return_attention=False):
    """Self-attention inside each block of ``block`` rows, Q = K = V = F.

    Returns the heads concatenated column-wise, shape (nB) x (heads * d_h).
    """
    scale = 1.0 / math.sqrt(fusion.head_dim)
    heads, weights = [], []
    for Wq, Wk, Wv in zip(fusion.Wq, fusion.Wk, fusion.Wv):
        q, k, v = dc.matmul(F, Wq), dc.matmul(F, Wk), dc.matmul(F, Wv)
        att = dc.softmax_rows(dc.scale(dc.block_matmul_nt(q, k, block), scale))
        weights.append(att.data)
        heads.append(dc.block_matmul(att, v, block))
    out = heads[0] if len(heads) == 1 else dc.concat_cols(heads)
    if return_attention:
        return out, weights
    return out


def fuse(pack, fusion, return_attention=False):
    """Returns (F_task [B x 4d], task logits [B x C])."""
    B, d = pack.S_a.shape
    if fusion.head_dim * fusion.heads != d:
        raise ConfigError(f"fusion heads {fusion.heads} x {fusion.head_dim} do not cover d={d}")
    fused, weights = multi_head_attention(stack_codes(pack), fusion, return_attention=True)
    f_task = dc.reshape(fused, B, N_CODES * d)
    logits = dc.add_bias(dc.matmul(f_task, fusion.W_task), fusion.b_task)
    if return_attention:
        return f_task, logits, weights
    return f_task, logits


def predict_task(model, H_a, H_t):
    """Task logits as a plain array (no graph retained)."""
    pack = encode(Tensor(H_a), Tensor(H_t), model.shared, model.priv_a, model.priv_t)
    return fuse(pack, model.fusion)[1].data


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FDRLCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, model, config, extra=None):
    """Binary checkpoint: header, JSON config echo, named f64 tensor records.

    Layout (little-endian): magic[8], u32 version, u32 config_len,
    config JSON bytes, u32 n_records, then per record u16 name_len, name,
    u32 rows, u32 cols, f64 x rows*cols.
    """
    echo = {"config": config, "extra": extra or {}}
    blob = json.dumps(echo, sort_keys=True).encode("utf-8")
    params = model.parameters()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *t.shape))
        parts.append(t.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Returns (arrays: dict name -> ndarray, echo: dict with config/extra)."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise HeaderError(f"{path}: checkpoint truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(8) != CKPT_MAGIC:
        raise HeaderError(f"{path}: not an FDRL checkpoint")
    version, blob_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise HeaderError(f"{path}: unsupported checkpoint version {version}")
    echo = json.loads(take(blob_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        arrays[name] = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    return arrays, echo


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, echo)."""
    arrays, echo = read_checkpoint(path)
    cfg = echo["config"]
    model = FDRLModel.init(cfg["d_in"], cfg["d"], cfg["classes"], cfg["heads"],
                           cfg.get("hidden") or cfg["d"], seed=0)
    model.load_arrays(arrays)
    return model, echo
