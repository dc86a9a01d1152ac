"""Spatial-attention weighted unmixing autoencoder: forward pass, loss, training, inference.

Batched layouts used throughout (B = batch, S = K*K window slots):

    windows   B x S x L    raw window spectra, slot order p*K + q
    x_center  B x L        centre pixel spectrum
    attention B x S x S    row-stochastic mixing weights
    h         B x S x P    coarse abundances, one row per slot
    s         B x P        normalized centre abundance
    x_hat     B x L        reconstruction
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import HsiCube, WindowExtractor, BatchPlan, check_window_size, make_batches
from .errors import CubeFormatError, DomainError, NonFiniteError, TrainingError, UsageError
from .tensor import BatchNormState, Tensor
from .vca import vca

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    """Hyperparameters; defaults follow the published Jasper Ridge setting."""

    P: int = 4
    L: int = 100
    K: int = 3
    lambda1: float = 12.0
    lambda2: float = 2e-3
    dropout: float = 0.1
    eps: float = 1e-9
    use_pixel_attention: bool = True
    epochs: int = 300
    batch_size: int = 128
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-5
    padding: str = "reflect"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        check_window_size(self.K)
        if not 0 < self.P < self.L:
            raise UsageError(f"need 0 < P < L, got P={self.P}, L={self.L}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise UsageError("loss weights must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 0 or self.batch_size < 1:
            raise UsageError("epochs must be >= 0 and batch size >= 1")
        if self.lr_encoder <= 0 or self.lr_decoder <= 0:
            raise UsageError("learning rates must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


ENCODER_GROUP = ("pa_weight", "pa_bias", "wa_weight", "wa_bias", "enc_weight", "bn_gamma", "bn_beta")
DECODER_GROUP = ("dec_weight",)


@dataclass
class ModelParams:
    pa_weight: np.ndarray  # L, per-band 1x1 conv scale
    pa_bias: np.ndarray  # L
    wa_weight: np.ndarray  # L x K^4
    wa_bias: np.ndarray  # K^4
    enc_weight: np.ndarray  # P x L
    bn_gamma: np.ndarray  # P
    bn_beta: np.ndarray  # P
    dec_weight: np.ndarray  # L x P, columns are endmembers
    bn: BatchNormState = field(default=None)

    def __post_init__(self):
        if self.bn is None:
            self.bn = BatchNormState.fresh(self.enc_weight.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ENCODER_GROUP + DECODER_GROUP}

    def copy(self) -> "ModelParams":
        bn = BatchNormState(self.bn.mean.copy(), self.bn.var.copy(), self.bn.momentum, self.bn.eps)
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()}, bn=bn)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(config: ModelConfig, endmembers: np.ndarray, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit BN scale; decoder from ``endmembers``."""
    L, P, K = config.L, config.P, config.K
    s2 = K * K
    if endmembers.shape != (L, P):
        raise UsageError(f"decoder init must be {L}x{P}, got {endmembers.shape}")
    return ModelParams(
        pa_weight=_glorot(rng, L, 1, 1),
        pa_bias=np.zeros(L),
        wa_weight=_glorot(rng, (L, s2 * s2), L, s2 * s2),
        wa_bias=np.zeros(s2 * s2),
        enc_weight=_glorot(rng, (P, L), L, P),
        bn_gamma=np.ones(P),
        bn_beta=np.zeros(P),
        dec_weight=np.maximum(np.array(endmembers, dtype=np.float64), 0.0),
    )


# -- forward pieces -----------------------------------------------------------

def pixel_attention(x_center: Tensor, weight: Tensor, bias: Tensor, enabled: bool = True) -> Tensor:
    """x * sigmoid(w * x + b), per band."""
    if not enabled:
        return x_center
    return T.mul(x_center, T.sigmoid(T.add(T.mul(x_center, weight), bias)))


def window_attention(x_pa: Tensor, weight: Tensor, bias: Tensor, k: int) -> Tensor:
    """Project the gated centre spectrum to K^2 x K^2 logits and softmax each row."""
    s2 = k * k
    if weight.shape != (x_pa.shape[-1], s2 * s2):
        raise UsageError(f"attention projection must be {x_pa.shape[-1]}x{s2 * s2}, got {weight.shape}")
    lead = x_pa.shape[:-1]
    flat = T.reshape(x_pa, (-1, x_pa.shape[-1]))
    logits = T.add(T.matmul(flat, weight), bias)
    return T.softmax_rows(T.reshape(logits, lead + (s2, s2)))


def encode(windows: Tensor, weight: Tensor, gamma: Tensor, beta: Tensor, bn: BatchNormState,
           training: bool, dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """ReLU(Dropout(BN(W x))) for every window pixel; returns ... x S x P."""
    lead = windows.shape[:-1]
    flat = T.reshape(windows, (-1, windows.shape[-1]))
    z = T.matmul(flat, T.transpose(weight))
    z = T.batch_norm(z, gamma, beta, bn, training)
    z = T.dropout(z, dropout, rng, training)
    return T.reshape(T.relu(z), lead + (weight.shape[0],))


def weighted_fold(attention: Tensor, h: Tensor) -> Tensor:
    """Mix slot abundances with the attention rows, then sum over slots.

    With h_delta = h^T (P x S) this is rowsum(h_delta @ attention^T).
    """
    if attention.shape[-1] != h.shape[-2]:
        raise UsageError(f"attention {attention.shape} does not conform with abundances {h.shape}")
    return T.sum(T.matmul(attention, h), axis=-2)


def normalize_abundance(h_sum: Tensor, eps: float) -> Tensor:
    return T.l1_normalize(h_sum, eps)


def decode(s: Tensor, dec_weight: Tensor) -> Tensor:
    return T.matmul(s, T.transpose(dec_weight)) if s.data.ndim >= 2 else \
        T.reshape(T.matmul(T.reshape(s, (1, -1)), T.transpose(dec_weight)), (-1,))


def loss(x_center, x_hat: Tensor, s: Tensor, lambda1: float, lambda2: float) -> Tensor:
    """Mean over the batch of lambda1 * SAD(x, x_hat) + lambda2 * sum(sqrt(s))."""
    per = T.add(T.scale(T.sad(x_center, x_hat), lambda1), T.scale(T.l_half(s), lambda2))
    return T.mean(per)


@dataclass
class Forward:
    x_pa: Tensor | None
    attention: Tensor | None
    h: Tensor
    h_sum: Tensor
    s: Tensor
    x_hat: Tensor


def forward(leaves: dict[str, Tensor], bn: BatchNormState, windows: np.ndarray, config: ModelConfig,
            training: bool, rng: np.random.Generator | None = None, attention: bool = True) -> Forward:
    """Full pass for a B x S x L batch of windows.

    ``attention=False`` is the plain autoencoder: only the centre pixel is
    encoded and its abundance goes straight to normalization.
    """
    centre = (windows.shape[1] - 1) // 2
    x_center = Tensor(windows[:, centre, :])
    if attention:
        x_pa = pixel_attention(x_center, leaves["pa_weight"], leaves["pa_bias"], config.use_pixel_attention)
        att = window_attention(x_pa, leaves["wa_weight"], leaves["wa_bias"], config.K)
        h = encode(Tensor(windows), leaves["enc_weight"], leaves["bn_gamma"], leaves["bn_beta"], bn,
                   training, config.dropout, rng)
        h_sum = weighted_fold(att, h)
    else:
        x_pa = att = None
        h = encode(Tensor(windows[:, centre:centre + 1, :]), leaves["enc_weight"], leaves["bn_gamma"],
                   leaves["bn_beta"], bn, training, config.dropout, rng)
        h_sum = T.reshape(h, (h.shape[0], h.shape[2]))
    s = normalize_abundance(h_sum, config.eps)
    x_hat = decode(s, leaves["dec_weight"])
    return Forward(x_pa, att, h, h_sum, s, x_hat)


def batch_loss(fw: Forward, x_center: np.ndarray, config: ModelConfig) -> tuple[Tensor | None, int]:
    """Loss over the non-degenerate batch members and the count of degenerate ones.

    A member is degenerate when every coarse abundance is zero, so its
    reconstruction is the zero vector and the spectral angle is undefined.
    """
    ok = np.flatnonzero(fw.s.data.sum(axis=-1) > 0)
    n_bad = fw.s.shape[0] - ok.size
    if ok.size == 0:
        return None, n_bad
    if ok.size == fw.s.shape[0]:
        return loss(Tensor(x_center), fw.x_hat, fw.s, config.lambda1, config.lambda2), 0
    return loss(Tensor(x_center[ok]), T.take_rows(fw.x_hat, ok), T.take_rows(fw.s, ok),
                config.lambda1, config.lambda2), n_bad


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    history: list[float]
    degenerate: int = 0


def initial_params(cube: HsiCube, config: ModelConfig) -> ModelParams:
    """Parameters at step zero: VCA decoder plus seeded random weights."""
    rng = np.random.default_rng(config.seed)
    init = vca(cube, config.P, seed=config.seed).endmembers
    return init_params(config, init, rng)


def train(cube: HsiCube, config: ModelConfig, attention: bool = True,
          params: ModelParams | None = None) -> TrainResult:
    """Mini-batch Adam with separate encoder and decoder learning rates.

    Deterministic for a fixed config: batch order comes from ``BatchPlan``
    and dropout masks from one generator seeded by ``config.seed``.
    """
    config.validate()
    if cube.bands != config.L:
        raise UsageError(f"cube has {cube.bands} bands but config says L={config.L}")
    k = config.K if attention else 1
    if params is None:
        params = initial_params(cube, config)
    rng = np.random.default_rng([config.seed, 1])
    enc_state = T.AdamState.for_params([getattr(params, n) for n in ENCODER_GROUP])
    dec_state = T.AdamState.for_params([params.dec_weight])
    extractor = WindowExtractor(cube, k, config.padding)
    plan = BatchPlan(config.seed, config.batch_size)
    centre = extractor.center_row

    history: list[float] = []
    degenerate = 0
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for b, batch in enumerate(make_batches(cube, plan, k, epoch=epoch, extractor=extractor)):
            leaves = {n: Tensor(a, requires_grad=True) for n, a in params.arrays().items()}
            try:
                fw = forward(leaves, params.bn, batch.windows, config, True, rng, attention)
                value, n_bad = batch_loss(fw, batch.windows[:, centre], config)
            except (NonFiniteError, DomainError) as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            degenerate += n_bad
            if value is None:
                continue
            value.backward()
            zero = np.zeros
            enc_grads = [leaves[n].grad if leaves[n].grad is not None else zero(leaves[n].shape)
                         for n in ENCODER_GROUP]
            dec_grad = leaves["dec_weight"].grad
            try:
                T.adam_step([getattr(params, n) for n in ENCODER_GROUP], enc_grads, enc_state,
                            config.lr_encoder)
                T.adam_step([params.dec_weight], [dec_grad], dec_state, config.lr_decoder)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            np.maximum(params.dec_weight, 0.0, out=params.dec_weight)
            n_ok = batch.index.size - n_bad
            total += float(value.data) * n_ok
            count += n_ok
        epoch_loss = total / count if count else float("nan")
        if count and not np.isfinite(epoch_loss):
            raise TrainingError(f"epoch {epoch}: non-finite mean loss")
        history.append(epoch_loss)
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
    if degenerate:
        log.info("training saw %d degenerate (all-zero) abundance vectors", degenerate)
    return TrainResult(params, history, degenerate)


# -- inference ----------------------------------------------------------------

@dataclass
class Inference:
    abundances: np.ndarray  # H x W x P
    degenerate: int
    attention_row_error: float  # max |row sum - 1| over all attention maps


def infer_abundances(params: ModelParams, cube: HsiCube, config: ModelConfig, attention: bool = True,
                     chunk: int = 512) -> Inference:
    k = config.K if attention else 1
    extractor = WindowExtractor(cube, k, config.padding)
    leaves = {n: Tensor(a) for n, a in params.arrays().items()}
    out = np.empty((cube.n_pixels, config.P))
    row_err = 0.0
    for start in range(0, cube.n_pixels, chunk):
        idx = np.arange(start, min(start + chunk, cube.n_pixels))
        fw = forward(leaves, params.bn, extractor.windows(idx), config, False, None, attention)
        out[idx] = fw.s.data
        if fw.attention is not None:
            row_err = max(row_err, float(np.max(np.abs(fw.attention.data.sum(axis=-1) - 1.0))))
    degenerate = int(np.sum(out.sum(axis=1) == 0))
    if degenerate:
        log.info("inference produced %d degenerate (all-zero) abundance vectors", degenerate)
    return Inference(out.reshape(cube.height, cube.width, config.P), degenerate, row_err)


def extract_endmembers(params: ModelParams) -> np.ndarray:
    return params.dec_weight.copy()


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"SAWUCKP1"


def save_checkpoint(path, params: ModelParams, config: ModelConfig, attention: bool = True) -> None:
    """Binary checkpoint: magic, JSON config block, then named float64 tensors.

    Layout: magic(8) | u32 config length | config JSON | u32 tensor count |
    per tensor: u32 name length, name, u32 ndim, u32 dims..., f64 LE data.
    """
    meta = {"config": config.to_dict(), "attention": attention}
    tensors = dict(params.arrays())
    tensors["bn_running_mean"] = params.bn.mean
    tensors["bn_running_var"] = params.bn.var
    tensors["bn_settings"] = np.array([params.bn.momentum, params.bn.eps])
    buf = io.BytesIO()
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, bool]:
    raw = Path(path).read_bytes()
    try:
        if raw[:8] != CKPT_MAGIC:
            raise CubeFormatError(f"{path}: not a checkpoint")
        pos = 8
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = json.loads(raw[pos:pos + n])
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nl].decode()
            pos += nl
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(raw):
                raise CubeFormatError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw, "<f8", size, pos).astype(np.float64).reshape(shape)
            pos += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CubeFormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    momentum, eps = tensors.pop("bn_settings")
    bn = BatchNormState(tensors.pop("bn_running_mean"), tensors.pop("bn_running_var"), float(momentum), float(eps))
    params = ModelParams(**tensors, bn=bn)
    return params, ModelConfig.from_dict(meta["config"]), bool(meta["attention"])
