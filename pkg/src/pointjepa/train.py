"""JEPA pretraining: block loss, EMA teacher, AdamW with warmup+cosine, checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from pointjepa.errors import CheckpointError, InvalidArgument, ModelMismatch, NumericFailure
from pointjepa.geom import tokenize
from pointjepa.masking import MaskConfig, sample_mask
from pointjepa.nn import LN_EPS, ModelConfig, PointJEPA
from pointjepa.sequencer import DEFAULT_BITS, order_centers

log = logging.getLogger(__name__)

TARGET_NORMS = ("instance", "none")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr_start: float = 1e-5
    lr_peak: float = 1e-3
    lr_end: float = 1e-6
    warmup_epochs: int = 6
    beta_smooth_l1: float = 2.0
    ema_tau_start: float = 0.995
    ema_tau_end: float = 1.0
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_clouds: int = 0  # 0 = use every training cloud
    rotate: bool = False
    jitter: float = 0.0
    target_norm: str = "none"  # "none" | "instance"

    def __post_init__(self):
        if min(self.lr_start, self.lr_peak, self.lr_end) <= 0:
            raise InvalidArgument("learning rates must be positive")
        if not (0 <= self.ema_tau_start <= 1 and 0 <= self.ema_tau_end <= 1):
            raise InvalidArgument("EMA decay rates must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise InvalidArgument("warmup_epochs must lie in [0, epochs]")
        if self.beta_smooth_l1 <= 0:
            raise InvalidArgument("beta_smooth_l1 must be positive")
        if self.jitter < 0:
            raise InvalidArgument("jitter must be non-negative")
        if self.target_norm not in TARGET_NORMS:
            raise InvalidArgument(f"target_norm must be one of {TARGET_NORMS}")


# Loss ---------------------------------------------------------------------------

def smooth_l1_elementwise(pred, target, beta: float):
    d = (pred - target).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def smooth_l1(pred, target, beta: float = 2.0):
    if pred.shape != target.shape:
        raise InvalidArgument(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if beta <= 0:
        raise InvalidArgument("beta must be positive")
    return smooth_l1_elementwise(pred, target, beta).mean()


def jepa_loss(predictions, targets, beta: float = 2.0):
    """Average over blocks of the summed per-vector smooth-L1 (element mean within a vector)."""
    if len(predictions) == 0:
        raise InvalidArgument("need at least one target block")
    if len(predictions) != len(targets):
        raise InvalidArgument("predictions and targets differ in block count")
    total = 0.0
    for p, t in zip(predictions, targets):
        if p.shape != t.shape:
            raise InvalidArgument(f"block shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
        total = total + smooth_l1_elementwise(p, t, beta).mean(dim=-1).sum()
    return total / len(predictions)


# Schedules ----------------------------------------------------------------------

def lr_schedule(step: int, warmup_steps: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay reaching ``lr_end`` at the last step.

    Both branches are written as convex combinations so the endpoints are exact.
    """
    final = max(total_steps - 1, 0)
    if step < warmup_steps:
        t = step / warmup_steps
        return cfg.lr_start * (1.0 - t) + cfg.lr_peak * t
    span = final - warmup_steps
    p = 1.0 if span <= 0 else min((step - warmup_steps) / span, 1.0)
    w = 0.5 * (1.0 + math.cos(math.pi * p))
    return cfg.lr_end * (1.0 - w) + cfg.lr_peak * w


def tau_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    final = total_steps - 1
    t = 1.0 if final <= 0 else min(step / final, 1.0)
    return cfg.ema_tau_start * (1.0 - t) + cfg.ema_tau_end * t


# EMA and optimizer --------------------------------------------------------------

@torch.no_grad()
def ema_update(target_params, context_params, tau: float):
    """In place: target <- tau * target + (1 - tau) * context."""
    if not 0 <= tau <= 1:
        raise InvalidArgument(f"tau must lie in [0, 1], got {tau}")
    target_params, context_params = list(target_params), list(context_params)
    if len(target_params) != len(context_params):
        raise InvalidArgument("parameter trees differ in length")
    for t, c in zip(target_params, context_params):
        if t.shape != c.shape:
            raise InvalidArgument(f"parameter shape mismatch {tuple(t.shape)} vs {tuple(c.shape)}")
        t.mul_(tau).add_(c, alpha=1.0 - tau)


@torch.no_grad()
def adamw_step(param, grad, exp_avg, exp_avg_sq, step: int, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8):
    """One decoupled-weight-decay Adam update, in place. ``step`` counts from 1."""
    beta1, beta2 = betas
    exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    bc1 = 1 - beta1 ** step
    bc2 = 1 - beta2 ** step
    if weight_decay:
        param.mul_(1 - lr * weight_decay)
    denom = (exp_avg_sq / bc2).sqrt_().add_(eps)
    param.addcdiv_(exp_avg, denom, value=-lr / bc1)


class AdamW:
    """Named-parameter AdamW; weight decay applies to matrices only."""

    def __init__(self, named_params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.exp_avg = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def step(self, lr: float):
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            wd = self.weight_decay if p.dim() >= 2 else 0.0
            adamw_step(p, p.grad, self.exp_avg[name], self.exp_avg_sq[name], self.step_count,
                       lr, wd, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# Data preparation ---------------------------------------------------------------

def prepare_tokens(clouds, model_cfg: ModelConfig, sequencer: str = "greedy-min-coord",
                   bits: int = DEFAULT_BITS):
    """Tokenize and order every cloud: returns local (N, c, k, 3) and centers (N, c, 3)."""
    locs, cents = [], []
    for pts in clouds:
        ps = tokenize(pts, model_cfg.c, model_cfg.k)
        order = order_centers(ps.centers, sequencer, bits)
        locs.append(ps.local_coords[order])
        cents.append(ps.centers[order])
    return np.stack(locs).astype(np.float32), np.stack(cents).astype(np.float32)


def _augment(clouds, cfg: TrainConfig, rng):
    from scipy.spatial.transform import Rotation

    out = []
    for pts in clouds:
        p = np.asarray(pts, dtype=np.float64)
        if cfg.rotate:
            p = p @ Rotation.random(random_state=rng).as_matrix().T
        if cfg.jitter > 0:
            p = p + rng.normal(0.0, cfg.jitter, size=p.shape)
        out.append(p.astype(np.float32))
    return out


# Training -----------------------------------------------------------------------

def _pad_indices(rows):
    width = max(len(r) for r in rows)
    idx = np.zeros((len(rows), width), dtype=np.int64)
    pad = np.ones((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        idx[i, : len(r)] = r
        pad[i, : len(r)] = False
    return torch.from_numpy(idx), torch.from_numpy(pad)


def _gather(x, idx):
    # x: (B, L, F), idx: (B, m) -> (B, m, F)
    return torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))


def normalize_targets(y, mode: str = "instance"):
    """Optionally standardize each channel over the token axis of every cloud.

    Teacher outputs that are constant across tokens become zero, which removes
    the trivial constant-target solution.
    """
    if mode == "none":
        return y
    mean = y.mean(dim=-2, keepdim=True)
    var = y.var(dim=-2, keepdim=True, unbiased=False)
    return (y - mean) / torch.sqrt(var + LN_EPS)


@torch.no_grad()
def compute_targets(model: PointJEPA, local, centers, target_norm: str = "none"):
    """Teacher encodings of every token; no gradient reaches any parameter."""
    y = model.target_encoder(model.point_encoder(local), centers, model.pos_encoder)
    return normalize_targets(y, target_norm)


def batch_loss(model: PointJEPA, local, centers, masks, beta: float, targets=None,
               target_norm: str = "none"):
    """JEPA loss for a batch of ordered token sequences, averaged over the batch.

    ``masks`` holds one MaskSample per cloud; positions refer to the ordered
    sequence. ``targets`` may be passed precomputed (see :func:`compute_targets`).
    """
    b = local.shape[0]
    tokens = model.point_encoder(local)  # (B, c, D)
    if targets is None:
        with torch.no_grad():
            targets = model.target_encoder(tokens.detach(), centers, model.pos_encoder)
            targets = normalize_targets(targets, target_norm)

    ctx_idx, ctx_pad = _pad_indices([m.context for m in masks])
    x = model.context_encoder(_gather(tokens, ctx_idx), _gather(centers, ctx_idx),
                              model.pos_encoder, ctx_pad)
    ctx_pos = _gather(centers, ctx_idx)

    owner, blocks = [], []
    for i, m in enumerate(masks):
        for blk in m.target_blocks:
            owner.append(i)
            blocks.append(blk)
    owner = torch.tensor(owner, dtype=torch.long)
    tgt_idx, tgt_pad = _pad_indices(blocks)
    pred = model.predictor(x[owner], ctx_pos[owner], _gather(centers[owner], tgt_idx),
                           ctx_pad[owner], tgt_pad)
    y = _gather(targets[owner], tgt_idx)
    per_vec = smooth_l1_elementwise(pred, y, beta).mean(dim=-1).masked_fill(tgt_pad, 0.0)
    per_block = per_vec.sum(dim=1)
    n_blocks = torch.tensor([len(m.target_blocks) for m in masks], dtype=per_block.dtype)
    per_sample = torch.zeros(b, dtype=per_block.dtype).index_add(0, owner, per_block) / n_blocks
    return per_sample.mean()


@dataclass
class TrainState:
    model: PointJEPA
    optimizer: AdamW
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    step: int = 0  # completed optimizer steps
    loss_log: list = field(default_factory=list)  # rows (epoch, step, loss, lr, tau)
    config_hash: str = ""


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, mask_cfg: MaskConfig,
                sequencer: str) -> str:
    blob = json.dumps(
        {"model": asdict(model_cfg), "train": asdict(train_cfg),
         "mask": {**asdict(mask_cfg), "strategy": mask_cfg.strategy.value}, "sequencer": sequencer},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig, chash: str = "") -> TrainState:
    torch.manual_seed(train_cfg.seed)
    model = PointJEPA(model_cfg)
    opt = AdamW(model.trainable_named_parameters(), train_cfg.weight_decay,
                (train_cfg.adam_beta1, train_cfg.adam_beta2), train_cfg.adam_eps)
    return TrainState(model, opt, np.random.default_rng(train_cfg.seed), config_hash=chash)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def pretrain(clouds, state: TrainState, train_cfg: TrainConfig, mask_cfg: MaskConfig,
             sequencer: str = "greedy-min-coord", bits: int = DEFAULT_BITS,
             until_epoch: int | None = None, on_epoch=None) -> TrainState:
    """Run epochs ``state.epoch .. until_epoch`` (default: all) and return the updated state.

    ``on_epoch(state, epoch_mean)`` is called after every finished epoch.
    """
    if len(clouds) == 0:
        raise InvalidArgument("pretraining dataset is empty")
    if train_cfg.max_clouds:
        clouds = clouds[: train_cfg.max_clouds]
    model = state.model
    cfg = model.cfg
    n = len(clouds)
    spe = steps_per_epoch(n, train_cfg.batch_size)
    total = spe * train_cfg.epochs
    warmup = spe * train_cfg.warmup_epochs
    augment = train_cfg.rotate or train_cfg.jitter > 0
    if not augment:
        local_all, cent_all = prepare_tokens(clouds, cfg, sequencer, bits)
    until = train_cfg.epochs if until_epoch is None else min(until_epoch, train_cfg.epochs)
    rng = state.rng
    ctx_params = list(model.context_encoder.parameters())
    tgt_params = list(model.target_encoder.parameters())

    model.train()
    while state.epoch < until:
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, train_cfg.batch_size):
            sel = order[s : s + train_cfg.batch_size]
            if augment:
                loc, cen = prepare_tokens(_augment([clouds[i] for i in sel], train_cfg, rng),
                                          cfg, sequencer, bits)
            else:
                loc, cen = local_all[sel], cent_all[sel]
            masks = [sample_mask(cfg.c, mask_cfg, rng) for _ in sel]
            lr = lr_schedule(state.step, warmup, total, train_cfg)
            tau = tau_schedule(state.step, total, train_cfg)
            try:
                loss = batch_loss(model, torch.from_numpy(loc), torch.from_numpy(cen), masks,
                                  train_cfg.beta_smooth_l1, target_norm=train_cfg.target_norm)
            except NumericFailure as e:
                raise NumericFailure(f"step {state.step}: {e}", block=e.block, step=state.step) from e
            if not torch.isfinite(loss):
                raise NumericFailure(f"step {state.step}: non-finite loss", step=state.step)
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step(lr)
            ema_update(tgt_params, ctx_params, tau)
            value = float(loss.item())
            state.loss_log.append((state.epoch + 1, state.step, value, lr, tau))
            losses.append(value)
            state.step += 1
        state.epoch += 1
        mean = float(np.mean(losses))
        log.info("epoch %d/%d loss %.5f", state.epoch, train_cfg.epochs, mean)
        if on_epoch is not None:
            on_epoch(state, mean)
    return state


def epoch_means(loss_log) -> list:
    by_epoch: dict = {}
    for epoch, _step, loss, _lr, _tau in loss_log:
        by_epoch.setdefault(int(epoch), []).append(loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_loss_csv(path, loss_log):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,step,loss,lr,tau\n")
        for epoch, step, loss, lr, tau in loss_log:
            fh.write(f"{int(epoch)},{int(step)},{loss!r},{lr!r},{tau!r}\n")


# Checkpoints --------------------------------------------------------------------

MAGIC = b"PJCK"
VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _encode_entries(entries) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise InvalidArgument(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        out.append(struct.pack("<Q", len(data)) + data)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_entries(buf: bytes) -> dict:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dt = np.dtype(_DTYPES[code]).newbyteorder("<")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"size mismatch for {name}")
        entries[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint entries")
    return entries


def _json_blob(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def _from_json_blob(arr) -> object:
    return json.loads(bytes(arr.astype(np.uint8)).decode())


def state_entries(state: TrainState) -> list:
    entries = []
    for name, t in state.model.state_dict().items():
        entries.append((f"model.{name}", t.detach().cpu().numpy()))
    for name in state.optimizer.params:
        entries.append((f"adam.m.{name}", state.optimizer.exp_avg[name].numpy()))
        entries.append((f"adam.v.{name}", state.optimizer.exp_avg_sq[name].numpy()))
    entries.append(("meta.adam_step", np.array([state.optimizer.step_count], dtype=np.int64)))
    entries.append(("meta.step", np.array([state.step], dtype=np.int64)))
    entries.append(("meta.epoch", np.array([state.epoch], dtype=np.int64)))
    entries.append(("meta.rng", _json_blob(state.rng.bit_generator.state)))
    entries.append(("meta.model_config", _json_blob(asdict(state.model.cfg))))
    entries.append(("meta.config_hash", np.frombuffer(state.config_hash.encode(), dtype=np.uint8)))
    entries.append(("meta.loss_log", np.array(state.loss_log, dtype=np.float64).reshape(-1, 5)))
    return entries


def save_checkpoint(state: TrainState, path):
    with open(path, "wb") as fh:
        fh.write(_encode_entries(state_entries(state)))


def read_checkpoint_entries(path) -> dict:
    with open(path, "rb") as fh:
        return _decode_entries(fh.read())


def checkpoint_model_config(entries) -> ModelConfig:
    return ModelConfig(**_from_json_blob(entries["meta.model_config"]))


def load_checkpoint(path, train_cfg: TrainConfig | None = None,
                    expect_model: ModelConfig | None = None) -> TrainState:
    entries = read_checkpoint_entries(path)
    try:
        model_cfg = checkpoint_model_config(entries)
    except KeyError as e:
        raise CheckpointError(f"checkpoint lacks {e}") from e
    if expect_model is not None and expect_model != model_cfg:
        raise ModelMismatch(f"checkpoint model {model_cfg} differs from configured {expect_model}")
    train_cfg = train_cfg or TrainConfig()
    model = PointJEPA(model_cfg)
    sd = {}
    for name in model.state_dict():
        key = f"model.{name}"
        if key not in entries:
            raise CheckpointError(f"checkpoint lacks {key}")
        sd[name] = torch.from_numpy(entries[key].copy())
    model.load_state_dict(sd)
    opt = AdamW(model.trainable_named_parameters(), train_cfg.weight_decay,
                (train_cfg.adam_beta1, train_cfg.adam_beta2), train_cfg.adam_eps)
    for name in opt.params:
        opt.exp_avg[name] = torch.from_numpy(entries[f"adam.m.{name}"].copy())
        opt.exp_avg_sq[name] = torch.from_numpy(entries[f"adam.v.{name}"].copy())
    opt.step_count = int(entries["meta.adam_step"][0])
    rng = np.random.default_rng()
    rng.bit_generator.state = _from_json_blob(entries["meta.rng"])
    loss_log = [tuple(float(v) for v in row) for row in entries["meta.loss_log"]]
    loss_log = [(int(e), int(s), l, lr, t) for e, s, l, lr, t in loss_log]
    return TrainState(model, opt, rng, int(entries["meta.epoch"][0]), int(entries["meta.step"][0]),
                      loss_log, bytes(entries["meta.config_hash"]).decode())
