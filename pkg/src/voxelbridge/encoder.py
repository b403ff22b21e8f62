"""The fMRI feature extractor: a transformer over patch tokens with a class
token, two alignment heads regressing the image-embedding and image-latent
targets, the weighted dual MSE objective, and its training loop.

Positions are a learned table indexed by flattened padded-grid cell, so one
checkpoint serves any mask whose retained set lies inside the grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .errors import NonFiniteError, ValidationError
from .preprocess import PatchedSignal
from .volume_io import StimulusTargets


@dataclass
class EncoderConfig:
    patch_dim: int
    pos_table_size: int
    embed_dim: int
    latent_dim: int
    n_layers: int = 16
    hidden: int = 768
    n_heads: int = 0  # 0 -> hidden // 64
    mlp_ratio: float = 4.0
    head_hidden: int = 1024
    alpha: float = 1.0 / 64.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_heads == 0:
            self.n_heads = max(1, self.hidden // 64)
        if self.hidden % self.n_heads != 0:
            raise ValidationError(f"hidden {self.hidden} not divisible by {self.n_heads} heads")
        for name in ("patch_dim", "pos_table_size", "embed_dim", "latent_dim",
                     "hidden", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValidationError("n_layers must be >= 0")


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, n_heads: int, dropout: float, causal: bool = False):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = hidden // n_heads
        self.causal = causal
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        b, t, h = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if self.causal:
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
            att = att.masked_fill(mask, float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, t, h)
        return self.drop(self.proj(out))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(norm(x)); x + mlp(norm(x))."""

    def __init__(self, hidden: int, n_heads: int, mlp_ratio: float, dropout: float,
                 causal: bool = False):
        super().__init__()
        inner = int(hidden * mlp_ratio)
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, n_heads, dropout, causal=causal)
        self.norm2 = nn.LayerNorm(hidden)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, inner), nn.GELU(), nn.Linear(inner, hidden), nn.Dropout(dropout)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _head(hidden: int, inner: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(hidden, inner), nn.GELU(), nn.Linear(inner, out))


@dataclass
class ForwardTrace:
    """Activations of one forward pass. hidden_states[0] is the embedded token
    sequence; hidden_states[i] is the output of block i. `class_final` is the
    final-normed first token feeding both heads; `penultimate` is the full
    token sequence one block before the last."""

    hidden_states: list[torch.Tensor]
    class_final: torch.Tensor
    penultimate: torch.Tensor
    pred_embed: torch.Tensor
    pred_latent: torch.Tensor


class FmriEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_proj = nn.Linear(c.patch_dim, c.hidden)
        self.class_token = nn.Parameter(torch.empty(1, 1, c.hidden))
        self.pos_table = nn.Parameter(torch.empty(c.pos_table_size, c.hidden))
        nn.init.trunc_normal_(self.class_token, std=0.02)
        nn.init.trunc_normal_(self.pos_table, std=0.02)
        self.embed_drop = nn.Dropout(c.dropout)
        self.blocks = nn.ModuleList(
            Block(c.hidden, c.n_heads, c.mlp_ratio, c.dropout) for _ in range(c.n_layers)
        )
        self.final_norm = nn.LayerNorm(c.hidden)
        self.head_embed = _head(c.hidden, c.head_hidden, c.embed_dim)
        self.head_latent = _head(c.hidden, c.head_hidden, c.latent_dim)

    def embed_tokens(self, values: torch.Tensor, retained: torch.Tensor) -> torch.Tensor:
        b = values.shape[0]
        tokens = self.patch_proj(values) + self.pos_table[retained][None, :, :]
        cls = self.class_token.expand(b, -1, -1)
        return self.embed_drop(torch.cat([cls, tokens], dim=1))

    def forward_tokens(self, values: torch.Tensor, retained: torch.Tensor,
                       collect_hidden: bool = False,
                       check_finite: bool = False) -> ForwardTrace:
        """values: (B, N, patch_dim); retained: (N,) flat grid cells."""
        if values.shape[-1] != self.config.patch_dim:
            raise ValidationError(
                f"patch length {values.shape[-1]} != configured {self.config.patch_dim}"
            )
        if retained.numel() and int(retained.max()) >= self.config.pos_table_size:
            raise ValidationError("retained index exceeds the positional table")
        x = self.embed_tokens(values, retained)
        prev = x
        states = [x] if collect_hidden else []
        for i, block in enumerate(self.blocks):
            prev = x
            x = block(x)
            if check_finite and not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite activation after block {i + 1}")
            if collect_hidden:
                states.append(x)
        normed = self.final_norm(x)
        class_final = normed[:, 0, :]
        pred_embed = self.head_embed(class_final)
        pred_latent = self.head_latent(class_final)
        if check_finite and not (
            torch.isfinite(pred_embed).all() and torch.isfinite(pred_latent).all()
        ):
            raise NonFiniteError("non-finite activation in the alignment heads")
        return ForwardTrace(
            hidden_states=states,
            class_final=class_final,
            penultimate=prev,
            pred_embed=pred_embed,
            pred_latent=pred_latent,
        )


def signal_tensors(signal: PatchedSignal, dtype=torch.float32):
    values = torch.from_numpy(np.ascontiguousarray(signal.values)).to(dtype).unsqueeze(0)
    retained = torch.from_numpy(np.ascontiguousarray(signal.index_map.retained))
    return values, retained


def forward(model: FmriEncoder, signal: PatchedSignal, want_trace: bool = True,
            keep_grad: bool = False) -> ForwardTrace:
    """Run one patched signal through the extractor. Gradient tracking is off
    unless keep_grad is set (used by the localizer)."""
    values, retained = signal_tensors(signal, dtype=next(model.parameters()).dtype)
    model.eval()
    if keep_grad:
        trace = model.forward_tokens(values, retained, collect_hidden=want_trace,
                                     check_finite=False)
    else:
        with torch.no_grad():
            trace = model.forward_tokens(values, retained, collect_hidden=want_trace,
                                         check_finite=True)
    return ForwardTrace(
        hidden_states=[h[0] for h in trace.hidden_states] if want_trace else [],
        class_final=trace.class_final[0],
        penultimate=trace.penultimate[0],
        pred_embed=trace.pred_embed[0],
        pred_latent=trace.pred_latent[0],
    )


def alignment_loss(pred_embed: torch.Tensor, pred_latent: torch.Tensor,
                   target_embed: torch.Tensor, target_latent: torch.Tensor,
                   alpha: float) -> tuple[torch.Tensor, dict]:
    """Weighted dual regression objective: per-head MSE is the mean over
    vector components, averaged over the batch; the latent head is scaled by
    alpha."""
    if pred_embed.shape != target_embed.shape:
        raise ValidationError(
            f"embedding shape {tuple(pred_embed.shape)} != target {tuple(target_embed.shape)}"
        )
    if pred_latent.shape != target_latent.shape:
        raise ValidationError(
            f"latent shape {tuple(pred_latent.shape)} != target {tuple(target_latent.shape)}"
        )
    embed_mse = F.mse_loss(pred_embed, target_embed)
    latent_mse = F.mse_loss(pred_latent, target_latent)
    total = embed_mse + alpha * latent_mse
    return total, {
        "embed_mse": float(embed_mse.detach()),
        "latent_mse": float(latent_mse.detach()),
    }


def alignment_loss_from_trace(trace: ForwardTrace, targets: StimulusTargets,
                              alpha: float) -> tuple[float, dict]:
    te = torch.from_numpy(np.asarray(targets.image_embed)).to(trace.pred_embed.dtype)
    tl = torch.from_numpy(np.asarray(targets.image_latent)).to(trace.pred_latent.dtype)
    total, parts = alignment_loss(trace.pred_embed, trace.pred_latent, te, tl, alpha)
    return float(total), parts


# ---------------------------------------------------------------------------
# Training


@dataclass
class AlignmentDataset:
    """In-memory training set: all samples share one retained-patch layout."""

    values: np.ndarray         # (S, N, C) float32
    target_embed: np.ndarray   # (S, d_c) float32
    target_latent: np.ndarray  # (S, d_v) float32
    retained: np.ndarray       # (N,) int64
    grid_dims: tuple[int, int, int]
    patch_edge: int
    groups: list[str]          # per-sample "stimulus|subject" MixUp group
    record_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        s = self.values.shape[0]
        if not (len(self.groups) == s == self.target_embed.shape[0] == self.target_latent.shape[0]):
            raise ValidationError("dataset arrays disagree on the sample count")

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[0])


def build_alignment_dataset(signals: list[PatchedSignal],
                            targets: list[StimulusTargets],
                            subjects: list[str] | None = None,
                            record_ids: list[str] | None = None) -> AlignmentDataset:
    if not signals or len(signals) != len(targets):
        raise ValidationError("need one target per signal")
    base = signals[0].index_map
    for s in signals[1:]:
        if not s.index_map.same_layout(base):
            raise ValidationError("all signals must share one retained-patch layout")
    subjects = subjects or ["" for _ in signals]
    groups = [f"{t.stimulus_id}|{s}" for t, s in zip(targets, subjects)]
    return AlignmentDataset(
        values=np.stack([s.values for s in signals]),
        target_embed=np.stack([np.asarray(t.image_embed, dtype=np.float32) for t in targets]),
        target_latent=np.stack([np.asarray(t.image_latent, dtype=np.float32) for t in targets]),
        retained=base.retained,
        grid_dims=base.grid_dims,
        patch_edge=signals[0].spec.edge,
        groups=groups,
        record_ids=record_ids or [str(i) for i in range(len(signals))],
    )


@dataclass
class TrainSchedule:
    lr: float = 5e-4
    epochs: int = 30
    batch: int = 32
    seed: int = 0
    mixup: bool = True
    val_fraction: float = 0.0
    weight_decay: float = 0.0  # decoupled (AdamW) when nonzero


def _group_partners(groups: list[str]) -> dict[int, list[int]]:
    by_group: dict[str, list[int]] = {}
    for i, g in enumerate(groups):
        by_group.setdefault(g, []).append(i)
    return {i: [j for j in by_group[g] if j != i] for i, g in enumerate(groups)}


def train_alignment(dataset: AlignmentDataset, config: EncoderConfig,
                    schedule: TrainSchedule) -> tuple[FmriEncoder, dict]:
    """Adam on the dual alignment objective. MixUp blends same-group trials
    (targets are identical inside a group and stay unmixed). Deterministic for
    a fixed seed in single-threaded mode."""
    torch.manual_seed(schedule.seed)
    model = FmriEncoder(config)
    model.train()
    if schedule.weight_decay > 0:
        optimizer = torch.optim.AdamW(model.parameters(), lr=schedule.lr,
                                      weight_decay=schedule.weight_decay)
    else:
        optimizer = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    rng = np.random.default_rng(schedule.seed)

    retained = torch.from_numpy(dataset.retained)
    all_embed = torch.from_numpy(dataset.target_embed)
    all_latent = torch.from_numpy(dataset.target_latent)

    # Stimulus-level validation split so MixUp partners never straddle it.
    indices = np.arange(dataset.n_samples)
    val_idx = np.array([], dtype=int)
    if schedule.val_fraction > 0:
        stims = sorted({g.split("|")[0] for g in dataset.groups})
        n_val = max(1, int(len(stims) * schedule.val_fraction))
        val_stims = set(rng.permutation(stims)[:n_val].tolist())
        is_val = np.array([g.split("|")[0] in val_stims for g in dataset.groups])
        val_idx = indices[is_val]
        indices = indices[~is_val]
    partners = _group_partners(dataset.groups)

    def eval_loss(idx) -> float:
        model.eval()
        with torch.no_grad():
            losses = []
            for lo in range(0, len(idx), schedule.batch):
                sel = idx[lo:lo + schedule.batch]
                vals = torch.from_numpy(dataset.values[sel])
                trace = model.forward_tokens(vals, retained)
                loss, _ = alignment_loss(trace.pred_embed, trace.pred_latent,
                                         all_embed[sel], all_latent[sel], config.alpha)
                losses.append(float(loss) * len(sel))
        model.train()
        return sum(losses) / max(len(idx), 1)

    history: list[float] = []
    val_history: list[float] = []
    for epoch in range(schedule.epochs):
        order = rng.permutation(indices)
        epoch_loss = 0.0
        for lo in range(0, len(order), schedule.batch):
            sel = order[lo:lo + schedule.batch]
            batch_vals = dataset.values[sel]
            if schedule.mixup:
                batch_vals = batch_vals.copy()
                for row, i in enumerate(sel):
                    mates = partners[int(i)]
                    if mates:
                        j = mates[int(rng.integers(len(mates)))]
                        lam = np.float32(rng.uniform())
                        batch_vals[row] = lam * batch_vals[row] + (
                            np.float32(1.0) - lam
                        ) * dataset.values[j]
            vals = torch.from_numpy(batch_vals)
            trace = model.forward_tokens(vals, retained)
            loss, _ = alignment_loss(trace.pred_embed, trace.pred_latent,
                                     all_embed[sel], all_latent[sel], config.alpha)
            if not torch.isfinite(loss):
                raise NonFiniteError(
                    f"training loss became non-finite at epoch {epoch}, step {lo // schedule.batch}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(sel)
        history.append(epoch_loss / len(order))
        if len(val_idx):
            val_history.append(eval_loss(val_idx))

    meta = {
        "final_train_loss": history[-1] if history else None,
        "train_loss_history": history,
        "best_val_loss": min(val_history) if val_history else None,
        "val_loss_history": val_history,
        "schedule": asdict(schedule),
    }
    model.eval()
    return model, meta


def save_encoder(model: FmriEncoder, ckpt_dir, meta: dict | None = None) -> Path:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    config = {"kind": "encoder", "config": asdict(model.config), "meta": meta or {}}
    return ckpt_io.save_tensors(ckpt_dir, tensors, config)


def load_encoder(ckpt_dir) -> tuple[FmriEncoder, dict]:
    tensors, config = ckpt_io.load_tensors(ckpt_dir)
    if config.get("kind") != "encoder":
        raise ValidationError(f"{ckpt_dir}: not an encoder checkpoint")
    enc_config = EncoderConfig(**config["config"])
    model = FmriEncoder(enc_config)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model, config.get("meta", {})


# ---------------------------------------------------------------------------
# Gradient verification


def tiny_check_config() -> EncoderConfig:
    return EncoderConfig(
        patch_dim=27, pos_table_size=12, embed_dim=6, latent_dim=10,
        n_layers=2, hidden=32, n_heads=2, mlp_ratio=2.0, head_hidden=16,
        alpha=0.25, dropout=0.0,
    )


def gradient_check(config: EncoderConfig | None = None, seed: int = 0,
                   n_params: int = 200, step: float = 1e-5,
                   param_filter: str | None = None) -> float:
    """Compare analytic parameter gradients of the alignment objective against
    central finite differences on a double-precision tiny model; returns the
    max relative error over >= n_params sampled parameters. `param_filter`
    restricts the probe to parameter names containing the substring (e.g. the
    exactly-linear head output layers)."""
    config = config or tiny_check_config()
    if config.n_layers > 2 or config.hidden > 32:
        raise ValidationError("gradient check expects a tiny config (<=2 layers, hidden <=32)")
    torch.manual_seed(seed)
    model = FmriEncoder(config).double()
    rng = np.random.default_rng(seed)
    n_tokens = 4
    values = torch.from_numpy(rng.standard_normal((2, n_tokens, config.patch_dim)))
    retained = torch.from_numpy(
        np.sort(rng.choice(config.pos_table_size, size=n_tokens, replace=False)).astype(np.int64)
    )
    t_embed = torch.from_numpy(rng.standard_normal((2, config.embed_dim)))
    t_latent = torch.from_numpy(rng.standard_normal((2, config.latent_dim)))

    def loss_value() -> torch.Tensor:
        trace = model.forward_tokens(values, retained)
        loss, _ = alignment_loss(trace.pred_embed, trace.pred_latent, t_embed, t_latent,
                                 config.alpha)
        return loss

    model.zero_grad()
    loss_value().backward()
    params = [
        p for name, p in model.named_parameters()
        if p.requires_grad and (param_filter is None or param_filter in name)
    ]
    if not params:
        raise ValidationError(f"param_filter {param_filter!r} matches no parameters")
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    offsets = np.cumsum(sizes) - sizes

    max_rel = 0.0
    with torch.no_grad():
        for flat_idx in sorted(int(i) for i in picks):
            p_i = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = flat_idx - int(offsets[p_i])
            param = params[p_i]
            flat = param.view(-1)
            orig = float(flat[local])
            analytic = float(param.grad.view(-1)[local])
            flat[local] = orig + step
            hi = float(loss_value())
            flat[local] = orig - step
            lo = float(loss_value())
            flat[local] = orig
            numeric = (hi - lo) / (2 * step)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
            max_rel = max(max_rel, rel)
    return max_rel
