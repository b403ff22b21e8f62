"""Multimodal token bridge: projects penultimate extractor states into the
language model's embedding space, assembles instruction conversations in the
``<human>:[image] [instruction] <bot>:[answer]`` dialogue format, and trains
the autoregressive answer objective in two stages (projector only, then
projector plus language model; the extractor stays frozen throughout).

The stand-in language model is a small decoder-only transformer over a
byte-level tokenizer with a four-symbol control extension.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .encoder import Block
from .errors import CapabilityError, FormatError, ValidationError
from .templates import TEMPLATES_BY_KIND
from .volume_io import list_stimuli, load_targets

log = logging.getLogger(__name__)

PLACEHOLDER = "[image]"
HUMAN_PREFIX = "<human>:"
HUMAN_PREFIX_CONT = " <human>:"
BOT_PREFIX = " <bot>:"
TASK_KINDS = ("brief", "detailed", "dialogue", "reasoning", "recon_prompt", "concept_loc")
N_CONTROL = 4


class ByteTokenizer:
    """Byte-level tokenizer: ids 0..vocab-5 are raw byte values, the top four
    ids are control symbols (pad, end-of-turn, and two reserved). Only the
    end-of-turn terminator is ever emitted into sequences."""

    def __init__(self, vocab_size: int = 260):
        if vocab_size < N_CONTROL + 1:
            raise ValidationError("vocab_size too small for the control extension")
        self.vocab_size = vocab_size
        self.byte_budget = vocab_size - N_CONTROL
        self.pad_id = self.byte_budget
        self.eot_id = self.byte_budget + 1

    def encode(self, text: str) -> list[int]:
        data = text.encode("utf-8")
        bad = [b for b in data if b >= self.byte_budget]
        if bad:
            raise ValidationError(
                f"byte value {bad[0]} exceeds tokenizer budget {self.byte_budget}"
            )
        return list(data)

    def decode(self, ids, errors: str = "strict") -> str:
        data = bytes(i for i in ids if 0 <= i < self.byte_budget)
        return data.decode("utf-8", errors=errors)


@dataclass
class ConversationRecord:
    stimulus_id: str
    turns: list[tuple[str, str]]  # (role in {human, bot}, text)
    task_kind: str
    record_id: str = ""

    def __post_init__(self):
        if not self.record_id:
            self.record_id = f"{self.stimulus_id}-{self.task_kind}"
        self.turns = [(r, t) for r, t in self.turns]
        self.validate()

    def validate(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise ValidationError(f"unknown task kind {self.task_kind!r}")
        if not self.turns:
            raise ValidationError("conversation has no turns")
        for i, (role, _) in enumerate(self.turns):
            want = "human" if i % 2 == 0 else "bot"
            if role != want:
                raise ValidationError(
                    f"turn {i} role {role!r}: roles must alternate starting with human"
                )
        n_slots = sum(t.count(PLACEHOLDER) for _, t in self.turns)
        if n_slots != 1:
            raise ValidationError(f"expected exactly one {PLACEHOLDER} slot, found {n_slots}")
        if PLACEHOLDER not in self.turns[0][1]:
            raise ValidationError(f"the {PLACEHOLDER} slot must sit in the first human turn")

    @property
    def placeholder_pos(self) -> int:
        return self.turns[0][1].index(PLACEHOLDER)


def save_conversation(conv_dir, record: ConversationRecord) -> Path:
    d = Path(conv_dir)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{record.record_id}.json"
    payload = {
        "stimulus_id": record.stimulus_id,
        "task_kind": record.task_kind,
        "record_id": record.record_id,
        "turns": [{"role": r, "text": t} for r, t in record.turns],
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def load_conversation(path) -> ConversationRecord:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return ConversationRecord(
            stimulus_id=payload["stimulus_id"],
            turns=[(t["role"], t["text"]) for t in payload["turns"]],
            task_kind=payload["task_kind"],
            record_id=payload.get("record_id", ""),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing conversation field {exc}") from exc


# ---------------------------------------------------------------------------
# Stand-in language model


@dataclass
class TinyLMConfig:
    vocab_size: int = 260
    n_layers: int = 2
    width: int = 128
    n_heads: int = 4
    mlp_ratio: float = 4.0
    max_len: int = 512

    def __post_init__(self):
        if self.width % self.n_heads != 0:
            raise ValidationError("lm width must divide by n_heads")


class TinyLM(nn.Module):
    def __init__(self, config: TinyLMConfig):
        super().__init__()
        self.config = config
        c = config
        self.tok_embed = nn.Embedding(c.vocab_size, c.width)
        self.pos_embed = nn.Parameter(torch.empty(c.max_len, c.width))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            Block(c.width, c.n_heads, c.mlp_ratio, dropout=0.0, causal=True)
            for _ in range(c.n_layers)
        )
        self.final_norm = nn.LayerNorm(c.width)
        self.out = nn.Linear(c.width, c.vocab_size)

    def forward_embeds(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[1]
        if t > self.config.max_len:
            raise ValidationError(f"sequence length {t} exceeds lm context {self.config.max_len}")
        h = x + self.pos_embed[:t][None, :, :]
        for block in self.blocks:
            h = block(h)
        return self.out(self.final_norm(h))

    def make_uniform(self) -> None:
        """Zero the output head: every position predicts the uniform
        distribution (used by objective sanity checks)."""
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()


@dataclass
class LanguageModelHandle:
    impl: str = "tiny"  # tiny | external
    lm: TinyLM | None = None
    tokenizer: ByteTokenizer | None = None
    adapter_id: str | None = None

    @classmethod
    def tiny(cls, config: TinyLMConfig | None = None, seed: int = 0) -> "LanguageModelHandle":
        config = config or TinyLMConfig()
        torch.manual_seed(seed)
        return cls(impl="tiny", lm=TinyLM(config), tokenizer=ByteTokenizer(config.vocab_size))

    @property
    def trainable(self) -> bool:
        return self.impl == "tiny"

    def require_tiny(self, what: str) -> TinyLM:
        if self.impl != "tiny" or self.lm is None:
            raise CapabilityError(f"{what} requires an in-process language model; "
                                  f"external adapter {self.adapter_id!r} cannot do it")
        return self.lm


class BridgeState(nn.Module):
    """Projector f_t plus the language model handle. `class_only` restricts
    the fMRI token block to the class token (ablation switch)."""

    def __init__(self, enc_hidden: int, handle: LanguageModelHandle,
                 stage: int = 1, class_only: bool = False, seed: int = 0):
        super().__init__()
        if stage not in (1, 2):
            raise ValidationError("stage must be 1 or 2")
        width = handle.require_tiny("bridge projection").config.width
        torch.manual_seed(seed + 1)
        self.f_t = nn.Sequential(
            nn.Linear(enc_hidden, width), nn.GELU(), nn.Linear(width, width)
        )
        self.handle = handle
        self.lm = handle.lm  # registered as a submodule for checkpointing
        self.stage = stage
        self.enc_hidden = enc_hidden
        self.class_only = class_only

    def fmri_tokens(self, penultimate) -> torch.Tensor:
        h = penultimate
        if isinstance(h, np.ndarray):
            h = torch.from_numpy(np.ascontiguousarray(h, dtype=np.float32))
        if h.ndim != 2 or h.shape[1] != self.enc_hidden:
            raise ValidationError(
                f"penultimate states must be (tokens, {self.enc_hidden}), got {tuple(h.shape)}"
            )
        if self.class_only:
            h = h[:1]
        return self.f_t(h)


@dataclass
class AssembledSequence:
    embeds: torch.Tensor     # (T, width)
    token_ids: torch.Tensor  # (T,) long, -1 at fMRI positions
    loss_mask: torch.Tensor  # (T,) bool: true on answer tokens and terminators


def assemble_sequence(state: BridgeState, record: ConversationRecord,
                      fmri_tokens: torch.Tensor) -> AssembledSequence:
    """Embed the conversation text with the LM token embedder, replace the
    placeholder span with the fMRI token block, and mark answer positions."""
    record.validate()
    tok = state.handle.tokenizer
    lm = state.handle.require_tiny("sequence assembly")
    chunks: list[tuple[str, object]] = []  # ("text", ids) | ("fmri", None)

    for i, (role, text) in enumerate(record.turns):
        if role == "human":
            prefix = HUMAN_PREFIX if i == 0 else HUMAN_PREFIX_CONT
            chunk = prefix + text
            if PLACEHOLDER in chunk:
                left, right = chunk.split(PLACEHOLDER, 1)
                if left:
                    chunks.append(("text", (tok.encode(left), False)))
                chunks.append(("fmri", None))
                if right:
                    chunks.append(("text", (tok.encode(right), False)))
            else:
                chunks.append(("text", (tok.encode(chunk), False)))
        else:
            chunks.append(("text", (tok.encode(BOT_PREFIX), False)))
            answer = tok.encode(text)
            if answer:
                chunks.append(("text", (answer, True)))
            chunks.append(("text", ([tok.eot_id], True)))

    embeds, ids, mask = [], [], []
    for kind, payload in chunks:
        if kind == "fmri":
            embeds.append(fmri_tokens)
            n = fmri_tokens.shape[0]
            ids.extend([-1] * n)
            mask.extend([False] * n)
        else:
            chunk_ids, masked = payload
            idt = torch.tensor(chunk_ids, dtype=torch.long)
            embeds.append(lm.tok_embed(idt))
            ids.extend(chunk_ids)
            mask.extend([masked] * len(chunk_ids))
    return AssembledSequence(
        embeds=torch.cat(embeds, dim=0),
        token_ids=torch.tensor(ids, dtype=torch.long),
        loss_mask=torch.tensor(mask, dtype=torch.bool),
    )


def bridge_loss(state: BridgeState, record: ConversationRecord,
                penultimate, return_details: bool = False):
    """Mean next-token cross-entropy over answer positions: each answer token
    (and its end-of-turn terminator) is predicted from everything before it,
    including the fMRI block."""
    lm = state.handle.require_tiny("bridge loss")
    asm = assemble_sequence(state, record, state.fmri_tokens(penultimate))
    logits = lm.forward_embeds(asm.embeds.unsqueeze(0))[0]
    positions = torch.nonzero(asm.loss_mask, as_tuple=False).flatten()
    if positions.numel() == 0:
        raise ValidationError("conversation has no answer tokens to score")
    if int(positions.min()) == 0:
        raise ValidationError("answer token cannot open the sequence")
    loss = F.cross_entropy(logits[positions - 1], asm.token_ids[positions])
    if return_details:
        return loss, {"logits": logits, "assembled": asm, "positions": positions}
    return loss


def answer_token_accuracy(state: BridgeState, samples) -> float:
    """Teacher-forced argmax accuracy on answer positions."""
    lm = state.handle.require_tiny("accuracy")
    correct = total = 0
    with torch.no_grad():
        for penultimate, record in samples:
            asm = assemble_sequence(state, record, state.fmri_tokens(penultimate))
            logits = lm.forward_embeds(asm.embeds.unsqueeze(0))[0]
            positions = torch.nonzero(asm.loss_mask, as_tuple=False).flatten()
            pred = logits[positions - 1].argmax(dim=-1)
            correct += int((pred == asm.token_ids[positions]).sum())
            total += int(positions.numel())
    return correct / max(total, 1)


@dataclass
class BridgeSchedule:
    lr: float = 2e-5
    epochs: int = 1
    batch: int = 4
    seed: int = 0


def train_bridge(state: BridgeState, samples, stage: int,
                 schedule: BridgeSchedule) -> dict:
    """Stage 1 updates the projector only (LM gradient-blocked); stage 2
    updates projector and LM jointly. The extractor is frozen by construction:
    samples carry precomputed penultimate states."""
    if stage not in (1, 2):
        raise ValidationError("stage must be 1 or 2")
    if stage == 2 and not state.handle.trainable:
        raise CapabilityError("stage 2 requested on a non-trainable external language model")
    lm = state.handle.require_tiny("bridge training")
    state.stage = stage

    for p in lm.parameters():
        p.requires_grad_(stage == 2)
    trainable = list(state.f_t.parameters()) + (
        list(lm.parameters()) if stage == 2 else []
    )
    optimizer = torch.optim.Adam(trainable, lr=schedule.lr)
    rng = np.random.default_rng(schedule.seed)

    history = []
    for _epoch in range(schedule.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for lo in range(0, len(order), schedule.batch):
            sel = order[lo:lo + schedule.batch]
            optimizer.zero_grad()
            batch_loss = 0.0
            for i in sel:
                penultimate, record = samples[int(i)]
                loss = bridge_loss(state, record, penultimate) / len(sel)
                loss.backward()
                batch_loss += float(loss.detach())
            optimizer.step()
            epoch_loss += batch_loss * len(sel)
        history.append(epoch_loss / max(len(order), 1))
    for p in lm.parameters():
        p.requires_grad_(True)
    return {"loss_history": history, "stage": stage, "schedule": asdict(schedule)}


def generate(state: BridgeState, penultimate, instruction: str,
             max_tokens: int = 64, greedy: bool = True, seed: int = 0) -> str:
    """Autoregressive decoding conditioned on [fMRI tokens; instruction]."""
    lm = state.handle.require_tiny("generation")
    tok = state.handle.tokenizer
    if max_tokens <= 0:
        return ""
    fmri = state.fmri_tokens(penultimate)
    with torch.no_grad():
        prefix = lm.tok_embed(torch.tensor(tok.encode(HUMAN_PREFIX), dtype=torch.long))
        suffix = lm.tok_embed(
            torch.tensor(tok.encode(" " + instruction + BOT_PREFIX), dtype=torch.long)
        )
        embeds = torch.cat([prefix, fmri, suffix], dim=0)
        if embeds.shape[0] + max_tokens > lm.config.max_len:
            raise ValidationError(
                f"prompt ({embeds.shape[0]}) plus budget ({max_tokens}) exceeds "
                f"lm context {lm.config.max_len}"
            )
        rng = np.random.default_rng(seed)
        out_ids: list[int] = []
        for _ in range(max_tokens):
            logits = lm.forward_embeds(embeds.unsqueeze(0))[0, -1]
            if greedy:
                next_id = int(logits.argmax())
            else:
                probs = F.softmax(logits, dim=-1).numpy().astype(np.float64)
                next_id = int(rng.choice(len(probs), p=probs / probs.sum()))
            if next_id == tok.eot_id:
                break
            out_ids.append(next_id)
            embeds = torch.cat(
                [embeds, lm.tok_embed(torch.tensor([next_id], dtype=torch.long))], dim=0
            )
    return tok.decode(out_ids, errors="replace")


# ---------------------------------------------------------------------------
# Instruction dataset


def extract_object_from_caption(caption: str) -> str:
    """Desk-scale object extraction: the last alphanumeric token of the brief
    caption (synthetic captions end with their object noun)."""
    tokens = [t.strip(".,;:!?\"'") for t in caption.lower().split()]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise ValidationError(f"caption {caption!r} has no extractable object")
    return tokens[-1]


def build_instruction_dataset(store_dir, kinds=("brief", "detailed", "recon_prompt",
                                                "concept_loc"),
                              seed: int = 0,
                              templates: dict | None = None) -> tuple[list[ConversationRecord], int]:
    """One seeded template draw per (stimulus, task kind), answered from the
    stored captions. Stimuli without captions are skipped with a warning."""
    templates = templates or TEMPLATES_BY_KIND
    rng = np.random.default_rng([97, seed])
    records: list[ConversationRecord] = []
    skipped = 0
    for sid in list_stimuli(store_dir):
        targets = load_targets(store_dir, sid)
        if not targets.captions:
            skipped += 1
            continue
        brief = targets.captions[0]
        detailed = targets.captions[-1]
        for kind in kinds:
            pool = templates.get(kind, ())
            if not pool:
                raise ValidationError(f"no templates available for task kind {kind!r}")
            template = pool[int(rng.integers(len(pool)))]
            if kind == "brief":
                instruction, answer = template, brief
            elif kind == "detailed":
                instruction, answer = template, detailed
            elif kind == "recon_prompt":
                instruction, answer = template, detailed
            elif kind == "concept_loc":
                obj = extract_object_from_caption(brief)
                instruction, answer = template.replace("<object>", obj), obj
            else:
                raise ValidationError(f"task kind {kind!r} has no template-based builder")
            records.append(ConversationRecord(
                stimulus_id=sid,
                turns=[("human", f"{PLACEHOLDER} {instruction}"), ("bot", answer)],
                task_kind=kind,
            ))
    if skipped:
        log.warning("skipped %d stimuli without captions", skipped)
    return records, skipped


# ---------------------------------------------------------------------------
# Checkpointing


def save_bridge(state: BridgeState, ckpt_dir, meta: dict | None = None) -> Path:
    if not state.handle.trainable:
        raise CapabilityError("cannot serialize an external language model")
    tensors = {k: v.detach().cpu().numpy() for k, v in state.state_dict().items()}
    config = {
        "kind": "bridge",
        "enc_hidden": state.enc_hidden,
        "stage": state.stage,
        "class_only": state.class_only,
        "lm_config": asdict(state.handle.lm.config),
        "meta": meta or {},
    }
    return ckpt_io.save_tensors(ckpt_dir, tensors, config)


def load_bridge(ckpt_dir) -> tuple[BridgeState, dict]:
    tensors, config = ckpt_io.load_tensors(ckpt_dir)
    if config.get("kind") != "bridge":
        raise ValidationError(f"{ckpt_dir}: not a bridge checkpoint")
    handle = LanguageModelHandle.tiny(TinyLMConfig(**config["lm_config"]))
    state = BridgeState(
        enc_hidden=config["enc_hidden"], handle=handle,
        stage=config.get("stage", 1), class_only=config.get("class_only", False),
    )
    state.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    state.eval()
    return state, config.get("meta", {})
