import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from voxelbridge import bridge as br
from voxelbridge import volume_io as vio
from voxelbridge.errors import CapabilityError, ValidationError
from voxelbridge.templates import ALL_TEMPLATE_STRINGS, BRIEF_INSTRUCTIONS

ENC_HIDDEN = 24


def tiny_state(seed=0, vocab=260, width=32, max_len=256, class_only=False):
    handle = br.LanguageModelHandle.tiny(
        br.TinyLMConfig(vocab_size=vocab, n_layers=2, width=width, n_heads=2,
                        max_len=max_len),
        seed=seed,
    )
    return br.BridgeState(ENC_HIDDEN, handle, stage=1, class_only=class_only, seed=seed)


def penult(rng, n_tokens=10):
    return rng.standard_normal((n_tokens, ENC_HIDDEN)).astype(np.float32)


def record(question="12345", answer="abc", kind="brief", sid="stim00000"):
    return br.ConversationRecord(
        stimulus_id=sid,
        turns=[("human", f"[image] {question}"), ("bot", answer)],
        task_kind=kind,
    )


class TestTokenizer:
    def test_roundtrip_templates(self):
        tok = br.ByteTokenizer()
        for s in ALL_TEMPLATE_STRINGS:
            assert tok.decode(tok.encode(s)) == s

    def test_roundtrip_unicode(self):
        tok = br.ByteTokenizer()
        s = "café ✓"
        assert tok.decode(tok.encode(s)) == s

    def test_budget_enforced(self):
        tok = br.ByteTokenizer(vocab_size=64)
        with pytest.raises(ValidationError):
            tok.encode("zebra")  # letters exceed the 60-byte budget
        assert tok.decode(tok.encode("123 456")) == "123 456"

    def test_control_ids(self):
        tok = br.ByteTokenizer()
        assert tok.vocab_size == 260
        assert tok.eot_id == 257
        assert tok.decode([65, tok.eot_id, 66]) == "AB"  # controls drop out


class TestConversationRecord:
    def test_valid_record(self):
        rec = record()
        assert rec.placeholder_pos == 0

    def test_roles_must_alternate(self):
        with pytest.raises(ValidationError):
            br.ConversationRecord("s", [("bot", "[image] hi")], "brief")
        with pytest.raises(ValidationError):
            br.ConversationRecord(
                "s", [("human", "[image] a"), ("human", "b")], "brief"
            )

    def test_exactly_one_placeholder(self):
        with pytest.raises(ValidationError):
            br.ConversationRecord("s", [("human", "no slot"), ("bot", "x")], "brief")
        with pytest.raises(ValidationError):
            br.ConversationRecord(
                "s", [("human", "[image] [image]"), ("bot", "x")], "brief"
            )

    def test_save_load(self, tmp_path):
        rec = record(answer="a zebra")
        path = br.save_conversation(tmp_path, rec)
        back = br.load_conversation(path)
        assert back.turns == rec.turns
        assert back.task_kind == rec.task_kind


class TestAssemble:
    def test_sequence_arithmetic(self, rng):
        # 8-token human prefix, 10 fMRI tokens, " 12345" = 6, " <bot>:" = 7,
        # 3 answer tokens, 1 terminator
        state = tiny_state()
        fmri = state.fmri_tokens(penult(rng, 10))
        asm = br.assemble_sequence(state, record(), fmri)
        assert asm.embeds.shape[0] == 8 + 10 + 6 + 7 + 3 + 1
        assert int(asm.loss_mask.sum()) == 3 + 1
        # the masked ids are the answer bytes then the terminator
        masked = asm.token_ids[asm.loss_mask].tolist()
        assert masked == list(b"abc") + [state.handle.tokenizer.eot_id]

    def test_empty_answer_masks_only_terminator(self, rng):
        state = tiny_state()
        asm = br.assemble_sequence(state, record(answer=""),
                                   state.fmri_tokens(penult(rng)))
        assert int(asm.loss_mask.sum()) == 1
        assert asm.token_ids[asm.loss_mask].tolist() == [state.handle.tokenizer.eot_id]

    def test_two_qa_pairs_mask_both_answers(self, rng):
        state = tiny_state()
        rec = br.ConversationRecord(
            "s",
            [("human", "[image] q one"), ("bot", "ab"),
             ("human", "q two"), ("bot", "cd")],
            task_kind="dialogue",
        )
        asm = br.assemble_sequence(state, rec, state.fmri_tokens(penult(rng)))
        assert int(asm.loss_mask.sum()) == 2 + 1 + 2 + 1
        masked_text = state.handle.tokenizer.decode(asm.token_ids[asm.loss_mask].tolist())
        assert masked_text == "abcd"

    def test_class_only_uses_one_token(self, rng):
        state = tiny_state(class_only=True)
        asm = br.assemble_sequence(state, record(), state.fmri_tokens(penult(rng, 10)))
        assert asm.embeds.shape[0] == 8 + 1 + 6 + 7 + 3 + 1


class TestBridgeLoss:
    def test_uniform_lm_gives_log_vocab(self, rng):
        state = tiny_state()
        state.handle.lm.make_uniform()
        loss = br.bridge_loss(state, record(), penult(rng))
        assert abs(float(loss.detach()) - math.log(260)) < 1e-3

    def test_uniform_vocab64_core_identity(self):
        # the dialogue framing cannot be byte-encoded in a 64-symbol budget,
        # so the ln(64) identity is checked on the model directly
        torch.manual_seed(0)
        lm = br.TinyLM(br.TinyLMConfig(vocab_size=64, n_layers=1, width=32,
                                       n_heads=2, max_len=16))
        lm.make_uniform()
        with torch.no_grad():
            embeds = torch.randn(1, 8, 32)
            logits = lm.forward_embeds(embeds)
            loss = F.cross_entropy(logits[0, :-1], torch.arange(7) % 64)
        assert abs(float(loss) - math.log(64)) < 1e-3

    def test_factorization_identity(self, rng):
        state = tiny_state()
        loss, details = br.bridge_loss(state, record(answer="abc"), penult(rng),
                                       return_details=True)
        logits = details["logits"].detach().double()
        pos = details["positions"]
        ids = details["assembled"].token_ids
        log_probs = F.log_softmax(logits[pos - 1], dim=-1)
        picked = log_probs[torch.arange(len(pos)), ids[pos]]
        product = float(torch.exp(picked).prod())
        exp_sum = float(torch.exp(picked.sum()))
        assert abs(product - exp_sum) < 1e-9

    def test_question_logit_gradients_exactly_zero(self, rng):
        state = tiny_state()
        loss, details = br.bridge_loss(state, record(), penult(rng),
                                       return_details=True)
        logits = details["logits"]
        grads = torch.autograd.grad(loss, logits)[0]
        mask = details["assembled"].loss_mask
        # positions whose next token is unmasked must carry zero gradient
        feeds_loss = torch.zeros_like(mask)
        feeds_loss[:-1] = mask[1:]
        assert torch.all(grads[~feeds_loss] == 0)
        assert torch.any(grads[feeds_loss] != 0)

    def test_no_answer_positions_rejected(self, rng):
        state = tiny_state()
        rec = br.ConversationRecord("s", [("human", "[image] hi")], "brief")
        with pytest.raises(ValidationError):
            br.bridge_loss(state, rec, penult(rng))

    def test_context_overflow_rejected(self, rng):
        state = tiny_state(max_len=16)
        with pytest.raises(ValidationError):
            br.bridge_loss(state, record(), penult(rng, 10))


def overfit_samples(rng, state, n=4):
    samples = []
    for i in range(n):
        answer = f"a photo of a {vio.OBJECT_VOCAB[i]}"
        samples.append((penult(rng, 6), record(question="what", answer=answer,
                                               sid=f"stim{i:05d}")))
    return samples


class TestTraining:
    def test_stage1_freezes_lm_bytes(self, rng):
        state = tiny_state()
        samples = overfit_samples(rng, state)
        before = {k: v.detach().clone() for k, v in state.lm.state_dict().items()}
        br.train_bridge(state, samples, stage=1,
                        schedule=br.BridgeSchedule(lr=1e-3, epochs=3, batch=2, seed=0))
        for k, v in state.lm.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_stage2_updates_lm(self, rng):
        state = tiny_state()
        samples = overfit_samples(rng, state)
        before = {k: v.detach().clone() for k, v in state.lm.state_dict().items()}
        br.train_bridge(state, samples, stage=2,
                        schedule=br.BridgeSchedule(lr=1e-3, epochs=3, batch=2, seed=0))
        changed = any(
            not torch.equal(v, before[k]) for k, v in state.lm.state_dict().items()
        )
        assert changed

    def test_lr_zero_changes_nothing(self, rng):
        state = tiny_state()
        samples = overfit_samples(rng, state)
        before = {k: v.detach().clone() for k, v in state.state_dict().items()}
        br.train_bridge(state, samples, stage=2,
                        schedule=br.BridgeSchedule(lr=0.0, epochs=2, batch=2, seed=0))
        for k, v in state.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_stage2_external_lm_is_capability_error(self, rng):
        handle = br.LanguageModelHandle(impl="external", adapter_id="llm-x",
                                        tokenizer=br.ByteTokenizer())
        with pytest.raises(CapabilityError):
            state = br.BridgeState(ENC_HIDDEN, handle)
            br.train_bridge(state, [], stage=2, schedule=br.BridgeSchedule())

    def test_overfit_small_set(self, rng):
        state = tiny_state(width=64)
        samples = overfit_samples(rng, state, n=4)
        br.train_bridge(state, samples, stage=1,
                        schedule=br.BridgeSchedule(lr=3e-3, epochs=10, batch=4, seed=1))
        br.train_bridge(state, samples, stage=2,
                        schedule=br.BridgeSchedule(lr=3e-3, epochs=120, batch=4, seed=2))
        assert br.answer_token_accuracy(state, samples) >= 0.99


class TestGenerate:
    def test_greedy_deterministic(self, rng):
        state = tiny_state()
        h = penult(rng)
        a = br.generate(state, h, "Describe the image concisely.", max_tokens=8)
        b = br.generate(state, h, "Describe the image concisely.", max_tokens=8)
        assert a == b

    def test_zero_budget_empty(self, rng):
        state = tiny_state()
        assert br.generate(state, penult(rng), "hi", max_tokens=0) == ""

    def test_overfit_emits_caption_verbatim(self, rng):
        state = tiny_state(width=64)
        caption = "a photo of a zebra"
        samples = [(penult(rng, 6), record(question="Describe the image concisely.",
                                           answer=caption))]
        br.train_bridge(state, samples, stage=2,
                        schedule=br.BridgeSchedule(lr=3e-3, epochs=150, batch=1, seed=3))
        out = br.generate(state, samples[0][0], "Describe the image concisely.",
                          max_tokens=40)
        assert out == caption

    def test_context_overflow(self, rng):
        state = tiny_state(max_len=32)
        with pytest.raises(ValidationError):
            br.generate(state, penult(rng), "x" * 100, max_tokens=8)


class TestInstructionDataset:
    def _store(self, tmp_path, rng, n=2):
        for i in range(n):
            vio.save_targets(tmp_path, vio.StimulusTargets(
                stimulus_id=f"stim{i:05d}",
                image_embed=rng.standard_normal(8).astype(np.float32),
                image_latent=rng.standard_normal(8).astype(np.float32),
                captions=vio.synthetic_captions(i),
            ))
        return tmp_path

    def test_brief_template_verbatim(self, tmp_path, rng):
        store = self._store(tmp_path, rng, n=1)
        records, skipped = br.build_instruction_dataset(store, kinds=("brief",), seed=0)
        assert skipped == 0
        assert len(records) == 1
        human = records[0].turns[0][1]
        instruction = human.replace("[image] ", "", 1)
        assert instruction in BRIEF_INSTRUCTIONS
        assert records[0].turns[1][1] == vio.synthetic_captions(0)[0]

    def test_object_substitution(self, tmp_path, rng):
        store = self._store(tmp_path, rng, n=1)
        records, _ = br.build_instruction_dataset(store, kinds=("concept_loc",), seed=0)
        obj = br.extract_object_from_caption(vio.synthetic_captions(0)[0])
        assert records[0].turns[0][1] == f'[image] Locating the concept of "{obj}"'
        assert records[0].turns[1][1] == obj

    def test_missing_captions_skipped(self, tmp_path, rng):
        store = self._store(tmp_path, rng, n=1)
        vio.save_targets(store, vio.StimulusTargets(
            stimulus_id="stim99999",
            image_embed=rng.standard_normal(8).astype(np.float32),
            image_latent=rng.standard_normal(8).astype(np.float32),
            captions=[],
        ))
        records, skipped = br.build_instruction_dataset(store, kinds=("brief",), seed=0)
        assert skipped == 1
        assert len(records) == 1

    def test_empty_template_pool_rejected(self, tmp_path, rng):
        store = self._store(tmp_path, rng, n=1)
        with pytest.raises(ValidationError):
            br.build_instruction_dataset(store, kinds=("brief",), seed=0,
                                         templates={"brief": ()})


class TestCheckpoint:
    def test_roundtrip(self, rng, tmp_path):
        state = tiny_state(seed=4)
        h = penult(rng)
        want = br.generate(state, h, "Summarize the image.", max_tokens=6)
        br.save_bridge(state, tmp_path / "bk", meta={"stage": 1})
        loaded, meta = br.load_bridge(tmp_path / "bk")
        got = br.generate(loaded, h, "Summarize the image.", max_tokens=6)
        assert got == want
        assert meta == {"stage": 1}
