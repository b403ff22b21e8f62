from types import SimpleNamespace

import numpy as np
import pytest
import torch

from voxelbridge import bridge as br
from voxelbridge import localizer as loc
from voxelbridge import preprocess as pp
from voxelbridge.embedders import EmbedderSpec
from voxelbridge.encoder import EncoderConfig, FmriEncoder
from voxelbridge.errors import ValidationError
from voxelbridge.volume_io import BrainVolume

DIMS = (6, 6, 6)
SPEC = pp.PatchSpec(edge=3, canonical_dims=DIMS)
TEXT_SPEC = EmbedderSpec(kind="text_embedding", dim=8, seed=0)


def make_model(seed=0, n_layers=2, pos_table=8):
    torch.manual_seed(seed)
    config = EncoderConfig(
        patch_dim=27, pos_table_size=pos_table, embed_dim=8, latent_dim=12,
        n_layers=n_layers, hidden=32, n_heads=2, head_hidden=16,
    )
    return FmriEncoder(config)


def make_signal(rng, mask_data=None):
    mask = pp.TaskMask(np.ones(DIMS, dtype=bool) if mask_data is None else mask_data)
    vol = BrainVolume("s", rng.standard_normal(DIMS).astype(np.float32))
    return pp.patchify(vol, SPEC, mask), vol


class TestExtractConcept:
    def test_template_parse(self):
        assert loc.extract_concept(None, 'Locating the concept of "zebra"') == "zebra"

    def test_escaped_quote_inner_verbatim(self):
        inner = 'ze\\"bra'
        assert loc.extract_concept(None, f'Locating the concept of "{inner}"') == inner

    def test_freeform_without_bridge_rejected(self):
        with pytest.raises(ValidationError):
            loc.extract_concept(None, "where is the train?")

    def test_freeform_with_overfit_bridge(self, rng):
        handle = br.LanguageModelHandle.tiny(
            br.TinyLMConfig(vocab_size=260, n_layers=2, width=64, n_heads=2,
                            max_len=256), seed=0)
        state = br.BridgeState(16, handle, seed=0)
        h = rng.standard_normal((4, 16)).astype(np.float32)
        rec = br.ConversationRecord(
            "s", [("human", "[image] where is the train?"), ("bot", "train")], "concept_loc"
        )
        br.train_bridge(state, [(h, rec)], stage=2,
                        schedule=br.BridgeSchedule(lr=3e-3, epochs=120, batch=1, seed=1))
        assert loc.extract_concept(state, "where is the train?", penultimate=h) == "train"


class TestGradcam:
    def test_relevance_nonnegative(self, rng):
        model = make_model()
        signal, _ = make_signal(rng)
        rel = loc.gradcam(model, signal, np.ones(8))
        assert rel.shape == (8,)
        assert np.all(rel >= 0)

    def test_gradient_blocked_probe_is_zero(self, rng):
        # at the last block the prediction reads only the class token, so the
        # patch-token gradient is exactly zero
        model = make_model(n_layers=2)
        signal, _ = make_signal(rng)
        rel = loc.gradcam(model, signal, np.ones(8), layer=2)
        assert np.array_equal(rel, np.zeros(8))

    def test_positive_scaling_invariance(self, rng):
        model = make_model()
        signal, _ = make_signal(rng)
        t = rng.standard_normal(8)
        r1 = loc.gradcam(model, signal, t)
        r2 = loc.gradcam(model, signal, 3.7 * t)
        assert np.max(np.abs(r1 - r2)) < 1e-6

    def test_zero_target_rejected(self, rng):
        model = make_model()
        signal, _ = make_signal(rng)
        with pytest.raises(ValidationError):
            loc.gradcam(model, signal, np.zeros(8))

    def test_matches_finite_difference_oracle(self, rng):
        # independent oracle: numeric dscore/dA via central differences on a
        # hand-rolled tail of the network, then the relevance formula by hand
        model = make_model(n_layers=1).double()
        signal, _ = make_signal(rng)
        layer = 1
        rel = loc.gradcam(model, signal, np.ones(8), layer=layer)

        values = torch.from_numpy(signal.values).double().unsqueeze(0)
        retained = torch.from_numpy(signal.index_map.retained)
        with torch.no_grad():
            acts = model.forward_tokens(values, retained, collect_hidden=True).hidden_states[layer]

        def score_from(acts_tensor):
            x = acts_tensor
            for block in model.blocks[layer:]:
                x = block(x)
            pred = model.head_embed(model.final_norm(x)[:, 0, :])[0]
            t = torch.ones(8, dtype=torch.float64) / np.sqrt(8.0)
            return float(pred @ t / pred.norm())

        h = 1e-6
        grads = np.zeros(acts.shape[1:], dtype=np.float64)
        with torch.no_grad():
            for tok in range(acts.shape[1]):
                for k in range(acts.shape[2]):
                    plus = acts.clone()
                    plus[0, tok, k] += h
                    minus = acts.clone()
                    minus[0, tok, k] -= h
                    grads[tok, k] = (score_from(plus) - score_from(minus)) / (2 * h)
        w = grads[1:].mean(axis=0)
        want = np.maximum((acts[0, 1:].numpy() * w).sum(axis=1), 0.0)
        assert np.max(np.abs(rel - want)) < 1e-6


class TestLocalize:
    def test_single_patch_heatmap(self, rng):
        mask = np.zeros(DIMS, dtype=bool)
        mask[0, 0, 0] = True
        model = make_model()
        signal, _ = make_signal(rng, mask)
        heat = loc.localize([(model, signal)], "zebra", TEXT_SPEC)
        cube = heat.values[0:3, 0:3, 0:3]
        outside = heat.values.copy()
        outside[0:3, 0:3, 0:3] = 0
        if heat.values.max() > 0:
            assert np.allclose(cube, 1.0)
        assert np.array_equal(outside, np.zeros(DIMS, dtype=np.float32))

    def test_fusing_identical_scales_is_identity(self, rng):
        model = make_model()
        signal, _ = make_signal(rng)
        one = loc.localize([(model, signal)], "zebra", TEXT_SPEC)
        two = loc.localize([(model, signal), (model, signal)], "zebra", TEXT_SPEC)
        assert np.allclose(one.values, two.values, atol=1e-7)

    def test_heatmap_bounds_and_peak(self, rng):
        model = make_model()
        signal, _ = make_signal(rng)
        heat = loc.localize([(model, signal)], "boat", TEXT_SPEC)
        assert heat.values.min() >= 0.0
        assert heat.values.max() <= 1.0
        if heat.values.max() > 0:
            assert heat.values.max() == pytest.approx(1.0)

    def test_joint_permutation_invariance(self, rng):
        model = make_model()
        signal, _ = make_signal(rng)
        heat1 = loc.localize([(model, signal)], "kite", TEXT_SPEC)
        perm = np.random.default_rng(1).permutation(signal.index_map.n_patches)
        shuffled = SimpleNamespace(
            values=signal.values[perm],
            index_map=SimpleNamespace(
                retained=signal.index_map.retained[perm],
                grid_dims=signal.index_map.grid_dims,
                pad=signal.index_map.pad,
                n_patches=signal.index_map.n_patches,
            ),
            spec=signal.spec,
            provenance=signal.provenance,
        )
        heat2 = loc.localize([(model, shuffled)], "kite", TEXT_SPEC)
        assert np.max(np.abs(heat1.values - heat2.values)) < 1e-5

    def test_mismatched_sources_rejected(self, rng):
        model = make_model()
        s1, _ = make_signal(rng)
        s2, _ = make_signal(rng)
        s2.provenance = "other-volume"
        s1.provenance = "this-volume"
        with pytest.raises(ValidationError):
            loc.localize([(model, s1), (model, s2)], "zebra", TEXT_SPEC)


class TestNullify:
    def _heat(self, values):
        return loc.VoxelHeatmap(values=values.astype(np.float32), concept="c",
                                scales_used=[3])

    def test_single_cube_zeroed(self, rng):
        vol = BrainVolume("s", rng.standard_normal(DIMS).astype(np.float32) + 5.0)
        h = np.zeros(DIMS)
        h[0:3, 0:3, 0:3] = 1.0
        out = loc.nullify(vol, self._heat(h), tau=50.0)
        assert np.array_equal(out.data[0:3, 0:3, 0:3], np.zeros((3, 3, 3), np.float32))
        untouched = out.data.copy()
        untouched[0:3, 0:3, 0:3] = vol.data[0:3, 0:3, 0:3]
        assert np.array_equal(untouched, vol.data)

    def test_all_zero_heatmap_unchanged(self, rng):
        vol = BrainVolume("s", rng.standard_normal(DIMS).astype(np.float32))
        out = loc.nullify(vol, self._heat(np.zeros(DIMS)), tau=90.0)
        assert np.array_equal(out.data, vol.data)

    def test_idempotent_under_fixed_heatmap(self, rng):
        vol = BrainVolume("s", rng.standard_normal(DIMS).astype(np.float32))
        h = self._heat(np.random.default_rng(0).random(DIMS))
        once = loc.nullify(vol, h, tau=80.0)
        twice = loc.nullify(once, h, tau=80.0)
        assert np.array_equal(once.data, twice.data)

    def test_tau_bounds(self, rng):
        vol = BrainVolume("s", rng.standard_normal(DIMS).astype(np.float32))
        h = self._heat(np.ones(DIMS))
        for tau in (0.0, 100.0, -3.0):
            with pytest.raises(ValidationError):
                loc.nullify(vol, h, tau)


class TestExport:
    def test_heatmap_roundtrip(self, rng, tmp_path):
        model = make_model()
        signal, _ = make_signal(rng)
        heat = loc.localize([(model, signal)], "vase", TEXT_SPEC)
        loc.export_heatmap(heat, tmp_path / "h.nvol", {"tau": 90})
        back = loc.load_heatmap(tmp_path / "h.nvol")
        assert np.array_equal(back.values, heat.values)
        assert back.concept == "vase"
        assert back.scales_used == [3]
