import sys

import numpy as np
import pytest

from voxelbridge import embedders as emb
from voxelbridge.errors import CapabilityError, ValidationError


def spec_image(dim=64, seed=0, kind="image_embedding"):
    return emb.EmbedderSpec(kind=kind, dim=dim, seed=seed)


def spec_text(dim=64, seed=0):
    return emb.EmbedderSpec(kind="text_embedding", dim=dim, seed=seed)


class TestImageStandin:
    def test_deterministic(self, rng):
        img = rng.random((20, 30, 3))
        a = emb.embed_image(spec_image(), img)
        b = emb.embed_image(spec_image(), img.copy())
        assert a.tobytes() == b.tobytes()

    def test_embedding_unit_norm(self, rng):
        img = rng.random((17, 13, 3))
        v = emb.embed_image(spec_image(), img)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-6

    def test_latent_kind_not_normalized(self, rng):
        img = rng.random((17, 13, 3)) * 50.0
        v = emb.embed_image(spec_image(kind="image_latent", dim=32), img)
        assert abs(np.linalg.norm(v) - 1.0) > 1e-3

    def test_unrelated_images_decorrelate(self, rng):
        # random-projection concentration: |cos| < 0.5 nearly always at d=64
        hits = 0
        trials = 1000
        for i in range(trials):
            r = np.random.default_rng(i)
            a = emb.embed_image(spec_image(), r.random((8, 8, 3)))
            b = emb.embed_image(spec_image(), r.random((8, 8, 3)))
            if abs(float(a @ b)) < 0.5:
                hits += 1
        assert hits / trials >= 0.99

    def test_empty_image_rejected(self):
        with pytest.raises(ValidationError):
            emb.embed_image(spec_image(), np.zeros((0, 4, 3)))

    def test_kind_mismatch_rejected(self, rng):
        with pytest.raises(ValidationError):
            emb.embed_image(spec_text(), rng.random((4, 4, 3)))


class TestTextStandin:
    def test_deterministic(self):
        assert np.array_equal(emb.embed_text(spec_text(), "zebra"),
                              emb.embed_text(spec_text(), "zebra"))

    def test_case_folded(self):
        assert np.array_equal(emb.embed_text(spec_text(), "zebra"),
                              emb.embed_text(spec_text(), "Zebra"))

    def test_distinct_concepts_separate(self):
        a = emb.embed_text(spec_text(), "zebra")
        b = emb.embed_text(spec_text(), "train")
        assert float(a @ b) < 0.9

    def test_unit_norm(self):
        assert abs(np.linalg.norm(emb.embed_text(spec_text(), "umbrella")) - 1.0) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            emb.embed_text(spec_text(), "")

    def test_single_char_works(self):
        v = emb.embed_text(spec_text(), "a")
        assert np.linalg.norm(v) > 0


class TestAdapters:
    def setup_method(self):
        emb.clear_adapters()

    def teardown_method(self):
        emb.clear_adapters()

    def test_unregistered_adapter_is_capability_error(self, rng):
        spec = emb.EmbedderSpec(kind="image_embedding", dim=8, impl="external",
                                adapter_id="missing")
        with pytest.raises(CapabilityError):
            emb.embed_image(spec, rng.random((4, 4, 3)))

    def test_inprocess_adapter(self, rng):
        emb.register_adapter("fake", lambda payload: np.arange(8, dtype=np.float64))
        spec = emb.EmbedderSpec(kind="image_embedding", dim=8, impl="external",
                                adapter_id="fake")
        out = emb.embed_image(spec, rng.random((4, 4, 3)))
        assert out.tolist() == list(range(8))

    def test_executable_adapter_contract(self, tmp_path, rng):
        # tiny external process: reads stdin bytes, emits dim float32 LE values
        script = tmp_path / "adapter.py"
        script.write_text(
            "import sys, struct\n"
            "data = sys.stdin.buffer.read()\n"
            "vals = [float(len(data)), 2.5, -1.0, 0.0]\n"
            "sys.stdout.buffer.write(struct.pack('<4f', *vals))\n"
        )
        adapter = emb.ExternalProcessAdapter([sys.executable, str(script)], dim=4)
        emb.register_adapter("proc", adapter)
        spec = emb.EmbedderSpec(kind="text_embedding", dim=4, impl="external",
                                adapter_id="proc")
        out = emb.embed_text(spec, "kite")
        assert out[0] == 4.0  # "kite" is four bytes
        assert out[1] == 2.5

    def test_wrong_length_from_adapter_rejected(self):
        emb.register_adapter("short", lambda payload: np.zeros(3, dtype=np.float64))
        spec = emb.EmbedderSpec(kind="text_embedding", dim=4, impl="external",
                                adapter_id="short")
        with pytest.raises(ValidationError):
            emb.embed_text(spec, "zebra")
