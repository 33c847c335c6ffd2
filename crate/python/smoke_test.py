"""Smoke test of the Python bindings on a tiny corpus and model.

    pip install -e crates/py --no-build-isolation
    python python/smoke_test.py
"""

import math
import os
import sys
import tempfile

import vista3d_py as v

TINY = """
[model]
d = 16
n_heads = 2
text_layers = 1
scene_layers = 1
fusion_layers = 1
d_ff = 32
max_text_len = 12
max_objects = 3
n_points = 32
grounding_hidden = 8

[corpus]
objects_per_scene = [2, 3]
samples_per_scene = 2

[corpus.bounds]
min = [0.0, 0.0, 0.0]
max = [3.0, 3.0, 2.0]

[pretrain]
epochs = 1
batch_size = 8
warmup_steps = 2

[finetune]
epochs = 1
batch_size = 8
warmup_steps = 2
"""


def main():
    assert v.tokenize("The Chair, left?") == ["the", "chair", ",", "left", "?"]

    s = v.spatial_pair([0.0, 0.0, 0.0], [3.0, 4.0, 0.0])
    assert math.isclose(s[0], 5.0) and math.isclose(s[1], 0.8) and math.isclose(s[2], 0.6)
    assert math.isclose(s[3], 0.0, abs_tol=1e-12) and math.isclose(s[4], 1.0)

    ids = [1] + list(range(6, 56))
    out, labels = v.mask_text(ids, 0.15, 6, 56, seed=3)
    assert out[0] == 1 and labels[0] == -1
    assert all(o == i for o, i, l in zip(out, ids, labels) if l < 0)
    assert out == v.mask_text(ids, 0.15, 6, 56, seed=3)[0]

    with tempfile.TemporaryDirectory() as tmp:
        summary = v.write_corpus(os.path.join(tmp, "corpus"), seed=1, scenes=12, config=TINY)
        assert summary["scenes"] == 12 and len(summary["files"]) >= 8

        corpus = v.Corpus(seed=1, scenes=24, config=TINY)
        sizes = corpus.sizes()
        assert set(sizes) == {"pretrain", "grounding", "qa", "caption"}
        text, _, n_objects = corpus.sample("grounding", 0)
        assert text[0] == 1 and corpus.decode(text).startswith("[CLS] the")
        assert 2 <= n_objects <= 3

        model = v.Model(corpus, seed=0)
        assert model.num_params > 0
        assert "head.mlm.weight" in model.param_names()
        shape, values = model.param("head.mlm.weight")
        assert shape == [16, len(corpus.vocabulary)] and len(values) == shape[0] * shape[1]

        records = model.pretrain(corpus)
        assert len(records) == 1 and math.isfinite(records[0]["loss"])
        metrics = model.evaluate(corpus, "pretrain")
        assert 0.0 <= metrics["stm_acc"] <= 1.0

        model.finetune(corpus, "grounding")
        scores = model.grounding_scores(corpus, 0)
        assert len(scores) == n_objects

        path = os.path.join(tmp, "model.bin")
        model.save(path)
        loaded = v.Model.load(path)
        assert loaded.param("head.mlm.weight") == model.param("head.mlm.weight")
        assert loaded.evaluate(corpus, "grounding") == model.evaluate(corpus, "grounding")

        caption = model.caption(corpus, 0, 0)
        assert isinstance(caption, str)

    try:
        corpus.sample("pretrain", 0, split="test")
    except ValueError:
        pass
    else:
        raise AssertionError("bad split accepted")

    checks = v.gradcheck(max_elements=4)
    failed = [name for name, _, ok in checks if not ok]
    assert not failed, failed

    print(f"smoke test passed ({len(checks)} gradient checks, {model.num_params} parameters)")


if __name__ == "__main__":
    sys.exit(main())
