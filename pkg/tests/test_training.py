import hashlib
import json

import numpy as np
import pytest

from diffpali import checkpoint
from diffpali.eval_vqa import VqaRecord
from diffpali.model import ModelConfig, ToyVLM
from diffpali.tensor import Tensor, make_rng
from diffpali.tokenizer import ToyTokenizer
from diffpali.training import (RECIPES, AdamState, Example, NumericError, TrainConfig, adam_step,
                               build_examples, clip_global_norm, example_loss, majority_answer,
                               prepare_model, train)

from conftest import COLORS, solid


def frozen_hash(model):
    trainable = set(model.trainable_names())
    h = hashlib.sha256()
    for name, t in sorted(model.named_tensors().items()):
        if name not in trainable:
            h.update(name.encode() + t.data.tobytes())
    return h.hexdigest()


def make_setup(seed=0, n=2, **train_kw):
    tok = ToyTokenizer.build(["what color is this?", *COLORS])
    cfg = ModelConfig(d_model=16, d_head=8, n_layers_enc=1, n_layers_dec=2, vocab_size=64,
                      image_size=8, patch_size=4, max_seq_len=16)
    model = ToyVLM.init(cfg, tok, make_rng(seed))
    tcfg = TrainConfig(batch_size=2, lora_rank=4, seed=seed, **train_kw)
    prepare_model(model, tcfg)
    examples = [Example(solid(c, 8), tok.prompt_ids("what color is this?"), tok.encode(name))
                for name, c in list(COLORS.items())[:n]]
    return model, examples, tcfg


class TestAdam:
    def test_zero_gradient_no_decay(self):
        p = Tensor([1.0, -2.0])
        before = p.data.copy()
        adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude_is_lr(self):
        p = Tensor([0.5])
        adam_step({"p": p}, {"p": np.ones(1)}, AdamState(), lr=1e-3)
        # m̂ = 1, v̂ = 1, so the step is lr / (1 + eps), up to float32 storage of p
        assert abs((0.5 - float(p.data[0])) - 1e-3 / (1 + 1e-8)) < 1e-7

    def test_independent_params(self):
        a, b = Tensor([1.0]), Tensor([1.0])
        state = AdamState()
        adam_step({"a": a, "b": b}, {"a": np.ones(1), "b": np.zeros(1)}, state, lr=0.1)
        c = Tensor([1.0])
        adam_step({"c": c}, {"c": np.ones(1)}, AdamState(), lr=0.1)
        assert a.data[0] == c.data[0] and b.data[0] == 1.0

    def test_decoupled_weight_decay(self):
        p = Tensor([2.0])
        adam_step({"p": p}, {"p": np.zeros(1)}, AdamState(), lr=0.5, weight_decay=0.1)
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_nan_gradient_names_tensor(self):
        p = Tensor([1.0, 2.0])
        with pytest.raises(NumericError, match="dec.0.lambda_q1"):
            adam_step({"dec.0.lambda_q1": p}, {"dec.0.lambda_q1": np.array([np.nan, 0.0])}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_global_norm(grads, 1.0) == pytest.approx(5.0)
        assert np.sqrt(grads["a"] ** 2 + grads["b"] ** 2)[0] == pytest.approx(1.0)
        small = {"a": np.array([0.1])}
        clip_global_norm(small, 1.0)
        assert small["a"][0] == 0.1


class TestConfig:
    def test_lr_rule_constant_times_batch(self):
        assert TrainConfig(lr_rule="constant_times_batch", batch_size=4).effective_lr == pytest.approx(4e-4)
        assert TrainConfig(lr_rule="constant_times_batch", batch_size=8).effective_lr == pytest.approx(8e-4)

    def test_alpha_policy(self):
        assert TrainConfig(lora_rank=16).effective_alpha == 32

    def test_table_rows_match_rule(self):
        for variant, ffn, lr, rank, alpha, wd in RECIPES.values():
            assert alpha == 2 * rank
        assert RECIPES[1][2] == TrainConfig(lr_rule="constant_times_batch").effective_lr

    def test_bad_rule(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_rule="cosine")


class TestData:
    def test_majority_answer(self):
        assert majority_answer(["Red", "blue", "red ", "blue", "green"]) == "red"

    def test_loss_only_on_answer_tokens(self):
        model, examples, _ = make_setup()
        ex = examples[0]
        loss, count = example_loss(model, ex)
        assert count == len(ex.answer) + 1
        seq = ex.prompt + ex.answer + [model.tokenizer.eos_id]
        logits = model.forward(ex.pixels, seq[:-1]).data[model.config.n_image_tokens:].astype(np.float64)
        total = 0.0
        for j in range(len(ex.prompt) - 1, len(seq) - 1):
            row = logits[j]
            total += np.log(np.exp(row - row.max()).sum()) + row.max() - row[seq[j + 1]]
        assert loss.item() == pytest.approx(total, rel=1e-5)

    def test_build_examples_skips_bad_images(self, tmp_path):
        model, _, _ = make_setup()
        (tmp_path / "bad.png").write_bytes(b"not a png")
        recs = [VqaRecord(tmp_path / "bad.png", "what color is this?", ["red"] * 10)]
        assert build_examples(model, recs) == []


class TestTrain:
    def test_lr_zero_keeps_params(self):
        model, examples, cfg = make_setup(lr=0.0, epochs=2, weight_decay=0.0)
        before = {n: t.data.tobytes() for n, t in model.named_tensors().items()}
        train(model, examples, cfg)
        assert before == {n: t.data.tobytes() for n, t in model.named_tensors().items()}

    def test_bit_identical_loss_curve(self):
        curves = []
        for _ in range(2):
            model, examples, cfg = make_setup(seed=4, epochs=3)
            curves.append([r["loss"] for r in train(model, examples, cfg)[1]])
        assert curves[0] == curves[1] and len(curves[0]) == 3

    def test_frozen_weights_untouched(self):
        model, examples, cfg = make_setup(epochs=5, lr=1e-2)
        before = frozen_hash(model)
        trainable_before = {n: t.data.copy() for n, t in model.trainable_tensors().items()}
        train(model, examples, cfg)
        assert frozen_hash(model) == before
        assert any(not np.array_equal(t.data, trainable_before[n]) for n, t in model.trainable_tensors().items())
        for name, t in model.named_tensors().items():
            assert t.grad is None, name

    def test_loss_decreases(self):
        model, examples, cfg = make_setup(n=1, epochs=40, lr=1e-2)
        recs = train(model, examples, cfg)[1]
        assert recs[-1]["loss"] < 0.5 * recs[0]["loss"]

    def test_metrics_and_checkpoint_written(self, tmp_path):
        model, examples, cfg = make_setup(epochs=2)
        train(model, examples, cfg, out_dir=tmp_path, metrics_path=tmp_path / "m.jsonl")
        lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert [l["step"] for l in lines] == [1, 2]
        assert set(lines[0]) == {"step", "loss", "lr", "lambda_mean"}
        _, meta = checkpoint.load(tmp_path / "last.ckpt")
        assert meta["step"] == 2 and meta["epoch"] == 2

    def test_nan_loss_raises(self):
        model, examples, cfg = make_setup()
        model.unembed.data[:] = np.nan
        with pytest.raises(NumericError):
            train(model, examples, cfg)

    def test_max_steps(self):
        model, examples, cfg = make_setup(n=4, epochs=10, max_steps=3)
        assert len(train(model, examples, cfg)[1]) == 3

    def test_checkpoint_round_trip_after_training(self, tmp_path):
        model, examples, cfg = make_setup(epochs=2, lr=1e-2)
        train(model, examples, cfg, out_dir=tmp_path)
        loaded, _ = checkpoint.load_model(tmp_path / "last.ckpt")
        for name, t in model.named_tensors().items():
            assert loaded.named_tensors()[name].data.tobytes() == t.data.tobytes(), name
        ex = examples[0]
        np.testing.assert_array_equal(model.forward(ex.pixels, ex.prompt).data,
                                      loaded.forward(ex.pixels, ex.prompt).data)
        assert loaded.trainable_names() == model.trainable_names()
