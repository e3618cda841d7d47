import json

import numpy as np
import pytest

from diffpali.imageio import save_png
from diffpali.model import ModelConfig, ToyVLM
from diffpali.tensor import make_rng
from diffpali.tokenizer import ToyTokenizer

COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0), "white": (1.0, 1.0, 1.0)}


def solid(color, size=32):
    return np.ones((size, size, 3), np.float32) * np.asarray(color, np.float32)


@pytest.fixture
def toy_data(tmp_path):
    """Four solid-colour PNGs with a VQA file, a needle manifest and a config."""
    with open(tmp_path / "train.jsonl", "w") as fh:
        for name, c in COLORS.items():
            save_png(tmp_path / f"{name}.png", solid(c))
            fh.write(json.dumps({"image": f"{name}.png", "question": "what color is this?",
                                 "answers": [name] * 10}) + "\n")
    with open(tmp_path / "needle.jsonl", "w") as fh:
        for name in COLORS:
            fh.write(json.dumps({"image": f"{name}.png", "caption": f"a {name} square"}) + "\n")
    (tmp_path / "toy.cfg").write_text(
        "data.train = train.jsonl\n"
        "data.vocab = needle.jsonl\n"
        "train.batch_size = 2\n"
        "train.max_steps = 6\n"
        "train.epochs = 3\n"
        "out.dir = run\n"
        "seed = 3\n")
    return tmp_path


def small_tokenizer(n=20):
    return ToyTokenizer([f"w{i}" for i in range(n)])


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(d_model=16, d_head=8, n_layers_enc=1, n_layers_dec=2, vocab_size=64,
                      image_size=8, patch_size=4, max_seq_len=16)
    return ToyVLM.init(cfg, small_tokenizer(), make_rng(0))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
