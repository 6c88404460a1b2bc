import math

import numpy as np
import pytest
import torch

from binauraldiff import conditioning as cond
from binauraldiff import nn_core as nn
from binauraldiff import prompts
from binauraldiff.conditioning import (MonoEncoder, TextEncoder,
                                       condition_dropout_mask, encode_prompt,
                                       pool_planes, sinusoid_table,
                                       timestep_embedding)


def test_sinusoid_table_matches_formula():
    table = sinusoid_table(8, 6)
    for pos, i in [(0, 0), (3, 1), (7, 2), (5, 0)]:
        angle = pos / 10000.0 ** (2 * i / 6)
        assert table[pos, 2 * i] == pytest.approx(math.sin(angle), abs=1e-12)
        assert table[pos, 2 * i + 1] == pytest.approx(math.cos(angle), abs=1e-12)
    assert np.array_equal(table[0], np.tile([0.0, 1.0], 3))


def test_timestep_embedding_formula_and_shape():
    emb = timestep_embedding([0, 17], dim=8)
    assert emb.shape == (2, 8)
    assert torch.allclose(emb[0], torch.tensor([0.0] * 4 + [1.0] * 4))
    freqs = np.exp(-np.log(10000.0) * np.arange(4) / 4)
    assert emb[1, :4].numpy() == pytest.approx(np.sin(17 * freqs), abs=1e-6)
    assert emb[1, 4:].numpy() == pytest.approx(np.cos(17 * freqs), abs=1e-6)


def test_position_table_initialized_to_sinusoids():
    enc = TextEncoder(seed=4)
    expect = sinusoid_table(cond.MAX_TOKENS, cond.D_TEXT).astype(np.float32)
    assert np.array_equal(enc.pos.detach().numpy(), expect)


def test_encode_prompt_deterministic():
    enc = TextEncoder(seed=0)
    text = "The music is located left, behind, below, 8.5m away."
    a = encode_prompt(text, enc)
    b = encode_prompt(text, enc)
    assert a.shape == (128,)
    assert np.array_equal(a, b)


def test_zeroed_embedding_tables_give_zero_vector():
    enc = TextEncoder(seed=1)
    with torch.no_grad():
        enc.tok.zero_()
        enc.pos.zero_()
    v = encode_prompt("The music is located left, behind, below, 5m away.", enc)
    assert np.all(v == 0.0)


def test_embedding_dim_constant_across_grammar():
    enc = TextEncoder(seed=2)
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(60):
        _, spec = prompts.sample_scene_spec(rng, prompts.sample_category(rng))
        text = prompts.generate_prompt(spec)
        v = encode_prompt(text, enc)
        assert v.shape == (128,)
        seen.add(spec.kind)
    assert len(seen) == 2


def test_distinct_texts_separate():
    enc = TextEncoder(seed=3)
    a = encode_prompt("The music is located left, behind, below, 5m away.", enc)
    b = encode_prompt("The music is located right, behind, below, 5m away.", enc)
    assert not np.array_equal(a, b)


def test_encode_prompt_oov_raises():
    enc = TextEncoder(seed=0)
    with pytest.raises(prompts.VocabularyError):
        encode_prompt("The kazoo is located left, behind, below, 5m away.", enc)


def test_overlong_prompt_raises():
    enc = TextEncoder(seed=0)
    ids = torch.zeros((1, cond.MAX_TOKENS + 1), dtype=torch.long)
    with pytest.raises(ValueError, match="longer"):
        enc(ids)


def test_text_encoder_gradcheck():
    enc = TextEncoder(seed=5, dtype=torch.float64)
    ids = torch.tensor([cond.prompt_ids(
        "The music is located left, behind, below, 5m away.")])
    target = torch.tensor(
        np.random.default_rng(1).standard_normal(128), dtype=torch.float64)

    def loss_fn():
        return ((enc(ids)[0] - target) ** 2).mean()

    worst = nn.gradcheck(loss_fn, enc.params(), max_entries=8)
    assert worst < 1e-4


def test_mono_encoder_shape_and_zero_weights():
    m = MonoEncoder(seed=0)
    x = torch.randn(2, 2, 12, 8)
    out = m(x)
    assert out.shape == (2, 8, 12, 8)
    for t in m.params().values():
        with torch.no_grad():
            t.zero_()
    assert torch.all(m(x) == 0.0)


def test_pool_planes_block_average():
    x = torch.arange(32, dtype=torch.float32).reshape(1, 1, 4, 8)
    out = pool_planes(x, 4)
    assert out.shape == (1, 1, 1, 2)
    assert out[0, 0, 0, 0].item() == pytest.approx(x[0, 0, :4, :4].mean().item())
    assert out[0, 0, 0, 1].item() == pytest.approx(x[0, 0, :4, 4:].mean().item())


def test_condition_dropout_frequency_and_determinism():
    mask = condition_dropout_mask(np.random.default_rng(123), 100_000, p=0.1)
    assert abs(mask.mean() - 0.1) <= 0.005
    again = condition_dropout_mask(np.random.default_rng(123), 100_000, p=0.1)
    assert np.array_equal(mask, again)
