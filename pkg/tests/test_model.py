import numpy as np
import pytest

from prefalign.model import (
    CheckpointError,
    ModelConfig,
    PolicyModel,
    Sampling,
    TokenizerError,
    Vocab,
    generate,
    generate_batch,
    load_model,
    load_tensors,
    save_model,
    save_tensors,
)
from prefalign.numerics import RngState
from prefalign.taskgen import task_vocab


@pytest.fixture(scope="module")
def vocab():
    return task_vocab()


def tiny(vocab, seed=0, **kw):
    cfg = ModelConfig(vocab_size=len(vocab), **kw)
    return PolicyModel(cfg, RngState(seed))


def random_tokens(vocab, rng, b, t):
    return rng.integers(4, len(vocab), size=(b, t))


# --------------------------------------------------------------------------
# vocab
# --------------------------------------------------------------------------


def test_vocab_empty_and_roundtrip(vocab):
    assert vocab.tokenize("") == []
    assert vocab.detokenize([]) == ""
    assert vocab.detokenize(vocab.tokenize("Answer: B")) == "Answer: B"


def test_vocab_bijective(vocab):
    assert len(set(vocab.tokens)) == len(vocab.tokens)
    assert all(vocab.id_of(t) == i for i, t in enumerate(vocab.tokens))
    assert 100 <= len(vocab) <= 140


def test_vocab_rejects_unknown_character(vocab):
    with pytest.raises(TokenizerError, match="'#'"):
        vocab.tokenize("F = 3 # 4")


def test_vocab_specials():
    v = Vocab()
    assert (v.pad_id, v.bos_id, v.eos_id, v.img_id) == (0, 1, 2, 3)
    assert v.detokenize([v.bos_id, *v.tokenize("ab"), v.eos_id]) == "ab"
    assert v.detokenize([v.bos_id], skip_special=False) == "<bos>"


# --------------------------------------------------------------------------
# image encoder / forward
# --------------------------------------------------------------------------


def test_zero_grid_gives_bias_rows(vocab):
    m = tiny(vocab)
    m.params["img_b"].data = RngState(9).normal(m.params["img_b"].shape)
    out = m.encode_image(np.zeros((8, 8))).data
    assert np.array_equal(out.reshape(-1), m.params["img_b"].data)


def test_distinct_grids_distinct_prefixes(vocab):
    m = tiny(vocab)
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.uniform(size=(2, 8, 8))
        assert not np.array_equal(m.encode_image(a).data, m.encode_image(b).data)
    g = rng.uniform(size=(8, 8))
    assert np.array_equal(m.encode_image(g).data, m.encode_image(g.copy()).data)


def test_encode_image_shape_and_range_errors(vocab):
    m = tiny(vocab)
    with pytest.raises(ValueError, match="8x8"):
        m.encode_image(np.zeros((7, 8)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        m.encode_image(np.full((8, 8), 1.5))


def test_forward_shapes_and_value_head(vocab):
    m = tiny(vocab)
    toks = random_tokens(vocab, np.random.default_rng(0), 3, 10)
    out = m.forward(toks, np.zeros((3, 8, 8)), want_values=True)
    assert out.logits.shape == (3, 10, len(vocab))
    assert out.values.shape == (3, 10)


def test_causal_mask_exact(vocab):
    m = tiny(vocab, seed=3)
    rng = np.random.default_rng(1)
    toks = random_tokens(vocab, rng, 1, 12)
    img = rng.uniform(size=(1, 8, 8))
    base = m.forward(toks, img).logits.data
    for j in range(1, 12):
        pert = toks.copy()
        pert[0, j] = (pert[0, j] + 7) % len(vocab)
        out = m.forward(pert, img).logits.data
        assert np.array_equal(out[0, :j], base[0, :j])


def test_forward_overlength_raises(vocab):
    m = tiny(vocab, max_seq_len=16)
    with pytest.raises(ValueError, match="max_seq_len"):
        m.forward(np.ones((1, 13), dtype=int), np.zeros((1, 8, 8)))


def test_logits_finite_on_random_inputs(vocab):
    m = tiny(vocab, seed=4)
    rng = np.random.default_rng(2)
    for _ in range(10):
        toks = random_tokens(vocab, rng, 100, int(rng.integers(1, 40)))
        out = m.forward(toks, rng.uniform(size=(100, 8, 8))).logits.data
        assert np.all(np.isfinite(out))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(vocab_size=10, d_model=30, n_heads=4)


def test_max_seq_len_covers_task(vocab):
    from prefalign.sft import InputSetting, build_prompt, prompt_ids, response_ids
    from prefalign.taskgen import generate_dataset

    cfg = ModelConfig(vocab_size=len(vocab))
    worst = 0
    for s in generate_dataset(0, 2000):
        p = build_prompt(s, InputSetting.TEXT_IMAGE_CAPTION)
        worst = max(worst, len(prompt_ids(vocab, p)) + len(response_ids(vocab, p.target)) + cfg.image_prefix_len)
    assert worst <= cfg.max_seq_len


# --------------------------------------------------------------------------
# LoRA
# --------------------------------------------------------------------------


def test_zero_init_lora_is_identity(vocab):
    m = tiny(vocab, seed=5)
    toks = random_tokens(vocab, np.random.default_rng(3), 2, 9)
    img = np.random.default_rng(4).uniform(size=(2, 8, 8))
    base = m.forward(toks, img).logits.data
    m.attach_lora(4)
    assert np.array_equal(m.forward(toks, img).logits.data, base)


def test_lora_counts_and_freezing(vocab):
    c = ModelConfig(vocab_size=len(vocab))
    counts = {}
    for r in (4, 8):
        m = PolicyModel(c, RngState(0))
        m.attach_lora(r, train_also=())
        per = 0
        for i in range(c.n_layers):
            for t in ("wq", "wk", "wv", "wo", "w1", "w2"):
                d_in, d_out = m.params[f"h{i}.{t}"].shape
                per += r * (d_in + d_out)
        assert m.adapter_param_count() == per
        assert m.trainable_count() == per
        counts[r] = m.trainable_count()
    assert counts[4] < counts[8]
    assert counts[4] < PolicyModel(c, RngState(0)).base_param_count()


def test_lora_rank_validation(vocab):
    with pytest.raises(ValueError):
        tiny(vocab).attach_lora(0)


def _randomise_adapters(m, seed):
    r = RngState(seed)
    for name, ad in m.adapters.items():
        ad.B.data = r.child(name).normal(ad.B.shape, 0.05)


def test_merge_lora_matches_unmerged(vocab):
    m = tiny(vocab, seed=6)
    m.attach_lora(4)
    _randomise_adapters(m, 1)
    toks = random_tokens(vocab, np.random.default_rng(5), 3, 20)
    img = np.random.default_rng(6).uniform(size=(3, 8, 8))
    before = m.forward(toks, img).logits.data
    base_count = m.base_param_count()
    m.merge_lora()
    after = m.forward(toks, img).logits.data
    assert np.max(np.abs(after - before)) <= 1e-10
    assert not m.adapters
    assert m.base_param_count() == base_count


def test_merge_zero_adapters_keeps_weights(vocab):
    m = tiny(vocab, seed=7)
    w = m.params["h0.wq"].data.copy()
    m.attach_lora(2)
    m.merge_lora()
    assert np.array_equal(m.params["h0.wq"].data, w)


def test_merge_without_adapters_warns(vocab, caplog):
    m = tiny(vocab)
    m.merge_lora()
    assert "no adapters" in caplog.text


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def test_generate_same_seed_same_output(vocab):
    m = tiny(vocab, seed=8)
    prompt = [vocab.bos_id] + vocab.tokenize("Question: ")
    a = generate(m, vocab, prompt, sampling=Sampling(), rng=RngState(1).child("g"), max_new_tokens=10)
    b = generate(m, vocab, prompt, sampling=Sampling(), rng=RngState(1).child("g"), max_new_tokens=10)
    assert a == b


def test_greedy_is_argmax_chain(vocab):
    m = tiny(vocab, seed=9)
    prompt = [vocab.bos_id] + vocab.tokenize("A) ")
    g = generate(m, vocab, prompt, sampling=Sampling(greedy=True), max_new_tokens=6)
    seq = list(prompt)
    for tok in g.tokens:
        assert tok == int(np.argmax(m.forward(np.array([seq])).logits.data[0, -1]))
        seq.append(tok)


def test_generation_length_bound_and_batch_matches_single(vocab):
    m = tiny(vocab, seed=10)
    prompts = [[vocab.bos_id] + vocab.tokenize(t) for t in ("ab", "Question: ", "x")]
    rngs = [RngState(2).child(i) for i in range(3)]
    batch = generate_batch(m, vocab, prompts, None, Sampling(), rngs, max_new_tokens=7)
    for p, g, i in zip(prompts, batch, range(3)):
        assert len(g.tokens) <= 7
        single = generate(m, vocab, p, sampling=Sampling(), rng=RngState(2).child(i), max_new_tokens=7)
        assert single.tokens == g.tokens


def test_constrained_slot(vocab):
    m = tiny(vocab, seed=11)
    prefix = vocab.tokenize("Answer: ")
    g = generate_batch(
        m, vocab, [[vocab.bos_id]], None, Sampling(greedy=True), None, 4,
        forced_prefix=prefix, constrain={len(prefix): vocab.letter_ids},
    )[0]
    assert g.tokens[: len(prefix)] == prefix
    assert g.tokens[len(prefix)] in vocab.letter_ids


def test_sampling_requires_positive_temperature():
    with pytest.raises(ValueError):
        Sampling(temperature=0.0)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def test_checkpoint_bit_exact_roundtrip(tmp_path, vocab):
    m = tiny(vocab, seed=12)
    m.value_head = True
    m.attach_lora(4)
    _randomise_adapters(m, 3)
    save_model(m, tmp_path / "m.mmrl", {"extra.x": np.arange(3.0)})
    m2, rest = load_model(tmp_path / "m.mmrl")
    assert m2.weight_hash() == m.weight_hash()
    assert m2.value_head and set(m2.adapters) == set(m.adapters)
    assert np.array_equal(rest["extra.x"], np.arange(3.0))
    save_model(m2, tmp_path / "m2.mmrl", {"extra.x": np.arange(3.0)})
    assert (tmp_path / "m.mmrl").read_bytes() == (tmp_path / "m2.mmrl").read_bytes()


def test_checkpoint_header_layout(tmp_path):
    save_tensors(tmp_path / "t.mmrl", {"w": np.array([[1.0, 2.0]])})
    raw = (tmp_path / "t.mmrl").read_bytes()
    assert raw[:4] == b"MMRL"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert np.array_equal(load_tensors(tmp_path / "t.mmrl")["w"], [[1.0, 2.0]])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.mmrl"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError):
        load_tensors(p)
    save_tensors(p, {"w": np.ones(4)})
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        load_tensors(p)
