import itertools
import math

import numpy as np
import pytest

from audiotext.captioner import (BOS_ID, EOS_ID, CaptionData, CaptionerConfig, CaptionModel, CaptionTrainConfig,
                                 beam_search, beam_search_many, caption_loss, decode_step, evaluate_ce,
                                 generate_captions, greedy_decode, load_captioner, save_captioner,
                                 teacher_forcing_batch, train_captioner, warmup_exp_decay)
from audiotext.checkpoint import state_hash
from audiotext.errors import CheckpointError, ConfigError, DegenerateInputError

TAGS = ["dog_bark", "siren", "rain"]
TINY = dict(mel_bins=8, time_pool=1, gru_hidden=6, gru_layers=1, width=8, decoder_layers=1, heads=2, ff=16,
            max_len=8)


def tiny(use_tags=True, seed=0, vocab=12):
    return CaptionModel(CaptionerConfig(**TINY, use_tags=use_tags), vocab, TAGS, seed=seed)


def clips(n, T=6, seed=0):
    return np.random.default_rng(seed).normal(size=(n, T, 8))


# -- tag fusion --------------------------------------------------------------------------

def test_single_tag_fusion_is_its_embedding():
    m = tiny()
    assert np.array_equal(m.fuse_tags([["siren"]]).data[0], m.tag_emb.weight.data[1])


def test_two_tags_average_and_order_free():
    m = tiny()
    u, v = m.tag_emb.weight.data[0], m.tag_emb.weight.data[2]
    a = m.fuse_tags([["dog_bark", "rain"]]).data[0]
    b = m.fuse_tags([["rain", "dog_bark"]]).data[0]
    assert np.allclose(a, (u + v) / 2, atol=1e-15) and np.array_equal(a, b)


def test_fusion_errors():
    m = tiny()
    with pytest.raises(DegenerateInputError):
        m.fuse_tags([[]])
    with pytest.raises(KeyError):
        m.fuse_tags([["thunder"]])
    assert tiny(use_tags=False).fuse_tags([["siren"]]) is None


def test_zero_tag_table_equals_tag_free_model():
    with_tags, without = tiny(True), tiny(False)
    with_tags.tag_emb.weight.data[...] = 0.0
    x = clips(3)
    prefixes = np.array([[BOS_ID, 4, 5]] * 3)
    tags = [["siren"], ["rain", "siren"], ["dog_bark"]]
    p1 = decode_step(with_tags, with_tags.encode(x), prefixes, with_tags.fuse_tags(tags))
    p0 = decode_step(without, without.encode(x), prefixes, without.fuse_tags(tags))
    assert np.array_equal(p1, p0)


def test_step_probabilities_sum_to_one():
    m = tiny()
    p = decode_step(m, m.encode(clips(2)), np.array([[BOS_ID, 3], [BOS_ID, 7]]), m.fuse_tags([["rain"]] * 2))
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9)


def test_tags_outside_clip_do_not_matter():
    m = tiny()
    x = clips(1)
    prefixes = np.array([[BOS_ID, 4]])
    before = decode_step(m, m.encode(x), prefixes, m.fuse_tags([["siren"]]))
    m.tag_emb.weight.data[0] += 5.0       # dog_bark row, not in the clip's set
    after = decode_step(m, m.encode(x), prefixes, m.fuse_tags([["siren"]]))
    assert np.array_equal(before, after)


def test_decode_step_rejects_bad_prefixes():
    m = tiny()
    mem, e_g = m.encode(clips(1)), m.fuse_tags([["rain"]])
    with pytest.raises(ConfigError):
        decode_step(m, mem, np.array([[4, 5]]), e_g)
    with pytest.raises(ConfigError):
        decode_step(m, mem, np.array([[BOS_ID, 0]]), e_g)


def test_tag_free_model_does_not_train_tag_table():
    names = [n for n, _ in tiny(False).trainable()]
    assert not any(n.startswith("tag_emb") for n in names)
    assert any(n.startswith("tag_emb") for n, _ in tiny(True).trainable())


# -- training ----------------------------------------------------------------------------

def test_teacher_forcing_layout():
    inputs, targets = teacher_forcing_batch([[5, 6], [7]], max_len=8)
    assert inputs.tolist() == [[BOS_ID, 5, 6], [BOS_ID, 7, 0]]
    assert targets.tolist() == [[5, 6, EOS_ID], [7, EOS_ID, 0]]


def test_schedule_endpoints():
    assert warmup_exp_decay(0, 100, 10, 1e-3, 1e-6) == pytest.approx(1e-4)
    assert warmup_exp_decay(10, 100, 10, 1e-3, 1e-6) == pytest.approx(1e-3)
    assert warmup_exp_decay(100, 100, 10, 1e-3, 1e-6) == pytest.approx(1e-6)


def test_reference_profile_defaults():
    cfg = CaptionTrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.max_lr, cfg.min_lr) == (25, 64, 5e-4, 5e-7)


def _overfit_data():
    rng = np.random.default_rng(1)
    toks = [list(rng.integers(3, 12, size=rng.integers(2, 5))) for _ in range(8)]
    return CaptionData(clips(8, seed=1), toks, [tuple(rng.choice(TAGS, 1)) for _ in range(8)])


def test_same_seed_same_loss_trace():
    data = _overfit_data()
    cfg = CaptionTrainConfig(epochs=3, batch_size=4, max_lr=1e-2, min_lr=1e-3, seed=2)
    traces = [train_captioner(tiny(seed=5), data, data, cfg).losses for _ in range(2)]
    assert traces[0] == traces[1]


def test_single_batch_overfit():
    data = _overfit_data()
    m = tiny(seed=1)
    cfg = CaptionTrainConfig(epochs=500, batch_size=8, max_lr=5e-3, min_lr=5e-3, warmup_iters=1, seed=0)
    res = train_captioner(m, data, None, cfg)
    assert evaluate_ce(m, data) < 0.1
    ups = sum(b > a for a, b in zip(res.losses, res.losses[1:]))
    assert ups <= 0.05 * len(res.losses)


def test_captioner_checkpoint_round_trip(tmp_path):
    m = tiny(seed=4)
    m.set_feature_stats(clips(4))
    path = tmp_path / "cap.ckpt"
    save_captioner(m, path)
    loaded = load_captioner(path)
    assert state_hash(loaded) == state_hash(m) and loaded.tag_names == m.tag_names
    data = _overfit_data()
    assert caption_loss(loaded, data.frames, data.tokens, data.tags).item() == \
        caption_loss(m, data.frames, data.tokens, data.tags).item()


def test_captioner_loader_rejects_biencoder(tmp_path):
    from audiotext.contrastive import save_checkpoint
    from audiotext.encoders import BiEncoder, BiEncoderConfig
    path = tmp_path / "b.ckpt"
    save_checkpoint(BiEncoder(BiEncoderConfig(mel_bins=8, conv_channels=(2, 2), embed_dim=4, vocab_size=8,
                                              text_width=4, text_layers=1, text_heads=1, text_ff=4)), path)
    with pytest.raises(CheckpointError):
        load_captioner(path)


# -- beam search -------------------------------------------------------------------------

def table_stub(table, V):
    """Step function over a dict prefix-tuple -> probability vector; unlisted prefixes are uniform."""
    def step(prefixes):
        return np.log(np.array([table.get(tuple(p[1:]), np.full(V, 1 / V)) for p in prefixes]))
    return step


EOS, A, B = 0, 1, 2
EXAMPLE = {(): [0.0, 0.6, 0.4], (A,): [0.5, 0.25, 0.25], (B,): [0.9, 0.05, 0.05]}


def test_greedy_and_beam_disagree_on_worked_example():
    step = table_stub({k: np.array(v) for k, v in EXAMPLE.items()}, 3)
    with np.errstate(divide="ignore"):
        g = greedy_decode(step, max_len=2, bos=3, eos=EOS)
        b = beam_search(step, 2, max_len=2, bos=3, eos=EOS)
    assert g.tokens == [A, EOS] and math.exp(g.score) == pytest.approx(0.30)
    assert b.tokens == [B, EOS] and math.exp(b.score) == pytest.approx(0.36)


def random_stub(seed, V, alpha):
    def step(prefixes):
        return np.log(np.array([np.random.default_rng([seed, *map(int, p)]).dirichlet(np.full(V, alpha))
                                for p in prefixes]))
    return step


def brute_force(step, V, max_len, eos=0):
    """Highest-scoring sequence among all <EOS>-terminated ones and all max_len-long ones."""
    best = (-np.inf, None)
    for n in range(1, max_len + 1):
        for body in itertools.product(range(1, V), repeat=n - 1):
            for last in range(V):
                seq = list(body) + [last]
                if last != eos and n < max_len:
                    continue
                score = sum(step(np.array([[V] + seq[:k]]))[0, seq[k]] for k in range(n))
                best = max(best, (score, seq), key=lambda b: b[0])
    return best


def stub_params(seed):
    rng = np.random.default_rng(seed + 10_000)
    return int(rng.integers(2, 6)), int(rng.integers(2, 5)), float(rng.choice([0.3, 1.0, 3.0]))


@pytest.mark.parametrize("seed", range(20))
def test_full_width_beam_matches_brute_force(seed):
    V, L, alpha = stub_params(seed)
    step = random_stub(seed, V, alpha)
    score, seq = brute_force(step, V, L)
    h = beam_search(step, V ** L, max_len=L, bos=V, eos=0)
    assert h.tokens == seq and h.score == pytest.approx(score, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_width_one_is_greedy(seed):
    V, L, alpha = stub_params(seed)
    step = random_stub(seed, V, alpha)
    g, b = greedy_decode(step, L, bos=V, eos=0), beam_search(step, 1, L, bos=V, eos=0)
    assert g.tokens == b.tokens and g.score == pytest.approx(b.score, abs=1e-12)


def test_forced_finish_at_max_len():
    V = 3
    step = table_stub({(): np.array([0.1, 0.9, 0.0]), (1,): np.array([0.1, 0.9, 0.0])}, V)
    with np.errstate(divide="ignore"):
        h = beam_search(step, 2, max_len=2, bos=V, eos=0)
    assert h.forced and h.tokens == [1, 1]


def test_batched_beam_equals_individual():
    steps = [random_stub(s, 4, 1.0) for s in range(3)]

    def many(items, prefixes):
        return np.concatenate([steps[i](p[None]) for i, p in zip(items, prefixes)])
    together = beam_search_many(many, 3, 2, max_len=3, bos=4, eos=0)
    alone = [beam_search(s, 2, max_len=3, bos=4, eos=0) for s in steps]
    assert [h.tokens for h in together] == [h.tokens for h in alone]


def test_beam_argument_validation():
    with pytest.raises(ConfigError):
        beam_search(random_stub(0, 3, 1.0), 0, 3)


def test_generate_captions_on_model():
    m = tiny()
    hyps = generate_captions(m, clips(3), [["siren"], ["rain"], ["siren", "rain"]], beam_size=2, max_len=5)
    assert len(hyps) == 3
    assert all(h.finished and (h.tokens[-1] == EOS_ID or h.forced) for h in hyps)
    assert all(len(h.tokens) <= 5 for h in hyps)
