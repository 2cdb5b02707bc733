import math

import numpy as np
import pytest
import torch

from lexbridge.corpus import Document, SynthPairSpec, generate_synthetic_pair, make_retrieval_pairs
from lexbridge.errors import ConfigError, NumericalError
from lexbridge.model import IGNORE_INDEX, EncoderConfig, init_random
from lexbridge.tokenizer import MASK_ID, N_SPECIAL, encode, train_vocab
from lexbridge.training import (
    FULL_SCALE_DPR,
    FULL_SCALE_MLM,
    FULL_SCALE_MLM_FROM_SCRATCH,
    DprTrainConfig,
    MlmTrainConfig,
    collate,
    dpr_loss,
    dpr_train,
    encode_texts,
    evaluate_mlm_loss,
    load_config,
    mlm_train,
    sample_masking,
)

SENTENCES = [
    "ala ma kota", "kot ma ale", "pies je kosc", "ryba plywa w wodzie", "ptak lata wysoko",
    "dom stoi na gorze", "rzeka plynie do morza", "slonce swieci jasno", "ksiezyc jest blady",
    "drzewo rosnie w lesie", "kwiat pachnie ladnie", "dziecko sie smieje", "auto jedzie szybko",
    "pociag stoi na stacji", "woda jest zimna", "ogien jest goracy", "chleb jest swiezy",
    "mleko jest biale", "trawa jest zielona", "niebo jest niebieskie",
]


@pytest.fixture(scope="module")
def corpus():
    return [Document(f"d{i}", "", s) for i, s in enumerate(SENTENCES)]


@pytest.fixture(scope="module")
def vocab(corpus):
    return train_vocab(corpus, 200)


def small_model(vocab, seed=0):
    cfg = EncoderConfig(vocab_size=len(vocab), n_layers=2, n_heads=2, d_model=32, d_ff=64, max_seq_len=16, dropout=0.0)
    return init_random(cfg, seed)


def test_config_presets():
    assert (FULL_SCALE_MLM.epochs, FULL_SCALE_MLM.batch_size, FULL_SCALE_MLM.learning_rate) == (150, 720, 5e-4)
    assert FULL_SCALE_MLM_FROM_SCRATCH.batch_size == 240
    assert (FULL_SCALE_DPR.steps, FULL_SCALE_DPR.batch_size, FULL_SCALE_DPR.learning_rate) == (1250, 1024, 2e-5)
    cfg = MlmTrainConfig()
    assert (cfg.mask_rate, cfg.mask_fraction, cfg.keep_fraction, cfg.random_fraction) == (0.15, 0.8, 0.1, 0.1)


@pytest.mark.parametrize("changes", [dict(mask_rate=1.0), dict(mask_fraction=0.5), dict(batch_size=0),
                                     dict(learning_rate=-1.0), dict(warmup_fraction=2.0)])
def test_invalid_mlm_config(changes):
    with pytest.raises(ConfigError):
        MlmTrainConfig(**changes).validate()


def test_load_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"epochs": 3, "batch_size": 4}')
    cfg = load_config(MlmTrainConfig, path, learning_rate=0.1, seed=None)
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.seed) == (3, 4, 0.1, 0)
    path.write_text('{"epoch": 3}')
    with pytest.raises(ConfigError):
        load_config(MlmTrainConfig, path)


def test_masking_selection_rate_and_split():
    rng = np.random.default_rng(0)
    cfg = MlmTrainConfig()
    vocab_size = 50
    ids = np.concatenate([[2], np.arange(5, 67) % 45 + 5, [3]])
    assert len(ids) == 64
    n_draws = 100_000 // 62 + 1
    selected = masked = kept = randomized = 0
    for _ in range(n_draws):
        out, labels = sample_masking(ids, [], cfg, rng, vocab_size)
        sel = labels != IGNORE_INDEX
        assert not sel[0] and not sel[-1]
        assert (labels[sel] == ids[sel]).all()
        selected += sel.sum()
        masked += (out[sel] == MASK_ID).sum()
        kept += (out[sel] == ids[sel]).sum()
        randomized += ((out[sel] != MASK_ID) & (out[sel] != ids[sel])).sum()
        assert (out[sel] >= N_SPECIAL).sum() + (out[sel] == MASK_ID).sum() == sel.sum()
    total = n_draws * 62
    assert abs(selected / total - 0.15) < 0.01
    assert abs(masked / selected - 0.8) < 0.01
    # a random replacement can coincide with the original id
    assert abs((kept + randomized) / selected - 0.2) < 0.01


def test_masking_never_selects_specials():
    rng = np.random.default_rng(1)
    ids = [2, 6, 0, 7, 1, 8, 4, 3]
    for _ in range(2000):
        out, labels = sample_masking(ids, [], MlmTrainConfig(mask_rate=0.9), rng, 20)
        for pos in (0, 2, 4, 6, 7):
            assert labels[pos] == IGNORE_INDEX and out[pos] == ids[pos]


def test_masking_deterministic():
    ids = list(range(2, 40))
    a = sample_masking(ids, [], MlmTrainConfig(), np.random.default_rng(7), 40)
    b = sample_masking(ids, [], MlmTrainConfig(), np.random.default_rng(7), 40)
    assert all((x == y).all() for x, y in zip(a, b))


def test_zero_mask_rate_forces_one_selection():
    out, labels = sample_masking([2, 10, 11, 12, 3], [], MlmTrainConfig(mask_rate=0.0), np.random.default_rng(0), 20)
    assert (labels != IGNORE_INDEX).sum() == 1


def test_whole_word_masking(vocab):
    tok = encode(vocab, "ala ma kota pies")
    ids = (2,) + tok.token_ids + (3,)
    spans = [(s + 1, c) for s, c in tok.word_spans]
    rng = np.random.default_rng(0)
    for _ in range(200):
        _, labels = sample_masking(ids, spans, MlmTrainConfig(whole_word=True), rng, len(vocab))
        for s, c in spans:
            picked = labels[s : s + c] != IGNORE_INDEX
            assert picked.all() or not picked.any()


def test_only_specials_gives_no_labels():
    out, labels = sample_masking([2, 3], [], MlmTrainConfig(), np.random.default_rng(0), 20)
    assert (labels == IGNORE_INDEX).all() and out.tolist() == [2, 3]


def test_collate_pads():
    batch = collate([([2, 9, 3], None), ([2, 3], [IGNORE_INDEX, 3])])
    assert batch.input_ids.tolist() == [[2, 9, 3], [2, 3, 0]]
    assert batch.attention_mask.tolist() == [[True] * 3, [True, True, False]]
    assert batch.labels.tolist() == [[-100] * 3, [-100, 3, -100]]


def test_overfit_halves_loss(corpus, vocab):
    model = small_model(vocab)
    cfg = MlmTrainConfig(epochs=200, batch_size=32, learning_rate=3e-3, seed=0)
    _, trace = mlm_train(model, corpus, vocab, cfg)
    assert len(trace.steps) == 200
    assert all(math.isfinite(loss) for _, _, loss in trace.steps)
    first = np.mean([l for _, _, l in trace.steps[:5]])
    last = np.mean([l for _, _, l in trace.steps[-5:]])
    assert last < 0.5 * first


def test_training_is_deterministic(corpus, vocab):
    cfg = MlmTrainConfig(epochs=3, batch_size=8, learning_rate=1e-3, seed=4)
    a, ta = mlm_train(small_model(vocab), corpus, vocab, cfg)
    b, tb = mlm_train(small_model(vocab), corpus, vocab, cfg)
    assert ta.steps == tb.steps and ta.epoch_losses == tb.epoch_losses
    for x, y in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(x, y)


def test_zero_learning_rate_is_a_no_op(corpus, vocab):
    model = small_model(vocab)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    mlm_train(model, corpus, vocab, MlmTrainConfig(epochs=2, batch_size=8, learning_rate=0.0))
    for name, value in model.state_dict().items():
        assert value.numpy().tobytes() == before[name].numpy().tobytes(), name


def test_max_steps_and_trace_csv(tmp_path, corpus, vocab):
    _, trace = mlm_train(small_model(vocab), corpus, vocab, MlmTrainConfig(epochs=10, batch_size=8, max_steps=4))
    assert [s for s, _, _ in trace.steps] == [0, 1, 2, 3]
    assert len(trace.epoch_losses) == 2
    trace.save_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,loss" and len(lines) == 5


def test_vocab_mismatch_rejected(corpus, vocab):
    cfg = EncoderConfig(vocab_size=len(vocab) + 1, n_layers=1, n_heads=1, d_model=8, d_ff=8, max_seq_len=16)
    with pytest.raises(ConfigError):
        mlm_train(init_random(cfg, 0), corpus, vocab, MlmTrainConfig(epochs=1))


def test_nan_aborts_training(corpus, vocab):
    model = small_model(vocab)
    with torch.no_grad():
        model.head_dense.weight[0, 0] = float("nan")
    with pytest.raises(NumericalError, match="step 0"):
        mlm_train(model, corpus, vocab, MlmTrainConfig(epochs=1))


def test_evaluate_mlm_loss_is_pure(corpus, vocab):
    model = small_model(vocab)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    a = evaluate_mlm_loss(model, corpus, vocab, seed=3)
    assert a == evaluate_mlm_loss(model, corpus, vocab, seed=3)
    assert all(torch.equal(v, before[k]) for k, v in model.state_dict().items())
    # near-uniform predictions at initialization
    assert abs(a - math.log(len(vocab))) < 0.5


def test_dpr_loss_two_class_closed_form():
    for g in (0.0, 0.7, 3.0, -1.5):
        q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        p = torch.tensor([[g, 0.0], [0.0, g]], dtype=torch.float64)
        # each query scores g on its gold passage and 0 on the other
        assert dpr_loss(q, p).item() == pytest.approx(math.log1p(math.exp(-g)), abs=1e-12)


def test_dpr_config_errors(vocab):
    with pytest.raises(ConfigError):
        DprTrainConfig(batch_size=1).validate()
    enc = small_model(vocab)
    with pytest.raises(ConfigError):
        dpr_train(enc, small_model(vocab, 1), [("a", "b")], DprTrainConfig(), vocab)


def test_dpr_zero_steps_unchanged(vocab):
    q, p = small_model(vocab, 0), small_model(vocab, 1)
    before = [{k: v.clone() for k, v in m.state_dict().items()} for m in (q, p)]
    _, _, losses = dpr_train(q, p, [("ala ma", "ala ma kota"), ("pies", "pies je")], DprTrainConfig(steps=0), vocab)
    assert losses == []
    for m, snap in zip((q, p), before):
        assert all(torch.equal(v, snap[k]) for k, v in m.state_dict().items())


def _mean_gold_rank(q_enc, p_enc, vocab, pairs):
    with torch.no_grad():
        q_enc.eval(), p_enc.eval()
        qv = encode_texts(q_enc, vocab, [q for q, _ in pairs])
        pv = encode_texts(p_enc, vocab, [p for _, p in pairs])
    scores = qv @ pv.T
    gold = scores.diagonal()[:, None]
    return float((scores > gold).sum(1).double().mean() + 1)


def test_dpr_training_improves_gold_rank():
    pair = generate_synthetic_pair(SynthPairSpec(n_word_types=150, n_docs=64, mapping_seed=2))
    passages = pair.source
    vocab = train_vocab(passages, 300)
    texts = {p.id: p.text for p in passages}
    pairs = [(q, texts[pid]) for q, pid in make_retrieval_pairs(passages, 64, seed=0)]
    cfg = EncoderConfig(vocab_size=len(vocab), n_layers=1, n_heads=2, d_model=32, d_ff=64, max_seq_len=32, dropout=0.0)
    q_enc, p_enc = init_random(cfg, 0), init_random(cfg, 1)
    before = _mean_gold_rank(q_enc, p_enc, vocab, pairs)
    _, _, losses = dpr_train(q_enc, p_enc, pairs, DprTrainConfig(steps=150, batch_size=16, learning_rate=1e-3), vocab)
    after = _mean_gold_rank(q_enc, p_enc, vocab, pairs)
    assert all(math.isfinite(l) for l in losses)
    assert after < before
