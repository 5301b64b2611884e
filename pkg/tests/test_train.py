import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expandpt import numcore as nc
from expandpt.data import IGNORE_INDEX, SEP, DataError, build_vocab
from expandpt.model import DenseModel, load_checkpoint
from expandpt.numcore import Tensor
from expandpt.synthetic import make_topic_benchmark
from expandpt.train import (ConfigError, FinetuneConfig, TrainConfig, Triple, loss_bottleneck_clm, loss_ext,
                            loss_finetune, loss_infonce, loss_mlm, make_plan, pretrain_losses, read_config_file,
                            read_triples, run_finetune, run_pretraining, total_loss, write_config_file,
                            write_triples)
from gradcheck import check_params

LN_E_OVER_E1 = -math.log(math.e / (math.e + 1))  # 0.31326...

TINY = dict(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_seq_len=24, n_aux_layers=1)


# -- loss oracles -----------------------------------------------------------------

def test_uniform_mlm_is_ln_vocab():
    labels = np.full((2, 5), IGNORE_INDEX)
    labels[0, 1], labels[1, 3] = 3, 6
    assert loss_mlm(Tensor(np.zeros((2, 5, 8))), labels).item() == pytest.approx(math.log(8), abs=1e-6)


def test_mlm_ignores_unmasked_positions(rng):
    logits = rng.standard_normal((2, 5, 8))
    labels = np.full((2, 5), IGNORE_INDEX)
    labels[0, 2], labels[1, 0] = 1, 7
    base = loss_mlm(Tensor(logits), labels).item()
    poked = logits.copy()
    poked[labels == IGNORE_INDEX] += rng.standard_normal((8, 8)) * 10
    assert loss_mlm(Tensor(poked), labels).item() == base


def test_mlm_hand_case(f64, rng):
    logits = rng.standard_normal((1, 3, 4))
    labels = np.array([[IGNORE_INDEX, 2, 0]])
    rows = [(logits[0, 1], 2), (logits[0, 2], 0)]
    expected = np.mean([math.log(np.exp(r).sum()) - r[t] for r, t in rows])
    assert loss_mlm(Tensor(logits), labels).item() == pytest.approx(expected, abs=1e-6)


def test_ext_loss_zero_when_nothing_masked():
    out = loss_ext(Tensor(np.zeros((1, 3, 8))), np.full((1, 3), IGNORE_INDEX))
    assert out.item() == 0.0 and out.empty


def test_clm_cross_oracle(f64, rng):
    logits = rng.standard_normal((2, 4, 9))
    targets = np.array([[5, 6, 7, SEP], [8, SEP, IGNORE_INDEX, IGNORE_INDEX]])
    a = loss_bottleneck_clm(Tensor(logits), targets).item()
    assert a == pytest.approx(loss_mlm(Tensor(logits), targets).item(), abs=1e-12)
    with pytest.raises(ValueError):
        loss_bottleneck_clm(Tensor(logits[:, :3]), targets)


def test_infonce_orthogonal_case():
    v = Tensor(np.eye(2))
    assert loss_infonce(v, v).item() == pytest.approx(LN_E_OVER_E1, abs=1e-6)
    assert loss_infonce(v, v, symmetric=True).item() == pytest.approx(LN_E_OVER_E1, abs=1e-6)


def test_infonce_equal_scores_is_ln_b():
    v = Tensor(np.ones((5, 3)))
    assert loss_infonce(v, v).item() == pytest.approx(math.log(5), abs=1e-6)


def test_infonce_rejects_single_row():
    with pytest.raises(ValueError):
        loss_infonce(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(1, 6), st.integers(0, 2**31))
def test_infonce_permutation_invariant_and_nonnegative(b, d, seed):
    rng = np.random.default_rng(seed)
    p, c = rng.standard_normal((b, d)), rng.standard_normal((b, d))
    perm = rng.permutation(b)
    with nc.precision("float64"):
        base = loss_infonce(Tensor(p), Tensor(c)).item()
        moved = loss_infonce(Tensor(p[perm]), Tensor(c[perm])).item()
    assert base >= 0.0
    assert abs(base - moved) < 1e-6


def test_infonce_shift_invariance(f64, rng):
    # adding a constant to every score == appending a shared unit coordinate to the vectors
    p, c = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    k = 2.5
    p2 = np.hstack([p, np.full((4, 1), k)])
    c2 = np.hstack([c, np.ones((4, 1))])
    assert loss_infonce(Tensor(p2), Tensor(c2)).item() == pytest.approx(loss_infonce(Tensor(p), Tensor(c)).item(),
                                                                         abs=1e-9)


def test_finetune_single_triple():
    q = Tensor([[1.0, 0.0]])
    pos = Tensor([[1.0, 0.0]])
    neg = Tensor([[0.0, 1.0]])
    assert loss_finetune(q, pos, neg, in_batch=False).item() == pytest.approx(LN_E_OVER_E1, abs=1e-6)
    assert loss_finetune(q, pos, neg, in_batch=True).item() == pytest.approx(LN_E_OVER_E1, abs=1e-6)


def test_total_loss_examples():
    assert total_loss("bottleneck", {"enc": 0.5, "dec": 0.7}) == pytest.approx(1.2)
    assert total_loss("contrastive", {"enc": 0.5, "ext": 0.7, "cl": 0.3}) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        total_loss("contrastive", {"enc": 0.5, "cl": 0.3})


# -- pre-training losses on a tiny model --------------------------------------------

def tiny_model(seed=0):
    from expandpt.model import EncoderConfig

    return DenseModel(EncoderConfig(vocab_size=30, **TINY), seed=seed)


def tiny_pairs(rng, b=3):
    return [(list(rng.integers(5, 30, 10)), list(rng.integers(5, 30, 5))) for _ in range(b)]


@pytest.mark.parametrize("paradigm", ["bottleneck", "contrastive"])
def test_total_is_bit_exact_sum_and_gradients_add(paradigm, rng):
    with nc.precision("float64"):
        m = tiny_model()
        cfg = TrainConfig(paradigm=paradigm, batch_size=3, **TINY)
        pairs = tiny_pairs(rng)
        comps = pretrain_losses(m, cfg, pairs, np.random.default_rng(1))
        total = total_loss(paradigm, comps)
        assert total.item() == sum(comps[k].item() for k in comps)  # left-to-right float sum
        total.backward()
        joint = {k: p.grad.copy() for k, p in m.named_parameters().items() if p.grad is not None}
        nc.zero_grads(m.parameters())
        summed = {}
        for name in comps:
            fresh = pretrain_losses(m, cfg, pairs, np.random.default_rng(1))[name]
            fresh.backward()
            for k, p in m.named_parameters().items():
                if p.grad is not None:
                    summed[k] = summed.get(k, 0) + p.grad
            nc.zero_grads(m.parameters())
    assert joint.keys() == summed.keys()
    for k in joint:
        np.testing.assert_allclose(joint[k], summed[k], rtol=1e-10, atol=1e-12)


def component_gradcheck(paradigm, component, seed):
    rng = np.random.default_rng(seed)
    with nc.precision("float64"):
        m = tiny_model(seed)
        cfg = TrainConfig(paradigm=paradigm, batch_size=3, **TINY)
        pairs = tiny_pairs(rng)

        def loss():
            with nc.no_grad():
                return pretrain_losses(m, cfg, pairs, np.random.default_rng(seed))[component].item()

        pretrain_losses(m, cfg, pairs, np.random.default_rng(seed))[component].backward()
        err, name = check_params(loss, m.named_parameters(), rng)
    return err, name


@pytest.mark.parametrize("paradigm, component", [("bottleneck", "enc"), ("bottleneck", "dec"),
                                                 ("contrastive", "ext"), ("contrastive", "cl")])
@pytest.mark.parametrize("seed", range(3))
def test_pretraining_loss_gradients(paradigm, component, seed):
    err, name = component_gradcheck(paradigm, component, seed)
    assert err < 1e-3, name


def test_ext_gradient_reaches_both_paths(f64, rng):
    m = tiny_model()
    ids = rng.integers(5, 30, size=(2, 8))
    out = m.encoder(ids)
    h_cls = out.h_cls.retain_grad()
    tapped = out.hidden_states[m.config.aux_tap_layer].retain_grad()
    labels = np.full((2, 8), IGNORE_INDEX)
    labels[:, 3] = ids[:, 3]
    loss_ext(m.aux(h_cls, tapped), labels).backward()
    assert np.abs(h_cls.grad).max() > 0
    assert np.abs(tapped.grad[:, 1:]).max() > 0


def test_finetune_loss_gradient(f64, rng):
    q = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    pos = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    neg = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    for in_batch in (True, False):
        for t in (q, pos, neg):
            t.zero_grad()
        loss_finetune(q, pos, neg, in_batch=in_batch).backward()

        def f():
            return loss_finetune(Tensor(q.data), Tensor(pos.data), Tensor(neg.data), in_batch=in_batch).item()

        err, _ = check_params(f, {"q": q, "pos": pos, "neg": neg}, rng, n_entries=6)
        assert err < 1e-3


# -- curriculum plan ----------------------------------------------------------------

def test_plan_boundary_and_constant_stage2():
    cfg = TrainConfig(total_steps=100, stage1_fraction=0.75, peak_lr=1e-3)
    plan = make_plan(cfg)
    assert plan.boundary == 75
    assert [plan.stage_at(t) for t in (75, 76)] == [1, 2]
    tail = {plan.lr_at(t) for t in range(76, 101)}
    assert len(tail) == 1 and tail.pop() == pytest.approx(plan.lr_at(75))


def test_plan_fraction_one_never_reaches_stage2():
    plan = make_plan(TrainConfig(total_steps=50, stage1_fraction=1.0))
    assert all(plan.stage_at(t) == 1 for t in range(1, 51))


def test_single_stage_expanded_uses_cosine_throughout():
    cfg = TrainConfig(total_steps=50, stage1_fraction=None, single_stage_context="expanded")
    plan = make_plan(cfg)
    assert plan.boundary == 0 and all(plan.stage_at(t) == 2 for t in range(1, 51))
    assert plan.lr_at(50) == pytest.approx(0.0, abs=1e-15)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(paradigm="autoencoder")
    with pytest.raises(ConfigError):
        TrainConfig(stage1_fraction=1.5)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


def test_config_file_round_trip(tmp_path):
    write_config_file(tmp_path / "c.cfg", {"peak_lr": 1e-3, "paradigm": "bottleneck", "stage1_fraction": None})
    assert read_config_file(tmp_path / "c.cfg") == {"peak_lr": 1e-3, "paradigm": "bottleneck",
                                                    "stage1_fraction": None}


# -- training runs ------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_bench():
    bench = make_topic_benchmark(n_passages=256, n_topics=8, n_queries=16, n_train_queries=64)
    vocab = build_vocab([p.text for p in bench.corpus])
    exps = {p.id: [" ".join(p.text.split()[:4])] for p in bench.corpus}
    return bench, vocab, exps


def small_config(**kw):
    base = dict(batch_size=8, total_steps=30, peak_lr=2e-3, span_min=6, span_max=12, seed=3, **TINY)
    base.update(kw)
    return TrainConfig(**base)


def test_smoke_training_reduces_loss(small_bench):
    bench, vocab, _ = small_bench
    cfg = small_config(total_steps=200, stage1_fraction=None, batch_size=16)
    _, report = run_pretraining(cfg, bench.corpus, vocab)
    tot = report.losses["total"]
    assert np.mean(tot[-10:]) < tot[9]


def test_fraction_one_ignores_expansions(small_bench):
    bench, vocab, _ = small_bench
    _, a = run_pretraining(small_config(total_steps=10, stage1_fraction=1.0), bench.corpus, vocab, None)
    assert set(a.stage) == {1}


def test_stage2_continues_bit_exactly_from_stage1_checkpoint(small_bench, tmp_path):
    bench, vocab, exps = small_bench
    cfg = small_config(stage1_fraction=0.5)
    run_pretraining(cfg, bench.corpus, vocab, exps, out_dir=tmp_path / "full")
    run_pretraining(cfg, bench.corpus, vocab, exps, out_dir=tmp_path / "resumed",
                    resume_from=tmp_path / "full" / "stage1.ckpt")
    assert (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "resumed" / "final.ckpt").read_bytes()
    _, meta, extra = load_checkpoint(tmp_path / "full" / "stage1.ckpt")
    assert meta["step"] == 15 and any(k.startswith("adam.m/") for k in extra)


def test_training_is_deterministic(small_bench):
    bench, vocab, exps = small_bench
    a, ra = run_pretraining(small_config(total_steps=8), bench.corpus, vocab, exps)
    b, rb = run_pretraining(small_config(total_steps=8), bench.corpus, vocab, exps)
    assert ra.losses == rb.losses
    assert all(np.array_equal(a.state_dict()[k], v) for k, v in b.state_dict().items())


def test_bottleneck_run(small_bench):
    bench, vocab, exps = small_bench
    _, rep = run_pretraining(small_config(paradigm="bottleneck", total_steps=6), bench.corpus, vocab, exps)
    assert set(rep.losses) == {"enc", "dec", "total"}
    assert rep.stage == [1, 1, 1, 1, 1, 2]  # boundary = ceil(0.75 * 6)


def test_curriculum_requires_expansions(small_bench):
    bench, vocab, _ = small_bench
    with pytest.raises(ConfigError):
        run_pretraining(small_config(stage1_fraction=0.5), bench.corpus, vocab, None)


# -- fine-tuning --------------------------------------------------------------------

def test_finetune_loss_falls_over_epochs(small_bench):
    bench, vocab, _ = small_bench
    model = DenseModel(small_config().model_config(len(vocab)), seed=0)
    cfg = FinetuneConfig(epochs=4, batch_size=8, lr=1e-3, n_negatives=2, max_passage_len=24)
    _, rep = run_finetune(model, bench.corpus, bench.train_triples, vocab, cfg)
    assert rep.epoch_means[-1] < rep.epoch_means[0]


def test_finetune_reproducible(small_bench):
    bench, vocab, _ = small_bench
    cfg = FinetuneConfig(epochs=1, batch_size=8, lr=1e-3, n_negatives=2, max_passage_len=24)
    runs = [run_finetune(DenseModel(small_config().model_config(len(vocab)), seed=0), bench.corpus,
                         bench.train_triples[:16], vocab, cfg)[1].losses for _ in range(2)]
    assert runs[0] == runs[1]


def test_finetune_rejects_unknown_positive(small_bench):
    bench, vocab, _ = small_bench
    model = DenseModel(small_config().model_config(len(vocab)), seed=0)
    with pytest.raises(DataError):
        run_finetune(model, bench.corpus, [Triple("q", "missing", [])], vocab, FinetuneConfig())


def test_triples_round_trip(tmp_path):
    ts = [Triple("what is x", "p1", ["p2", "p3"]), Triple("y", "p4", [])]
    write_triples(tmp_path / "t.jsonl", ts)
    assert read_triples(tmp_path / "t.jsonl") == ts

