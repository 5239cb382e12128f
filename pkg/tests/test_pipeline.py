import math

import numpy as np
import pytest

from stilts_lab import pipeline as P
from stilts_lab.autodiff import Graph, TrainingAborted
from stilts_lab.datakit import Dataset, Example, TaskSpec, book_corpus, build_vocab
from stilts_lab.encoder import EncoderConfig, EncoderGraph, init_params

from conftest import FAST


def snapshot(params):
    return {k: v.copy() for k, v in params.items()}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_phase_config_defaults_and_validation():
    assert P.PhaseConfig().epochs == 3
    assert P.PhaseConfig().aux_weight == 0.5
    assert P.BERT_STYLE_PHASE.batch_size == 24 and P.BERT_STYLE_PHASE.base_lr == 2e-5
    with pytest.raises(ValueError):
        P.PhaseConfig(objective="task_plus_aux_lm", aux_weight=0.0)
    with pytest.raises(ValueError):
        P.PhaseConfig(objective="translate")
    assert P.PhaseConfig.from_dict(P.PhaseConfig(epochs=5).to_dict()) == P.PhaseConfig(epochs=5)


def test_regime_plan_validation(world):
    inter, target, *_ = world
    with pytest.raises(ValueError, match="no intermediate"):
        P.RegimePlan("baseline", target, inter)
    for regime in ("stilts", "multitask", "multitask_then_target"):
        with pytest.raises(ValueError, match="needs an intermediate"):
            P.RegimePlan(regime, target)
    with pytest.raises(ValueError, match="report the baseline"):
        P.RegimePlan("stilts", target, target)
    assert P.RegimePlan("stilts", target, inter).label == "synth_inter->synth_target"


def test_make_batch_joint_layout(world):
    _, target, vocab, config, _ = world
    ex = target.train[0]
    batch = P.make_batch([ex], vocab, config)
    expect = [vocab.cls_id] + vocab.ids(ex.text_a) + [vocab.sep_id] + vocab.ids(ex.text_b) + [vocab.sep_id]
    assert batch.ids[0].tolist() == expect
    long = Example("x", tuple(["m0"] * 20), tuple(["m1"] * 20), 1)
    assert P.make_batch([long], vocab, config).ids.shape[1] == config.max_len


def test_make_batch_siamese(world):
    _, target, vocab, config, _ = world
    cfg = EncoderConfig(**{**config.to_dict(), "pooling": "siamese_pair"})
    batch = P.make_batch(target.train[:3], vocab, cfg)
    assert batch.ids_b is not None and batch.ids_b[:, 0].tolist() == [vocab.cls_id] * 3
    single = Example("s", ("m0",), None, 0)
    with pytest.raises(ValueError, match="sentence-pair"):
        P.make_batch([single], vocab, cfg)


def test_mask_tokens_uses_mask_token_only(world):
    _, target, vocab, config, _ = world
    ids, mask = P.lm_batch([ex.text_a for ex in target.train[:50]], vocab, config)
    masked, rows, cols = P.mask_tokens(ids, mask, vocab, 0.15, np.random.default_rng(0))
    assert set(np.unique(rows)) == set(range(50))  # at least one per sentence
    assert np.all(masked[rows, cols] == vocab.mask_id)
    keep = np.ones_like(mask)
    keep[rows, cols] = False
    assert np.array_equal(masked[keep], ids[keep])
    assert not np.isin(ids[rows, cols], [vocab.cls_id, vocab.sep_id, vocab.pad_id]).any()
    assert 0.1 < len(rows) / mask.sum() < 0.3


def test_pretrain_zero_epochs_and_determinism(world):
    _, target, vocab, config, _ = world
    corpus = [ex.text_a for ex in target.train[:40]]
    zero = P.PhaseConfig(objective="lm_only", epochs=0, seed=3)
    root = P.phase_stream(zero, 0, P.STREAM_PRETRAIN)
    init_seed = int(root.spawn(1)[0].generate_state(1)[0])
    assert same(P.pretrain_lm(config, vocab, corpus, zero), init_params(config, init_seed))
    one = P.PhaseConfig(objective="lm_only", epochs=1, batch_size=16, seed=3)
    assert same(P.pretrain_lm(config, vocab, corpus, one), P.pretrain_lm(config, vocab, corpus, one))


def test_pretrain_overfits_small_corpus():
    corpus = book_corpus(50, 0)
    vocab = build_vocab([corpus], 200)
    config = EncoderConfig(vocab_size=len(vocab), max_len=20, d_model=32, n_heads=4, n_layers=1,
                           dropout_rate=0.0, objective_style="causal_lm")
    losses = []
    P.pretrain_lm(config, vocab, corpus, P.PhaseConfig(objective="lm_only", epochs=30, batch_size=10,
                                                       base_lr=1e-2, seed=0), history=losses)
    assert len(losses) == 30
    assert losses[-1] < 0.2 * losses[0]


def test_run_phase_fresh_optimizer_and_head(world):
    inter, target, vocab, config, pre = world
    seen = []

    def watch(step, state, head):
        if step == 0:
            seen.append((state.step, max(float(np.abs(m).max()) for m in state.m.values()),
                         max(float(np.abs(v).max()) for v in state.v.values()), head.w.copy()))

    first = P.run_phase(pre, config, vocab, inter.task, inter.train, inter.dev, FAST,
                        np.random.SeedSequence(0, spawn_key=(1,)), on_step=watch)
    second = P.run_phase(first.params, config, vocab, target.task, target.train, target.dev, FAST,
                         np.random.SeedSequence(0, spawn_key=(2,)), old_head=first.head, on_step=watch)
    for step, m, v, _ in seen:
        assert step == 0 and m == 0.0 and v == 0.0
    assert first.start_state == (0, 0.0) and second.start_state == (0, 0.0)
    # the second phase's head is new, not the first phase's trained head
    assert not np.array_equal(seen[1][3], first.head.w)
    assert not np.allclose(seen[1][3], seen[0][3])
    assert first.steps == math.ceil(len(inter.train) / FAST.batch_size)
    assert len(first.dev_trace) == FAST.epochs


def test_run_phase_updates_encoder_without_touching_input(world):
    _, target, vocab, config, pre = world
    before = snapshot(pre)
    res = P.run_phase(pre, config, vocab, target.task, target.train, target.dev, FAST,
                      np.random.SeedSequence(1))
    assert same(pre, before)
    assert all(not np.array_equal(res.params[k], pre[k]) for k in ("tok_emb", "layer0.attn.wq", "ln_f.g"))
    with pytest.raises(ValueError, match="empty"):
        P.run_phase(pre, config, vocab, target.task, [], target.dev, FAST, np.random.SeedSequence(1))


def test_aux_lm_loss_is_weighted_sum(world):
    _, target, vocab, config, pre = world
    batch = P.make_batch(target.train[:8], vocab, config)
    head = P.swap_head(None, target.task, config, 0)
    aux = P.PhaseConfig(objective="task_plus_aux_lm", aux_weight=0.5)
    eg = EncoderGraph(Graph(), pre, config)
    eg.nodes.update({"head.w": eg.g.param("head.w", head.w), "head.b": eg.g.param("head.b", head.b)})
    loss = P.phase_loss(eg, batch, head, "head", aux, vocab, np.random.default_rng(0))
    total, task, lm = (float(eg.g.value(n)) for n in (loss.total, loss.task, loss.lm))
    assert total == pytest.approx(task + 0.5 * lm, abs=1e-12)


def test_regression_task_wiring(world):
    _, _, vocab, config, pre = world
    sts = TaskSpec("sts", "pair", "regression", 1, ("pearson", "spearman"), {"pearson": 0.0, "spearman": 0.0})
    rng = np.random.default_rng(0)
    exs = [Example(f"s{i}", ("m0", "t01", "m1", "t09"), ("m0", "t01"), float(rng.normal())) for i in range(40)]
    res = P.run_phase(pre, config, vocab, sts, exs, exs[:20], FAST, np.random.SeedSequence(2))
    assert res.head.kind == "regression" and res.head.w.shape == (16, 1)
    assert set(res.dev_trace[0]) == {"pearson", "spearman"}


def test_stilts_with_zero_epoch_intermediate_equals_baseline(world):
    inter, target, vocab, config, pre = world
    phases = {"intermediate": P.PhaseConfig(epochs=0), "target": FAST}
    _, final = P.run_stilts(pre, config, vocab, inter, target, phases, seed=4)
    base = P.run_phase(pre, config, vocab, target.task, target.train, target.dev, FAST,
                       P.phase_stream(FAST, 4, P.STREAM_TARGET))
    assert final.dev_trace == base.dev_trace
    assert same(final.params, base.params)


def test_stilts_rejects_same_task(world):
    _, target, vocab, config, pre = world
    with pytest.raises(ValueError, match="report the baseline"):
        P.run_stilts(pre, config, vocab, target, target, {}, seed=0)


def test_stilts_changes_encoder_after_intermediate(world):
    inter, target, vocab, config, pre = world
    mid, _ = P.run_stilts(pre, config, vocab, inter, target, {"intermediate": FAST, "target": FAST}, seed=0)
    assert not same(mid.params, pre)


def test_fixed_seed_intermediate_is_shared(world):
    inter, target, vocab, config, pre = world
    fixed = {"intermediate": P.PhaseConfig(epochs=1, batch_size=16, seed=7), "target": FAST}
    cache = {}
    a, _ = P.run_stilts(pre, config, vocab, inter, target, fixed, seed=0, cache=cache)
    b, _ = P.run_stilts(pre, config, vocab, inter, target, fixed, seed=1, cache=cache)
    assert a is b and len(cache) == 1
    c, _ = P.run_stilts(pre, config, vocab, inter, target, fixed, seed=1)
    assert same(c.params, a.params)
    free = {"intermediate": FAST, "target": FAST}
    d, _ = P.run_stilts(pre, config, vocab, inter, target, free, seed=0, cache=cache)
    e, _ = P.run_stilts(pre, config, vocab, inter, target, free, seed=1, cache=cache)
    assert not same(d.params, e.params) and len(cache) == 1


@pytest.mark.parametrize("sizes,expect", [((300, 100), 0.75), ((200, 200), 0.5)])
def test_proportional_sampling(sizes, expect):
    sched = P.sample_task_schedule(sizes, 10000, np.random.default_rng(0))
    assert abs(np.mean(sched == 0) - expect) < 0.02


def test_sampling_rejects_empty_task():
    with pytest.raises(ValueError):
        P.sample_task_schedule((10, 0), 5, np.random.default_rng(0))


def test_multitask_phase_two_heads(world):
    inter, target, vocab, config, pre = world
    res = P.run_multitask_phase(pre, config, vocab, [(inter.task, inter.train), (target.task, target.train)],
                                1, target.dev, FAST, np.random.SeedSequence(0))
    assert res.steps == math.ceil((len(inter.train) + len(target.train)) / FAST.batch_size)
    assert len(res.dev_trace) == 1 and res.head.n_out == 2


def test_multitask_then_target_adds_a_phase(world):
    inter, target, vocab, config, pre = world
    phases = {"multitask": FAST, "target": FAST}
    mt = P.run_multitask(pre, config, vocab, inter, target, phases, seed=0)
    mtt = P.run_multitask(pre, config, vocab, inter, target, phases, seed=0, then_target=True)
    assert mtt.steps == math.ceil(len(target.train) / FAST.batch_size)
    assert mt.steps != mtt.steps
    assert mtt.start_state == (0, 0.0)


def test_run_regime_resubsamples_per_seed(world):
    _, target, vocab, config, pre = world
    plan = P.RegimePlan("baseline", target, phases={"target": FAST}, train_cap=50)
    a, b = P.target_train(plan, 0), P.target_train(plan, 1)
    assert len(a) == len(b) == 50
    assert {e.guid for e in a} != {e.guid for e in b}
    assert P.target_train(plan, 0) == a
    rec = P.run_regime(plan, pre, config, vocab, seed=0)
    assert rec.train_size == 50 and rec.train_cap == 50
    full = P.RegimePlan("baseline", target, phases={"target": FAST})
    assert len(P.target_train(full, 0)) == len(target.train)


@pytest.mark.parametrize("regime", P.REGIMES)
def test_run_regime_is_deterministic(world, regime):
    inter, target, vocab, config, pre = world
    plan = P.RegimePlan(regime, target, None if regime == "baseline" else inter,
                        {"intermediate": FAST, "target": FAST}, train_cap=40)
    a = P.run_regime(plan, pre, config, vocab, seed=2)
    b = P.run_regime(plan, pre, config, vocab, seed=2)
    a.wall_time = b.wall_time = 0.0
    assert a == b
    assert a.regime == regime and a.target == "synth_target"


def test_aborted_run_counts_as_degenerate(world, monkeypatch):
    _, target, vocab, config, pre = world

    def boom(*args, **kwargs):
        raise TrainingAborted("non-finite loss")

    monkeypatch.setattr(P, "run_phase", boom)
    rec = P.run_regime(P.RegimePlan("baseline", target), pre, config, vocab, seed=0)
    assert rec.aborted and rec.degenerate
    assert rec.primary == target.task.chance_score


def test_run_record_round_trip(world):
    _, target, vocab, config, pre = world
    rec = P.run_regime(P.RegimePlan("baseline", target, phases={"target": FAST}, train_cap=30),
                       pre, config, vocab, seed=0)
    assert P.RunRecord.from_dict(rec.to_dict()) == rec


def test_phase_streams_are_distinct():
    ph = P.PhaseConfig()
    draws = {s: P.phase_stream(ph, 5, s).generate_state(2).tolist()
             for s in (P.STREAM_INTERMEDIATE, P.STREAM_TARGET, P.STREAM_MULTITASK)}
    assert len({tuple(v) for v in draws.values()}) == 3
    fixed = P.PhaseConfig(seed=9)
    assert (P.phase_stream(fixed, 1, 1).generate_state(1) == P.phase_stream(fixed, 2, 1).generate_state(1)).all()


def test_dataset_with_no_dev_evaluates_to_empty(world):
    _, target, vocab, config, pre = world
    ds = Dataset(target.task, train=target.train[:20])
    res = P.run_phase(pre, config, vocab, ds.task, ds.train, ds.dev, FAST, np.random.SeedSequence(0))
    assert res.dev_trace == [{}]
