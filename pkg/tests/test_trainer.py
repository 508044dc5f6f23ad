import math

import numpy as np
import pytest

from headmask.maskgate import MaskLogits, infer_mask
from headmask.tasks import get_task
from headmask.trainer import (Adam, BackboneUnconvergedError, Corpus, MaskTrainConfig, NonFiniteLossError,
                              PretrainConfig, lr_at, pretrain_backbone, temperature_at, train_mask,
                              warmup_cosine)
from headmask.transformer import ModelConfig, ModelWeights


def tiny_model(seed=0):
    cfg = ModelConfig(n_layers=2, n_heads_per_layer=2, d_model=8, d_ffn=16, vocab_size=40, max_seq_len=64,
                      seed=seed)
    return ModelWeights.init(cfg)


def test_temperature_schedule_points():
    cfg = MaskTrainConfig()
    assert temperature_at(0, cfg) == 4.0
    assert temperature_at(1500, cfg) == pytest.approx(2.25, abs=1e-12)
    assert temperature_at(3000, cfg) == 0.5
    assert temperature_at(20000, cfg) == 0.5


def test_lr_schedule_points():
    cfg = MaskTrainConfig()
    assert lr_at(0, cfg) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(3000, cfg) == pytest.approx(1e-2, rel=1e-12)
    assert lr_at(cfg.total_steps, cfg) == pytest.approx(1e-4, rel=1e-12)
    mid = (3000 + 20000) // 2
    assert lr_at(mid, cfg) == pytest.approx(1e-4 + 0.5 * (1e-2 - 1e-4), rel=1e-9)


def test_schedules_continuous_and_monotone():
    cfg = MaskTrainConfig()
    taus = [temperature_at(s, cfg) for s in range(0, 3200)]
    assert all(a >= b for a, b in zip(taus, taus[1:]))
    assert max(abs(a - b) for a, b in zip(taus, taus[1:])) <= 3.5 / 3000 + 1e-12
    lrs = [lr_at(s, cfg) for s in range(cfg.total_steps + 1)]
    assert np.argmax(lrs) == 3000
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) < 1e-5


def test_warmup_cosine_degenerate_spans():
    assert warmup_cosine(5, 0.0, 1.0, 0.1, 5, 5) == 0.1
    assert warmup_cosine(0, 0.2, 1.0, 0.1, 0, 10) == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        MaskTrainConfig(tau_start=0.4, tau_end=0.5)
    with pytest.raises(ValueError):
        MaskTrainConfig(lambda_penalty=-1.0)
    with pytest.raises(ValueError):
        MaskTrainConfig(warmup_steps=10, total_steps=5)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    opt = Adam([p.shape])
    for _ in range(5):
        opt.step([p], [np.zeros(3)], 0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_adam_first_step_moves_by_lr():
    p = np.array([0.0, 0.0])
    Adam([p.shape]).step([p], [np.array([3.0, -0.5])], 0.01)
    np.testing.assert_allclose(p, [-0.01, 0.01], rtol=1e-6)


def _short_cfg(**kw):
    base = dict(total_steps=6, warmup_steps=2, tau_anneal_steps=3, batch_size=4, seed=3)
    base.update(kw)
    return MaskTrainConfig(**base)


def test_zero_step_run_gives_all_ones():
    m = tiny_model()
    logits, recs = train_mask(m, Corpus([get_task("MAJ")], 0, False), _short_cfg(total_steps=0, warmup_steps=0))
    assert recs == []
    assert infer_mask(logits).all()


def test_same_seed_identical_and_weights_frozen():
    m = tiny_model()
    before = {k: v.copy() for k, v in m.arrays().items()}
    corpus = Corpus([get_task("COPY")], 1, False)
    a, _ = train_mask(m, corpus, _short_cfg())
    b, _ = train_mask(m, corpus, _short_cfg())
    assert a.values.tobytes() == b.values.tobytes()
    c, _ = train_mask(m, corpus, _short_cfg(seed=4))
    assert c.values.tobytes() != a.values.tobytes()
    for k, v in m.arrays().items():
        assert v.tobytes() == before[k].tobytes()
        assert m[k].grad is None


def test_penalty_logged_equals_count_times_lambda():
    m = tiny_model()
    _, recs = train_mask(m, Corpus([get_task("MAJ")], 0, False), _short_cfg(lambda_penalty=1e-4))
    assert len(recs) == 6
    for r in recs:
        assert r.penalty == pytest.approx(r.active_head_count * 1e-4, rel=1e-12)
        assert 0 <= r.active_head_count <= 4


def test_penalty_arithmetic_examples():
    assert math.isclose(1600 * 1e-4, 0.16)
    assert math.isclose(640 * 1e-5, 0.0064)


def test_large_penalty_switches_heads_off():
    m = tiny_model()
    cfg = _short_cfg(total_steps=200, warmup_steps=10, tau_anneal_steps=50, lambda_penalty=50.0, lr_peak=0.5,
                     init_mean=0.5)
    logits, recs = train_mask(m, Corpus([get_task("MAJ")], 0, False), cfg)
    assert int(infer_mask(logits).sum()) < 4


def test_non_finite_loss_aborts_with_record():
    m = tiny_model()
    m["ln_f.gain"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        train_mask(m, Corpus([get_task("MAJ")], 0, False), _short_cfg())
    assert err.value.record.step == 0


def test_custom_init_is_used():
    m = tiny_model()
    init = MaskLogits(np.full((2, 2), -3.0))
    logits, _ = train_mask(m, Corpus([get_task("MAJ")], 0, False), _short_cfg(total_steps=0, warmup_steps=0),
                           init=init)
    assert not infer_mask(logits).any()


def test_corpus_batches_deterministic():
    c = Corpus([get_task("COPY"), get_task("REV")], 5, True)
    a, b = c.batch(3, 8), c.batch(3, 8)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(c.batch(4, 8)[0], a[0])


def test_pretrain_unconverged_raises_with_weights():
    cfg = ModelConfig(n_layers=1, n_heads_per_layer=2, d_model=8, d_ffn=16, vocab_size=40, max_seq_len=64)
    pc = PretrainConfig(steps=3, batch_size=4, warmup_steps=1, eval_every=3, eval_examples=4, tasks=["MAJ"],
                        targets={"MAJ": 1.01})
    with pytest.raises(BackboneUnconvergedError) as err:
        pretrain_backbone(cfg, pc)
    assert err.value.weights is not None and "MAJ" in err.value.scores


def test_pretrain_is_deterministic_and_learns():
    cfg = ModelConfig(n_layers=1, n_heads_per_layer=2, d_model=16, d_ffn=32, vocab_size=40, max_seq_len=64)
    pc = PretrainConfig(steps=40, batch_size=8, warmup_steps=5, lr_peak=1e-2, eval_every=40, eval_examples=4,
                        tasks=["MAJ"], targets={"MAJ": 0.0})
    w1, r1 = pretrain_backbone(cfg, pc)
    w2, _ = pretrain_backbone(cfg, pc)
    for k in w1.params:
        assert w1[k].data.tobytes() == w2[k].data.tobytes()
    assert r1[-1].loss < r1[0].loss
