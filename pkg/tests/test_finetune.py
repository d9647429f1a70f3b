import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from ssl_finetune.config import ModelConfig
from ssl_finetune.data import ToyCorpusSpec, generate_toy_corpus
from ssl_finetune.errors import ConfigError, TrainingError
from ssl_finetune.finetune import (
    DEFAULT_LRS,
    Example,
    FreezePolicy,
    RunName,
    ScheduleState,
    SLUHead,
    TaskData,
    UtteranceClassifier,
    apply_freeze_policy,
    batches,
    fit,
    load_finetuned,
    save_finetuned,
    scheduler_step,
)
from ssl_finetune.heads import SemanticAnnotation
from ssl_finetune.model import EncoderParams, SpeechEncoder


def fake_params(n_cnn=100, n_tr=400):
    return EncoderParams(
        {f"cnn.{i}": nn.Parameter(torch.zeros(1)) for i in range(n_cnn)},
        {f"tr.{i}": nn.Parameter(torch.zeros(1)) for i in range(n_tr)},
        {"mask_embedding": nn.Parameter(torch.zeros(1))},
    )


@pytest.fixture(scope="module")
def tiny_task():
    m = generate_toy_corpus(ToyCorpusSpec(num_speakers=2, num_classes=2, utterances_per_cell=3,
                                          duration_range=(0.1, 0.15), seed=0))
    ex = [Example(e.utt_id, m.waveform(e), int(e.emotion[1:])) for e in m]
    return TaskData(ex[::2], ex[1::2])


class TestFreezePolicy:
    @pytest.mark.parametrize("policy,size", [(FreezePolicy.PARTIAL, 400), (FreezePolicy.FROZEN, 0),
                                             (FreezePolicy.ENTIRE, 500)])
    def test_set_sizes(self, policy, size):
        assert len(apply_freeze_policy(fake_params(), policy)) == size

    def test_partial_is_exactly_transformer(self):
        params = fake_params()
        assert set(apply_freeze_policy(params, FreezePolicy.PARTIAL)) == set(params.transformer_params)

    def test_auxiliaries_never_trainable(self):
        params = SpeechEncoder(ModelConfig()).params()
        trainable = apply_freeze_policy(params, FreezePolicy.ENTIRE)
        assert not set(trainable) & set(params.auxiliaries)

    @pytest.mark.parametrize("tag,policy", [("EF", FreezePolicy.ENTIRE), ("pf", FreezePolicy.PARTIAL),
                                            ("Frozen", FreezePolicy.FROZEN)])
    def test_tags(self, tag, policy):
        assert FreezePolicy.from_tag(tag) is policy
        assert FreezePolicy.from_tag(policy.tag) is policy

    def test_unknown_tag(self):
        with pytest.raises(ConfigError):
            FreezePolicy.from_tag("half")


class TestScheduler:
    def start(self, **kw):
        return scheduler_step(ScheduleState(1e-5, 1e-4, **kw), 60.0)

    def test_improvement_keeps_rates(self):
        s = scheduler_step(self.start(), 65.0)
        assert (s.encoder_lr, s.downstream_lr) == (1e-5, 1e-4)
        assert s.best_metric == 65.0

    def test_no_improvement_halves(self):
        s = scheduler_step(self.start(), 60.0)
        assert (s.encoder_lr, s.downstream_lr) == (0.5e-5, 0.5e-4)
        assert s.best_metric == 60.0

    def test_three_non_improving_epochs(self):
        s = self.start()
        for v in (59.0, 60.0, 58.0):
            s = scheduler_step(s, v)
        assert math.isclose(s.encoder_lr, 1.25e-6, rel_tol=1e-12)
        assert math.isclose(s.downstream_lr, 1.25e-5, rel_tol=1e-12)
        assert s.epochs_since_best == 3

    def test_small_gain_is_proportional(self):
        # half the threshold gives a factor halfway between 0.5 and 1
        s = scheduler_step(self.start(), 60.0 * (1 + 0.00125))
        assert math.isclose(s.encoder_lr, 0.75e-5, rel_tol=1e-9)

    def test_lower_is_better(self):
        s = scheduler_step(ScheduleState(1.0, 1.0), 10.0, higher_is_better=False)
        assert scheduler_step(s, 5.0, higher_is_better=False).encoder_lr == 1.0
        assert scheduler_step(s, 12.0, higher_is_better=False).encoder_lr == 0.5

    def test_nan_metric_halts(self):
        with pytest.raises(TrainingError):
            scheduler_step(self.start(), float("nan"))

    @pytest.mark.parametrize("kw", [{"encoder_lr": -1.0}, {"anneal_factor": 0.0}, {"anneal_factor": 1.5}])
    def test_validation(self, kw):
        args = {"encoder_lr": 1e-5, "downstream_lr": 1e-4, **kw}
        with pytest.raises(ConfigError):
            ScheduleState(**args)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=30), st.floats(0.05, 1.0))
    def test_rates_non_increasing_and_bounded(self, metrics, a):
        s = ScheduleState(1e-3, 1e-2, anneal_factor=a)
        for m in metrics:
            nxt = scheduler_step(s, m)
            assert nxt.encoder_lr <= s.encoder_lr
            assert nxt.encoder_lr >= s.encoder_lr * a * (1 - 1e-12)
            assert nxt.encoder_lr / 1e-3 == pytest.approx(nxt.downstream_lr / 1e-2)
            s = nxt

    def test_defaults(self):
        assert DEFAULT_LRS["SER"] == (1e-5, 1e-4)
        assert DEFAULT_LRS["SV"] == (1e-5, 1e-4)
        assert DEFAULT_LRS["SLU"] == (1e-5, 3e-4)


class TestRunName:
    @pytest.mark.parametrize("text", ["EF-w2v-base", "PF-hbt-large-960h", "Frozen-w2v-large", "EF-hbt-toy"])
    def test_round_trip(self, text):
        assert str(RunName.parse(text)) == text

    @pytest.mark.parametrize("text", ["EF-w2v", "XF-w2v-base", "EF-w2v-base-100h", "ef-w2v-base"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            RunName.parse(text)

    def test_parts(self):
        r = RunName.parse("PF-hbt-large-960h")
        assert r.policy is FreezePolicy.PARTIAL
        assert r.model_name == "hbt-large-960h"


class TestBatches:
    def test_bucketed_and_complete(self):
        ex = [Example(str(i), np.zeros(n), 0) for i, n in enumerate([50, 10, 30, 20, 40])]
        out = list(batches(ex, 2))
        assert [[len(e.waveform) for e in b] for b in out] == [[10, 20], [30, 40], [50]]
        shuffled = list(batches(ex, 2, np.random.default_rng(0)))
        assert sorted(e.utt_id for b in shuffled for e in b) == sorted(e.utt_id for e in ex)


class TestFit:
    def run(self, task, policy, lrs=(1e-3, 1e-2), epochs=2, **kw):
        torch.manual_seed(0)
        enc = SpeechEncoder(ModelConfig())
        head = UtteranceClassifier(32, 2)
        return enc, head, fit(enc, head, task, policy, lrs, seed=0, epochs=epochs, track_checksums=True, **kw)

    @pytest.mark.parametrize("policy,fixed", [(FreezePolicy.PARTIAL, ("cnn",)),
                                              (FreezePolicy.FROZEN, ("cnn", "transformer")),
                                              (FreezePolicy.ENTIRE, ())])
    def test_freeze_contract(self, tiny_task, policy, fixed):
        torch.manual_seed(0)
        before = SpeechEncoder(ModelConfig()).checksums()
        enc, _, res = self.run(tiny_task, policy, restore_best=False)
        after = enc.checksums()
        for name in ("cnn", "transformer"):
            assert (after[name] == before[name]) == (name in fixed)
        assert after["auxiliaries"] == before["auxiliaries"]
        for rec in res.history:
            for name in fixed:
                assert rec.checksums[name] == before[name]

    def test_zero_encoder_rate_matches_frozen(self, tiny_task):
        _, _, frozen = self.run(tiny_task, FreezePolicy.FROZEN, restore_best=False)
        _, _, entire = self.run(tiny_task, FreezePolicy.ENTIRE, lrs=(0.0, 1e-2), restore_best=False)
        for a, b in zip(frozen.history, entire.history):
            assert a.checksums == b.checksums

    def test_deterministic(self, tiny_task):
        _, _, a = self.run(tiny_task, FreezePolicy.ENTIRE)
        _, _, b = self.run(tiny_task, FreezePolicy.ENTIRE)
        assert [(r.train_loss, r.val_metric) for r in a.history] == [(r.train_loss, r.val_metric) for r in b.history]

    def test_history_records_rates(self, tiny_task):
        _, _, res = self.run(tiny_task, FreezePolicy.PARTIAL, epochs=3)
        assert len(res.history) == 3
        assert res.history[0].encoder_lr == 1e-3
        assert all(b.encoder_lr <= a.encoder_lr for a, b in zip(res.history, res.history[1:]))
        assert res.best_metric == max(r.val_metric for r in res.history)

    def test_nan_loss_aborts_with_diagnostic(self, tiny_task):
        enc = SpeechEncoder(ModelConfig())
        head = UtteranceClassifier(32, 2)
        with torch.no_grad():
            head.head.linear.weight.fill_(float("nan"))
        with pytest.raises(TrainingError, match=r"epoch 0.*encoder_lr"):
            fit(enc, head, tiny_task, FreezePolicy.ENTIRE, (1e-3, 1e-2), epochs=1)

    def test_requires_grad_restored(self, tiny_task):
        enc, _, _ = self.run(tiny_task, FreezePolicy.FROZEN, epochs=1)
        assert all(p.requires_grad for p in enc.parameters())


class TestCheckpoints:
    def test_classifier_round_trip(self, tmp_path, tiny_task):
        enc, head = SpeechEncoder(ModelConfig()), UtteranceClassifier(32, 2)
        save_finetuned(tmp_path / "c.pt", enc, head, {"task": "SER-SD"})
        enc2, head2, meta = load_finetuned(tmp_path / "c.pt")
        assert meta == {"task": "SER-SD"}
        ex = tiny_task.valid
        assert head.eval().predict(enc.eval(), ex) == head2.predict(enc2, ex)

    def test_slu_round_trip(self, tmp_path):
        enc, head = SpeechEncoder(ModelConfig()), SLUHead(32, max_len=5)
        save_finetuned(tmp_path / "s.pt", enc, head)
        enc2, head2, _ = load_finetuned(tmp_path / "s.pt")
        x = Example("u", np.random.default_rng(0).standard_normal(2000).astype(np.float32),
                    SemanticAnnotation("a", "b"))
        assert head.eval().decode(enc.eval(), [x], beam_width=3) == head2.decode(enc2, [x], beam_width=3)

    def test_rejects_encoder_file(self, tmp_path):
        SpeechEncoder(ModelConfig()).save(tmp_path / "e.pt")
        with pytest.raises(ValueError):
            load_finetuned(tmp_path / "e.pt")
