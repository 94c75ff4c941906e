import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

import vcmr.train as train_mod
from vcmr.augment import AugmentChainConfig
from vcmr.checkpoint import load_checkpoint
from vcmr.corpus import Manifest, TrackRecord
from vcmr.errors import ConfigError, DataError, MissingArtifactError, NumericError
from vcmr.models import SampleCNN, freeze_blocks
from vcmr.train import (
    ALL_BLOCKS,
    RunConfig,
    TrackStore,
    _batches,
    evaluate,
    finetune,
    fixed_pair_loss,
    recalibrate_batchnorm,
    stage1_models,
    load_tagger,
    pretrain_audio,
    pretrain_multimodal,
)

from conftest import TINY

LIGHT_AUG = AugmentChainConfig(pitch_p=0.0, delay_p=0.5, filter_p=0.5, noise_p=0.5)


def cfg(stage, **kw):
    return RunConfig.for_stage(stage, **{**TINY, "batch_size": 4, "epochs": 2, "augment": LIGHT_AUG, **kw})


def tensor_hash(tensors, prefix):
    h = hashlib.sha256()
    for k in sorted(tensors):
        if k.startswith(prefix):
            h.update(k.encode())
            h.update(tensors[k].numpy().tobytes())
    return h.hexdigest()


def block_hashes(state):
    """Hash per encoder block (stem is index -1)."""
    out = {}
    for i in range(-1, 9):
        p = "stem." if i < 0 else f"blocks.{i}."
        out[i] = tensor_hash({k: v for k, v in state.items() if k.startswith(p)}, p)
    return out


@pytest.fixture(scope="module")
def stage1(tiny_corpus, tiny_store, tmp_path_factory):
    out = tmp_path_factory.mktemp("stage1")
    return pretrain_audio(tiny_corpus.manifest, cfg("audio_pretrain"), out_dir=out, store=tiny_store), out


@pytest.fixture(scope="module")
def stage2(tiny_corpus, tiny_store, stage1):
    return pretrain_multimodal(tiny_corpus.manifest, stage1[0].export, cfg("multimodal_pretrain"), store=tiny_store)


class TestRunConfig:
    def test_paper_defaults(self):
        c = RunConfig.for_stage("audio_pretrain")
        assert (c.batch_size, c.epochs, c.learning_rate, c.weight_decay, c.temperature, c.first_kernel) == (64, 50, 1e-3, 1e-6, 0.1, 5)
        assert RunConfig.for_stage("multimodal_pretrain").batch_size == 128
        assert RunConfig.for_stage("multimodal_pretrain").freeze_blocks_n == 4
        assert RunConfig.for_stage("finetune").freeze_blocks_n == ALL_BLOCKS
        assert c.segment_samples == 98415

    def test_round_trip(self):
        c = cfg("multimodal_pretrain")
        assert RunConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    @pytest.mark.parametrize(
        "kw",
        [dict(stage="pretrain"), dict(batch_size=0), dict(learning_rate=0.0), dict(epochs=-1),
         dict(stage="audio_pretrain", freeze_blocks_n=4), dict(stage="finetune", freeze_blocks_n=4)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"stage": "finetune", "lr": 0.1})

    def test_batches(self):
        assert [len(b) for b in _batches(np.arange(10), 4)] == [4, 4, 2]
        assert [len(b) for b in _batches(np.arange(10), 4, drop_last=True)] == [4, 4]
        assert [len(b) for b in _batches(np.arange(3), 4, drop_last=True)] == [3]
        assert [len(b) for b in _batches(np.arange(9), 4)] == [4, 4]


class TestPretrainAudio:
    def test_history_and_artifacts(self, stage1):
        res, out = stage1
        assert [h["epoch"] for h in res.history] == [1, 2]
        assert all(np.isfinite(h["train_loss"]) and np.isfinite(h["valid_loss"]) for h in res.history)
        assert res.checkpoint.meta["discardable"] == ["projector"]
        assert res.export.prefixes() == {"encoder"}
        assert (out / "last.ckpt").exists() and (out / "backbone.ckpt").exists()
        lines = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
        assert {(r["epoch"], r["split"]) for r in lines} == {(1, "train"), (1, "valid"), (2, "train"), (2, "valid")}

    def test_optimizer_settings_in_checkpoint(self, stage1):
        ck = load_checkpoint(stage1[1] / "last.ckpt")
        group = ck.optimizer["param_groups"][0]
        assert group["lr"] == 1e-3 and group["weight_decay"] == 1e-6
        assert ck.config["learning_rate"] == 1e-3 and ck.config["adam_betas"] == [0.9, 0.999]

    def test_export_is_best_epoch(self, stage1):
        res, _ = stage1
        best = min(res.history, key=lambda h: (h["valid_loss"], -h["epoch"]))
        assert res.best_epoch == best["epoch"] == res.export.epoch

    def test_zero_epochs_is_initialisation(self, tiny_corpus, tiny_store):
        res = pretrain_audio(tiny_corpus.manifest, cfg("audio_pretrain", epochs=0), store=tiny_store)
        torch.manual_seed(0)
        ref = SampleCNN(cfg("audio_pretrain").encoder).state_dict()
        for k, v in ref.items():
            assert torch.equal(res.checkpoint.tensors[f"encoder.{k}"], v)
        assert res.history == []

    def test_deterministic(self, tiny_corpus, tiny_store, tmp_path):
        runs = []
        for name in ("a", "b"):
            res = pretrain_audio(tiny_corpus.manifest, cfg("audio_pretrain", epochs=1), out_dir=tmp_path / name, store=tiny_store)
            runs.append(res)
        assert runs[0].history == runs[1].history
        assert (tmp_path / "a/last.ckpt").read_bytes() == (tmp_path / "b/last.ckpt").read_bytes()

    def test_resume_continues_trajectory(self, tiny_corpus, tiny_store, stage1, tmp_path):
        full, out = stage1
        part = pretrain_audio(tiny_corpus.manifest, cfg("audio_pretrain", epochs=1), out_dir=tmp_path / "p", store=tiny_store)
        resumed = pretrain_audio(
            tiny_corpus.manifest, cfg("audio_pretrain"), out_dir=tmp_path / "r",
            resume=load_checkpoint(tmp_path / "p/last.ckpt"), store=tiny_store,
        )
        assert resumed.history == full.history
        assert (tmp_path / "r/last.ckpt").read_bytes() == (out / "last.ckpt").read_bytes()

    def test_empty_train_split(self, tiny_corpus, tiny_store):
        m = Manifest(tiny_corpus.manifest.split("test"))
        with pytest.raises(DataError):
            pretrain_audio(m, cfg("audio_pretrain"), store=tiny_store)

    def test_wrong_stage(self, tiny_corpus):
        with pytest.raises(ConfigError):
            pretrain_audio(tiny_corpus.manifest, cfg("finetune"))

    def test_non_finite_loss_dumps_diagnostic(self, tiny_corpus, tiny_store, tmp_path, monkeypatch):
        monkeypatch.setattr(train_mod, "nt_xent_loss", lambda batch, c: (batch.left.sum() + batch.right.sum()) * float("nan"))
        with pytest.raises(NumericError):
            pretrain_audio(tiny_corpus.manifest, cfg("audio_pretrain"), out_dir=tmp_path, store=tiny_store)
        diag = load_checkpoint(tmp_path / "diagnostic.ckpt")
        assert diag.meta["diagnostic"] == "non-finite loss"


class TestBatchNormRecalibration:
    def test_running_stats_are_exact_batch_averages(self, tiny_corpus, tiny_store):
        c = cfg("audio_pretrain", batch_size=16)
        torch.manual_seed(0)
        enc = SampleCNN(c.encoder)
        ids = [r.track_id for r in tiny_corpus.manifest.split("train")]
        seen = []
        hook = enc.stem[1].register_forward_pre_hook(lambda m, inp: seen.append(inp[0].detach().clone()))
        recalibrate_batchnorm(enc, tiny_store, ids, c)
        hook.remove()
        assert len(seen) == 1
        x = seen[0].transpose(0, 1).reshape(seen[0].shape[1], -1)
        np.testing.assert_allclose(enc.stem[1].running_mean.numpy(), x.mean(1).numpy(), rtol=1e-4, atol=1e-6)
        np.testing.assert_allclose(enc.stem[1].running_var.numpy(), x.var(1, unbiased=True).numpy(), rtol=1e-4, atol=1e-6)
        assert enc.stem[1].momentum == 0.1

    def test_frozen_blocks_untouched_and_deterministic(self, tiny_corpus, tiny_store):
        c = cfg("audio_pretrain")
        ids = [r.track_id for r in tiny_corpus.manifest.split("train")]
        states = []
        for _ in range(2):
            torch.manual_seed(0)
            enc = freeze_blocks(SampleCNN(c.encoder), 4)
            before = block_hashes(enc.state_dict())
            recalibrate_batchnorm(enc, tiny_store, ids, c)
            after = block_hashes(enc.state_dict())
            assert all(after[i] == before[i] for i in range(-1, 4))
            assert all(after[i] != before[i] for i in range(4, 9))
            states.append(after)
        assert states[0] == states[1]

    def test_valid_loss_matches_fixed_pair_loss(self, tiny_corpus, tiny_store, stage1):
        res, _ = stage1
        c = RunConfig.from_dict(res.checkpoint.config)
        valid = [r.track_id for r in tiny_corpus.manifest.split("valid")]
        value = fixed_pair_loss(*stage1_models(res.checkpoint), tiny_store, valid, c)
        assert value == pytest.approx(res.history[-1]["valid_loss"], rel=1e-6)

    def test_disabled(self, tiny_corpus, tiny_store):
        a = pretrain_audio(tiny_corpus.manifest, cfg("audio_pretrain", epochs=1), store=tiny_store).checkpoint
        b = pretrain_audio(tiny_corpus.manifest, cfg("audio_pretrain", epochs=1, bn_recalibration=False), store=tiny_store).checkpoint
        assert torch.equal(a.tensors["encoder.stem.0.weight"], b.tensors["encoder.stem.0.weight"])
        assert not torch.equal(a.tensors["encoder.stem.1.running_mean"], b.tensors["encoder.stem.1.running_mean"])


class TestPretrainMultimodal:
    def test_freezing_contract(self, stage1, stage2):
        before = block_hashes(stage1[0].export.state("encoder"))
        after = block_hashes(stage2.checkpoint.state("encoder"))
        for i in range(-1, 4):
            assert after[i] == before[i], f"block {i + 1} changed"
        assert any(after[i] != before[i] for i in range(4, 9))

    def test_export_only_encoder(self, stage2):
        assert stage2.export.prefixes() == {"encoder"}
        assert stage2.export.stage == "multimodal_pretrain"
        assert stage2.checkpoint.prefixes() >= {"encoder", "video", "audio_projector", "video_projector"}
        assert set(stage2.checkpoint.meta["discardable"]) == {"video", "audio_projector", "video_projector"}

    def test_missing_features_skipped(self, tiny_corpus, stage1, tmp_path):
        import shutil

        cache = tmp_path / "cache"
        shutil.copytree(tiny_corpus.cache_dir, cache)
        victim = tiny_corpus.manifest.split("train")[0].track_id
        (cache / f"{victim}.vseq").unlink()
        store = TrackStore(tiny_corpus.manifest, cache)
        res = pretrain_multimodal(tiny_corpus.manifest, stage1[0].export, cfg("multimodal_pretrain", epochs=1), store=store)
        assert res.checkpoint.meta["skipped"] == [victim]

    def test_too_many_missing(self, tiny_corpus, stage1, tmp_path):
        (tmp_path / "empty").mkdir()
        store = TrackStore(tiny_corpus.manifest, tmp_path / "empty")
        with pytest.raises(DataError):
            pretrain_multimodal(tiny_corpus.manifest, stage1[0].export, cfg("multimodal_pretrain", epochs=1), store=store)

    def test_needs_encoder(self, tiny_corpus, stage1, tiny_store):
        bad = replace(stage1[0].export, tensors={})
        with pytest.raises(MissingArtifactError):
            pretrain_multimodal(tiny_corpus.manifest, bad, cfg("multimodal_pretrain"), store=tiny_store)

    def test_no_cache_configured(self, tiny_corpus, stage1):
        with pytest.raises(MissingArtifactError):
            pretrain_multimodal(tiny_corpus.manifest, stage1[0].export, cfg("multimodal_pretrain"))


class TestFinetune:
    def test_backbone_unchanged_and_metrics(self, tiny_corpus, tiny_store, stage2, tmp_path):
        res = finetune(tiny_corpus.manifest, stage2.export, cfg("finetune", epochs=5), out_dir=tmp_path, store=tiny_store)
        assert tensor_hash(res.checkpoint.tensors, "encoder.") == tensor_hash(stage2.export.tensors, "encoder.")
        assert len(res.history) == 5 and all("valid_roc_auc" in h for h in res.history)
        assert 0 <= res.best_epoch <= 5
        ck = load_checkpoint(tmp_path / "finetuned.ckpt")
        assert ck.meta["tag_vocabulary"] == tiny_corpus.manifest.tag_vocabulary()
        assert ck.meta["backbone_stage"] == "multimodal_pretrain"
        _, head, vocab = load_tagger(ck)
        assert head.cfg.n_tags == len(vocab) == 4

    def test_zero_epochs_is_random_head(self, tiny_corpus, tiny_store, stage2):
        res = finetune(tiny_corpus.manifest, stage2.export, cfg("finetune", epochs=0), store=tiny_store)
        torch.manual_seed(0)
        SampleCNN(cfg("finetune").encoder)  # consumes the same init stream
        from vcmr.models import TagHead, TagHeadConfig

        head = TagHead(TagHeadConfig(hidden_dim=TINY["tag_hidden_dim"], n_tags=4))
        for k, v in head.state_dict().items():
            assert torch.equal(res.checkpoint.tensors[f"head.{k}"], v)
        assert res.best_epoch == 0

    def test_deterministic(self, tiny_corpus, tiny_store, stage2):
        a = finetune(tiny_corpus.manifest, stage2.export, cfg("finetune", epochs=3), store=tiny_store)
        b = finetune(tiny_corpus.manifest, stage2.export, cfg("finetune", epochs=3), store=tiny_store)
        assert a.history == b.history
        assert tensor_hash(a.checkpoint.tensors, "head.") == tensor_hash(b.checkpoint.tensors, "head.")

    def test_unknown_tags(self, tiny_corpus, tiny_store, stage2):
        with pytest.raises(DataError, match="sine"):
            finetune(tiny_corpus.manifest, stage2.export, cfg("finetune"), tag_vocabulary=["saw", "square", "noise"], store=tiny_store)

    def test_untagged_records(self, tiny_store, stage2, tiny_corpus):
        recs = [replace(r, tags=None) if i == 0 else r for i, r in enumerate(tiny_corpus.manifest)]
        with pytest.raises(DataError):
            finetune(Manifest(recs), stage2.export, cfg("finetune"), store=tiny_store)

    def test_stage_order(self, tiny_corpus, tiny_store, stage1, stage2):
        with pytest.raises(ConfigError, match="pretrain-multimodal"):
            finetune(tiny_corpus.manifest, stage1[0].export, cfg("finetune"), store=tiny_store, require_multimodal=True)
        # audio-only fine-tuning path stays available
        res = finetune(tiny_corpus.manifest, stage1[0].export, cfg("finetune", epochs=1), store=tiny_store)
        assert res.checkpoint.meta["backbone_stage"] == "audio_pretrain"

    def test_evaluate(self, tiny_corpus, tiny_store, stage2):
        res = finetune(tiny_corpus.manifest, stage2.export, cfg("finetune", epochs=2), store=tiny_store)
        preds, labels, m = evaluate(tiny_corpus.manifest, res.checkpoint, "test", store=tiny_store)
        assert preds.track_ids == sorted(r.track_id for r in tiny_corpus.manifest.split("test"))
        assert preds.scores.shape == (4, 4) and 0 <= m["roc_auc"] <= 1
        with pytest.raises(MissingArtifactError):
            evaluate(tiny_corpus.manifest, stage2.export, store=tiny_store)
