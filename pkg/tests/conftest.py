"""Shared corpora and trained checkpoints (session-scoped; trained once).

The desk-scale configuration used everywhere: d_m=64, 4 speakers,
32 utterances/clips, seed 0, stage I 50 epochs x batch 8 over 32 items
(= 200 optimizer steps), stage II 150 epochs (= 600 steps).
"""

import time

import pytest

from produb import augment, corpus, training
from produb.config import TrainConfig

SEED = 0
D_M = 64
PRETRAIN_EPOCHS = 50   # 200 steps at batch 8 over 32 utterances
ADAPT_EPOCHS = 150     # 600 steps
# enhancement ratio scaled up from the 3% production default so the
# 32-utterance desk corpus actually contains enhanced variants per speaker
ENHANCEMENT_RATIO = 0.25


@pytest.fixture(scope="session")
def speech_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("speech_corpus")
    return corpus.generate_speech_corpus(4, 32, seed=SEED, out_dir=out)


@pytest.fixture(scope="session")
def speech_records(speech_manifest):
    return list(corpus.ingest_manifest(speech_manifest))


@pytest.fixture(scope="session")
def enhanced_speech_records(speech_records):
    policy = augment.EnhancementPolicy(ratio=ENHANCEMENT_RATIO, seed=SEED)
    return augment.apply_policy(speech_records, policy)


@pytest.fixture(scope="session")
def dub_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("dub_corpus")
    return corpus.generate_dub_corpus(4, 32, seed=SEED, out_dir=out, d_m=D_M)


@pytest.fixture(scope="session")
def dub_records(dub_manifest):
    return list(corpus.ingest_manifest(dub_manifest))


@pytest.fixture(scope="session")
def stage1_result(enhanced_speech_records):
    cfg = TrainConfig(stage="pretrain", epochs=PRETRAIN_EPOCHS, seed=SEED,
                      batch_size=8, d_m=D_M)
    t0 = time.perf_counter()
    ckpt = training.pretrain(enhanced_speech_records, cfg)
    return {"checkpoint": ckpt, "elapsed": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def stage2_result(dub_records, stage1_result):
    cfg = TrainConfig(stage="adapt", epochs=ADAPT_EPOCHS, seed=SEED,
                      batch_size=8, d_m=D_M)
    t0 = time.perf_counter()
    ckpt = training.adapt(dub_records, stage1_result["checkpoint"], cfg)
    return {"checkpoint": ckpt, "elapsed": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def dubbing_model(stage2_result):
    return stage2_result["checkpoint"].build_model()
