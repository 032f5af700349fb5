import math

import numpy as np
import pytest

from serialspk import cli
from serialspk import data as D
from serialspk import tensor as tn
from serialspk.model import (Config, ConfigError, build_model, dump_config, load_model, model_state,
                             parameter_counts, parse_config, read_checkpoint, save_model, write_checkpoint)
from serialspk.optim import AdamW, EpochDecay
from serialspk.tensor import Tensor
from serialspk.train import TrainingDiverged, classify_accuracy, extract_embedding, train

TINY = dict(tdnn_channels=12, tdnn_final=16, d=8, d_k=4, d_ff=16, d_emb=8, xvector_dim=8, attn_hidden=6,
            key_dim=6, num_speakers=4, input_dim=5)


class TestConfig:
    def test_parse_and_dump_round_trip(self):
        cfg = parse_config("arch = stat_pool\nlayers = 3\nlr = 0.002\nvad = true  # comment\n")
        assert (cfg.arch, cfg.layers, cfg.lr, cfg.vad) == ("stat_pool", 3, 0.002, True)
        assert parse_config(dump_config(cfg)) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("heads = 4\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config("layers = many\n")

    def test_preset(self):
        cfg = parse_config("preset = paper\nlayers = 4\n")
        assert (cfg.d, cfg.d_k, cfg.d_ff, cfg.layers) == (256, 128, 512, 4)

    def test_invalid_dims(self):
        with pytest.raises(ConfigError):
            Config(d=0)
        with pytest.raises(ConfigError):
            Config(arch="serialized", layers=0)


class TestBuildModel:
    @pytest.mark.parametrize("arch", ["stat_pool", "attentive_stat", "self_attentive", "serialized"])
    def test_logit_shape_and_dtype(self, arch, rng):
        model = build_model(Config(arch=arch, num_speakers=7))
        emb, logits = model.forward(Tensor(rng.normal(size=(2, 200, 26)).astype(np.float32)), training=True)
        assert logits.shape == (2, 7)
        assert emb.shape == (2, model.emb_dim)
        assert logits.dtype == np.float32 and emb.dtype == np.float32

    def test_serialized_layer_delta(self):
        counts = {n: build_model(Config(layers=n, **TINY)).num_parameters() for n in (4, 5)}
        layer = build_model(Config(layers=1, **TINY)).stack.layers[0].num_parameters()
        assert counts[5] - counts[4] == layer

    def test_paper_dims_per_layer(self):
        cfg = parse_config("preset = paper\n")
        counts = parameter_counts(build_model(cfg.replace(num_speakers=10)))
        layer0 = {k.split(".")[-1]: v for k, v in counts.items() if k.startswith("stack.layers.0.")}
        assert layer0 == {"attn_norm": 512, "W_q": 65536, "W_k": 32768, "residual_affine": 65792,
                          "head_affine": 131328, "ffw_norm": 512, "ffw1": 131584, "ffw2": 131328}

    def test_self_attentive_key_transform_size(self):
        # a 500-node key transform on the 512-channel fourth layer, plus a 500-dim query
        cfg = parse_config("preset = paper\narch = self_attentive\nnum_speakers = 10\n")
        counts = parameter_counts(build_model(cfg))
        assert counts["pool.key"] == 512 * 500 + 500
        assert counts["pool"] == 500


class TestOptimizer:
    def test_zero_gradient_step_is_pure_decay(self):
        w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        opt = AdamW([w], lr=0.1, weight_decay=0.05)
        w.grad = np.zeros(3)
        opt.step()
        np.testing.assert_allclose(w.data, np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.05), rtol=1e-15)

    def test_matches_hand_stepped_scalar_adamw(self):
        # minimize sum((w - target)^2) on three parameters
        target = [0.5, -1.0, 2.0]
        w = Tensor(np.array([0.0, 0.3, -0.7]), requires_grad=True)
        opt = AdamW([w], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
        ref = [0.0, 0.3, -0.7]
        m, v = [0.0] * 3, [0.0] * 3
        for t in range(1, 6):
            loss = tn.sum((w - Tensor(np.array(target))) * (w - Tensor(np.array(target))))
            loss.backward()
            opt.step()
            opt.zero_grad()
            for i in range(3):
                g = 2 * (ref[i] - target[i])
                ref[i] = ref[i] * (1 - 0.01 * 0.1)
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                mhat = m[i] / (1 - 0.9 ** t)
                vhat = v[i] / (1 - 0.999 ** t)
                ref[i] -= 0.01 * mhat / (math.sqrt(vhat) + 1e-8)
            np.testing.assert_allclose(w.data, ref, atol=1e-10)

    def test_epoch_decay(self):
        opt = AdamW([Tensor(np.zeros(1), requires_grad=True)], lr=1e-3)
        sched = EpochDecay(opt, 0.6)
        sched.step()
        sched.step()
        assert opt.lr == pytest.approx(1e-3 * 0.36)


class TestTraining:
    def test_initial_loss_is_log_num_speakers(self):
        corpus = D.synth_corpus(4, 3, (30, 40), seed=0, dim=5, heldout_per_speaker=0)
        model = build_model(Config(arch="serialized", epochs=1, batch_size=4, chunk_frames=20, **TINY))
        result = train(model, corpus.utterances, corpus.labels())
        assert result.losses[0] == pytest.approx(math.log(4), abs=1e-6)

    def test_separable_four_speakers(self):
        corpus = D.synth_corpus(4, 10, (60, 80), seed=3, dim=5, heldout_per_speaker=0)
        cfg = Config(arch="stat_pool", epochs=100, batch_size=8, chunk_frames=50, lr=3e-3, lr_decay=1.0,
                     dtype="float64", **TINY)
        model = build_model(cfg)
        result = train(model, corpus.utterances, corpus.labels())
        assert len(result.losses) <= 500
        assert classify_accuracy(model, corpus.utterances, corpus.labels()) > 0.99

    def test_divergence_names_the_step(self):
        corpus = D.synth_corpus(2, 2, (30, 30), seed=0, dim=5, heldout_per_speaker=0)
        corpus.utterances[0].frames[:] = np.nan
        model = build_model(Config(epochs=1, batch_size=4, chunk_frames=20, **{**TINY, "num_speakers": 2}))
        with pytest.raises(TrainingDiverged, match="step 0"):
            train(model, corpus.utterances, corpus.labels())

    def test_label_range_checked(self):
        corpus = D.synth_corpus(2, 1, (30, 30), seed=0, dim=5, heldout_per_speaker=0)
        model = build_model(Config(**TINY))
        with pytest.raises(ValueError):
            train(model, corpus.utterances, [0, 9])

    def test_deterministic_loss_history(self):
        corpus = D.synth_corpus(4, 3, (30, 40), seed=0, dim=5, heldout_per_speaker=0)
        cfg = Config(epochs=2, batch_size=4, chunk_frames=20, **TINY)
        runs = [train(build_model(cfg), corpus.utterances, corpus.labels()).losses for _ in range(2)]
        assert runs[0] == runs[1]


class TestExtraction:
    def test_deterministic_and_dims(self, rng):
        model = build_model(Config(**TINY))
        for T in (50, 200, 1800):
            x = rng.normal(size=(T, 5))
            a, b = extract_embedding(model, x), extract_embedding(model, x)
            assert a.shape == (8,)
            np.testing.assert_array_equal(a, b)

    def test_zero_frames(self):
        with pytest.raises(ValueError):
            extract_embedding(build_model(Config(**TINY)), np.zeros((0, 5)))

    @pytest.mark.parametrize("arch", ["stat_pool", "attentive_stat", "self_attentive", "serialized"])
    def test_doubled_multiset_matches_single_copy(self, arch, rng):
        cfg = Config(arch=arch, contexts="0;0;0;0;0", dtype="float64", **TINY)
        model = build_model(cfg)
        x = rng.normal(size=(30, 5))
        doubled = np.concatenate([x, x[rng.permutation(30)]])
        np.testing.assert_allclose(extract_embedding(model, doubled), extract_embedding(model, x),
                                   rtol=1e-9, atol=1e-12)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        model = build_model(Config(**TINY))
        save_model(tmp_path / "m.bin", model)
        state = read_checkpoint(tmp_path / "m.bin")
        for (name, a), (name2, b) in zip(model_state(model).items(), state.items()):
            assert name == name2 and a.astype(np.float32).tobytes() == b.tobytes()
        write_checkpoint(tmp_path / "m2.bin", state)
        assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()
        reloaded = load_model(tmp_path / "m.bin")
        x = np.random.default_rng(0).normal(size=(40, 5))
        np.testing.assert_array_equal(extract_embedding(reloaded, x), extract_embedding(model, x))

    def test_layout(self, tmp_path):
        from collections import OrderedDict
        write_checkpoint(tmp_path / "c", OrderedDict(w=np.array([[1.0, 2.0]])))
        raw = (tmp_path / "c").read_bytes()
        assert raw[:4] == b"SAEM"
        assert np.frombuffer(raw[4:], "<u4", count=2).tolist() == [1, 1]
        assert raw[12:16] == (1).to_bytes(4, "little") and raw[16:17] == b"w"
        assert np.frombuffer(raw[17:], "<u4", count=3).tolist() == [2, 1, 2]
        assert np.frombuffer(raw[29:], "<f4").tolist() == [1.0, 2.0]

    def test_truncated(self, tmp_path):
        model = build_model(Config(**TINY))
        save_model(tmp_path / "m.bin", model)
        raw = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "bad.bin").write_bytes(raw[:-10])
        with pytest.raises(ValueError, match="truncated"):
            read_checkpoint(tmp_path / "bad.bin")


def test_cli_pipeline(tmp_path, capsys):
    corpus_dir = tmp_path / "corpus"
    assert cli.main(["synth", "--out", str(corpus_dir), "--speakers", "4", "--utts", "3", "--heldout", "2",
                     "--min-frames", "30", "--max-frames", "40", "--dim", "5"]) == 0
    conf = tmp_path / "model.conf.in"
    conf.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items())
                    + f"epochs = 1\nbatch_size = 4\nchunk_frames = 20\nmanifest = {corpus_dir / 'train.manifest'}\n")
    model = tmp_path / "model.bin"
    assert cli.main(["train", "--config", str(conf), "--out", str(model)]) == 0
    assert cli.main(["extract", "--model", str(model), "--manifest", str(corpus_dir / "heldout.manifest"),
                     "--out", str(tmp_path / "emb")]) == 0
    scores = tmp_path / "scores.txt"
    assert cli.main(["score", "--embeddings", str(tmp_path / "emb"), "--trials", str(corpus_dir / "trials.txt"),
                     "--out", str(scores)]) == 0
    lines = scores.read_text().splitlines()
    assert len(lines) == len(D.read_trials(corpus_dir / "trials.txt"))
    assert all(len(l.split()[2].lstrip("-").replace(".", "").lstrip("0")) >= 9 or float(l.split()[2]) == 0
               for l in lines)
    capsys.readouterr()
    assert cli.main(["eval", "--scores", str(scores), "--trials", str(corpus_dir / "trials.txt")]) == 0
    out = capsys.readouterr().out.split()
    assert out[0::2] == ["EER", "DCF0.01", "DCF0.001"]
    assert 0 <= float(out[1]) <= 100


def test_cli_params(capsys):
    assert cli.main(["params", "--preset", "paper"]) == 0
    lines = dict(l.split() for l in capsys.readouterr().out.splitlines())
    assert int(lines["stack.layers.5.W_q"]) == 65536
    assert int(lines["total"]) > int(lines["total_without_output_layer"])


def test_cli_train_speaker_mismatch(tmp_path, capsys):
    cli.main(["synth", "--out", str(tmp_path), "--speakers", "3", "--utts", "1", "--heldout", "0",
              "--min-frames", "10", "--max-frames", "10", "--dim", "5"])
    conf = tmp_path / "c.conf"
    conf.write_text("input_dim = 5\nnum_speakers = 4\n")
    assert cli.main(["train", "--config", str(conf), "--manifest", str(tmp_path / "train.manifest"),
                     "--out", str(tmp_path / "m")]) == 2
