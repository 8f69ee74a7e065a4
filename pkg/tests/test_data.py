import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesturesynth import autodiff as ad
from gesturesynth.autodiff import Tensor
from gesturesynth.config import CorpusConfig
from gesturesynth.data import (
    Corpus,
    CorpusFormatError,
    GestureClip,
    Skeleton,
    abs_to_rel,
    arm_joint_indices,
    clip_fragments,
    corpus_stats,
    filter_sot,
    format_stats_table,
    generate_corpus,
    load_corpus,
    rel_to_abs,
    rel_to_abs_tensor,
    save_corpus,
    skeleton_preset,
)


class TestSkeleton:
    def test_presets(self):
        desk = skeleton_preset("desk11")
        assert desk.joint_count == 11
        full = skeleton_preset("full59")
        assert full.joint_count == 59
        with pytest.raises(ValueError):
            skeleton_preset("nope")

    def test_cycle_rejected(self):
        with pytest.raises(ValueError, match="cyclic"):
            Skeleton([0, 2, 1])

    def test_root_must_be_self_parent(self):
        with pytest.raises(ValueError):
            Skeleton([1, 0, 0])

    def test_arm_indices(self):
        desk = skeleton_preset("desk11")
        left, right = arm_joint_indices(desk)
        assert len(left) == len(right) == 4
        assert all("left" in desk.names[i] for i in left)


class TestKinematics:
    def test_zero_offsets_stay_at_origin(self):
        skel = skeleton_preset("desk11")
        rel = np.zeros((2, 11, 3))
        np.testing.assert_array_equal(rel_to_abs(skel, rel), rel)

    def test_chain_hand_computed(self):
        # oracle: root -> a -> b with unit x offsets lands b at (2, 0, 0)
        skel = Skeleton([0, 0, 1])
        rel = np.zeros((1, 3, 3))
        rel[0, 1] = (1.0, 0.0, 0.0)
        rel[0, 2] = (1.0, 0.0, 0.0)
        absolute = rel_to_abs(skel, rel)
        np.testing.assert_array_equal(absolute[0, 2], (2.0, 0.0, 0.0))

    def test_exact_inverse_pair(self):
        skel = skeleton_preset("desk11")
        rng = np.random.default_rng(0)
        rel = rng.uniform(-1, 1, (5, 11, 3))
        np.testing.assert_array_equal(abs_to_rel(skel, rel_to_abs(skel, rel)), rel)
        np.testing.assert_array_equal(rel_to_abs(skel, abs_to_rel(skel, rel)), rel)

    @given(st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_inverse_property_random_trees(self, seed):
        rng = np.random.default_rng(seed)
        j = int(rng.integers(3, 12))
        parents = [0] + [int(rng.integers(0, i)) for i in range(1, j)]
        skel = Skeleton(parents)
        rel = rng.uniform(-2, 2, (2, j, 3))
        round_trip = abs_to_rel(skel, rel_to_abs(skel, rel))
        np.testing.assert_allclose(round_trip, rel, atol=1e-12)

    def test_tensor_variant_matches_numpy(self):
        skel = skeleton_preset("desk11")
        rng = np.random.default_rng(1)
        rel = rng.uniform(-1, 1, (2, 4, 11, 3))
        out = rel_to_abs_tensor(skel, Tensor(rel))
        np.testing.assert_allclose(out.data, rel_to_abs(skel, rel), atol=1e-12)

    def test_tensor_variant_differentiable(self):
        skel = Skeleton([0, 0, 1])
        x = Tensor(np.random.default_rng(2).uniform(-1, 1, (1, 3, 3)),
                   requires_grad=True)
        out = rel_to_abs_tensor(skel, x)
        (g,) = ad.gradients(ad.tsum(out), [x])
        # root contributes to all three absolute joints, leaf only to itself
        assert g.data[0, 0, 0] == 3.0 and g.data[0, 2, 0] == 1.0


def make_clip(conf_value, frames=12, joints=11):
    return GestureClip(
        frames=np.zeros((frames, joints, 3)),
        confidences=np.full((frames, joints), conf_value),
        speaker=0,
        tokens=[1, 2],
        audio=np.zeros(frames * 16000 // 15),
    )


class TestFilterSot:
    def test_high_confidence_kept(self):
        assert len(filter_sot([make_clip(1.0)])) == 1

    def test_low_confidence_dropped(self):
        assert filter_sot([make_clip(0.01)]) == []

    def test_boundary_median_kept(self):
        assert len(filter_sot([make_clip(0.05)], tau=0.05)) == 1

    def test_idempotent_and_order_preserving(self):
        clips = [make_clip(1.0), make_clip(0.01), make_clip(0.9), make_clip(0.8)]
        once = filter_sot(clips)
        twice = filter_sot(once)
        assert once == twice
        assert once == [clips[0], clips[2], clips[3]]


class TestGenerateCorpus:
    def test_reproducible_byte_identical(self, tmp_path):
        cfg = CorpusConfig(n_clips=4, min_frames=40, max_frames=50)
        c1 = generate_corpus(cfg, seed=7)
        c2 = generate_corpus(cfg, seed=7)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_corpus(c1, p1)
        save_corpus(c2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_frame_and_audio_lengths(self):
        cfg = CorpusConfig(n_clips=3)
        corpus = generate_corpus(cfg, seed=1)
        for clip in corpus.clips:
            assert cfg.min_frames <= clip.n_frames <= cfg.max_frames
            expected = (clip.n_frames * 16000) // 15
            assert abs(clip.audio.shape[0] - expected) <= 1

    def test_audio_energy_correlates_with_wrist_speed(self):
        cfg = CorpusConfig(n_clips=6, min_frames=60, max_frames=80)
        corpus = generate_corpus(cfg, seed=3)
        skel = corpus.skeleton
        left, right = arm_joint_indices(skel)
        wrists = [i for i in left + right if "wrist" in skel.names[i]]
        cors = []
        for clip in corpus.clips:
            absolute = rel_to_abs(skel, clip.frames)
            speed = np.linalg.norm(
                np.diff(absolute[:, wrists, :], axis=0), axis=-1
            ).mean(axis=1)
            n = clip.n_frames
            spf = clip.audio.shape[0] // n
            energy = (clip.audio[: n * spf].reshape(n, spf) ** 2).mean(axis=1)
            cors.append(np.corrcoef(speed, energy[1:])[0, 1])
        assert np.mean(cors) > 0.3

    def test_speaker_amplitude_signatures(self):
        cfg = CorpusConfig(n_clips=20, n_speakers=2, amplitude_gap=0.5)
        corpus = generate_corpus(cfg, seed=5)
        skel = corpus.skeleton
        left, right = arm_joint_indices(skel)
        from gesturesynth.data import _rest_pose

        rest = _rest_pose(skel)
        amps = {0: [], 1: []}
        for clip in corpus.clips:
            dev = np.abs(clip.frames[:, left + right, :] - rest[left + right])
            amps[clip.speaker].append(dev.mean())
        ratio = np.mean(amps[1]) / np.mean(amps[0])
        assert ratio == pytest.approx(1.0 + cfg.amplitude_gap, rel=0.25)

    def test_splits_disjoint_cover_all(self):
        cfg = CorpusConfig(n_clips=10)
        corpus = generate_corpus(cfg, seed=9)
        assert len(corpus.splits) == 10
        total = sum(len(corpus.subset(s)) for s in ("train", "val", "test"))
        assert total == 10

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            generate_corpus(CorpusConfig(min_frames=100, max_frames=50), 0)


class TestSerialization:
    def test_round_trip_equality(self, tmp_path):
        corpus = generate_corpus(CorpusConfig(n_clips=3), seed=11)
        path = tmp_path / "c.jsonl"
        save_corpus(corpus, path)
        loaded = load_corpus(path)
        assert loaded.seed == corpus.seed
        assert loaded.splits == corpus.splits
        for a, b in zip(loaded.clips, corpus.clips):
            np.testing.assert_array_equal(a.frames, b.frames)
            np.testing.assert_array_equal(a.audio, b.audio)
            np.testing.assert_array_equal(a.confidences, b.confidences)
            assert a.tokens == b.tokens and a.speaker == b.speaker

    def test_unknown_major_version_rejected(self, tmp_path):
        corpus = generate_corpus(CorpusConfig(n_clips=1), seed=0)
        path = tmp_path / "c.jsonl"
        save_corpus(corpus, path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["version"] = [99, 0]
        path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
        with pytest.raises(CorpusFormatError, match="version"):
            load_corpus(path)

    def test_checksum_mismatch_detected(self, tmp_path):
        corpus = generate_corpus(CorpusConfig(n_clips=2), seed=0)
        path = tmp_path / "c.jsonl"
        save_corpus(corpus, path)
        text = path.read_text()
        path.write_text(text.replace('"speaker": 0', '"speaker": 1', 1))
        with pytest.raises(CorpusFormatError, match="checksum"):
            load_corpus(path)

    def test_malformed_line_reported_with_number(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text("{not json}\n")
        with pytest.raises(CorpusFormatError, match="line 1"):
            load_corpus(path)


def test_stats_table_format():
    corpus = generate_corpus(CorpusConfig(n_clips=4), seed=2)
    s = corpus_stats(corpus)
    assert s["clip_count"] == 4
    assert s["total_duration_s"] == pytest.approx(
        sum(c.duration for c in corpus.clips)
    )
    table = format_stats_table(corpus)
    assert "Number of clips" in table and "Average length" in table


class TestFragments:
    def test_span_and_audio_lengths(self):
        corpus = generate_corpus(CorpusConfig(n_clips=1, min_frames=60,
                                              max_frames=60), seed=4)
        frags = clip_fragments(corpus.clips[0], n_init=4, n_gen=30, stride=8)
        assert len(frags) >= 3
        for f in frags:
            assert f["prev"].shape[0] == 4
            assert f["target"].shape[0] == 30
            assert f["audio"].shape[0] == (34 * 16000) // 15

    def test_short_clip_yields_nothing(self):
        clip = make_clip(1.0, frames=10)
        assert clip_fragments(clip, 4, 30) == []
