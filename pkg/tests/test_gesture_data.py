"""Skeleton normalization, FK round-trips, segmentation, synthetic corpus."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesturelab.clips import audio_samples_for_frames, segment_clips
from gesturelab.corpus import (Corpus, CorpusConfig, load_corpus, save_corpus,
                               synthesize_corpus, synthesize_motion)
from gesturelab.skeleton import (DegeneratePoseError, Skeleton, base_skeleton,
                                 bone_angle_change, reconstruct_joints,
                                 to_real_length_vectors,
                                 to_unit_direction_vectors)


def chain_skeleton(length=2.0):
    return Skeleton(np.array([-1, 0]), np.array([length]))


class TestDirectionVectors:
    def test_axis_aligned_chain(self):
        joints = np.array([[[0.0, 0, 0], [0, 0, 2]]])
        out = to_unit_direction_vectors(joints, chain_skeleton())
        np.testing.assert_allclose(out, [[[0, 0, 1]]])

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        skel = base_skeleton("gesture")
        dirs, _ = synthesize_motion(rng, 4, "gesture")
        joints = reconstruct_joints(dirs, np.zeros(3), skel)
        a = to_unit_direction_vectors(joints, skel)
        b = to_unit_direction_vectors(joints * 5.0, skel)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_real_length_chain(self):
        joints = np.array([[[0.0, 0, 0], [0, 0, 2]]])
        out = to_real_length_vectors(joints, chain_skeleton())
        np.testing.assert_allclose(out, [[[0, 0, 2]]])

    def test_real_norms_equal_bone_lengths(self):
        rng = np.random.default_rng(1)
        skel = base_skeleton("gesture")
        dirs, _ = synthesize_motion(rng, 6, "gesture")
        joints = reconstruct_joints(dirs, np.zeros(3), skel)
        real = to_real_length_vectors(joints, skel)
        norms = np.linalg.norm(real, axis=-1)
        np.testing.assert_allclose(norms, np.tile(skel.bone_lengths, (6, 1)),
                                   atol=1e-9)

    def test_unit_norms_are_one(self):
        rng = np.random.default_rng(2)
        skel = base_skeleton("expressive")
        dirs, _ = synthesize_motion(rng, 5, "expressive")
        joints = reconstruct_joints(dirs, np.zeros(3), skel)
        unit = to_unit_direction_vectors(joints, skel)
        np.testing.assert_allclose(np.linalg.norm(unit, axis=-1), 1.0, atol=1e-5)

    def test_degenerate_pose_names_frame_and_joint(self):
        joints = np.zeros((3, 2, 3))
        joints[0, 1] = [0, 0, 1]
        joints[2, 1] = [0, 0, 1]   # frame 1 collapses
        with pytest.raises(DegeneratePoseError) as exc:
            to_unit_direction_vectors(joints, chain_skeleton())
        assert exc.value.frame == 1 and exc.value.joint == 1

    def test_roundtrip_ten_joint_pose(self):
        rng = np.random.default_rng(3)
        skel = base_skeleton("gesture")
        dirs, _ = synthesize_motion(rng, 8, "gesture")
        root = rng.normal(size=3)
        joints = reconstruct_joints(dirs, root, skel)
        again = reconstruct_joints(to_unit_direction_vectors(joints, skel), root, skel)
        np.testing.assert_allclose(again, joints, atol=1e-4)

    def test_real_length_roundtrip(self):
        rng = np.random.default_rng(4)
        skel = base_skeleton("gesture")
        dirs, _ = synthesize_motion(rng, 5, "gesture")
        joints = reconstruct_joints(dirs, np.zeros(3), skel)
        real = to_real_length_vectors(joints, skel)
        again = reconstruct_joints(real, np.zeros(3), skel, unit=False)
        np.testing.assert_allclose(again, joints, atol=1e-4)


class TestForwardKinematics:
    def test_single_bone_unit_mode(self):
        out = reconstruct_joints(np.array([[[0.0, 0, 1]]]), np.zeros(3),
                                 chain_skeleton(2.0))
        np.testing.assert_allclose(out[0, 1], [0, 0, 2])

    def test_root_translation_moves_everything(self):
        rng = np.random.default_rng(5)
        skel = base_skeleton("gesture")
        dirs, _ = synthesize_motion(rng, 3, "gesture")
        a = reconstruct_joints(dirs, np.zeros(3), skel)
        shift = np.array([1.0, -2.0, 0.5])
        b = reconstruct_joints(dirs, shift, skel)
        np.testing.assert_allclose(b - a, np.broadcast_to(shift, a.shape),
                                   atol=1e-9)

    def test_tree_validation(self):
        with pytest.raises(ValueError):
            Skeleton(np.array([0, 0]), np.array([1.0]))     # root not -1
        with pytest.raises(ValueError):
            Skeleton(np.array([-1, 1]), np.array([1.0]))    # self-parent
        with pytest.raises(ValueError):
            Skeleton(np.array([-1, 0]), np.array([-1.0]))   # negative length


class TestSegmentation:
    def _sequence(self, frames, seed=0):
        rng = np.random.default_rng(seed)
        dirs, beats = synthesize_motion(rng, frames, "gesture")
        real = dirs * base_skeleton("gesture").bone_lengths[None, :, None]
        root = np.zeros((frames, 3))
        audio = rng.normal(size=audio_samples_for_frames(frames) + 4).astype(np.float32)
        return dirs, real, root, audio, beats

    def test_exact_window_one_clip(self):
        g, a = segment_clips(*self._sequence(34), speaker="s00")
        assert len(g) == 1 and len(a) == 1
        assert g[0].frames == 34

    def test_length_54_gives_three_clips(self):
        g, _ = segment_clips(*self._sequence(54), speaker="s00")
        assert len(g) == 3

    def test_below_window_gives_none(self):
        g, a = segment_clips(*self._sequence(33), speaker="s00")
        assert g == [] and a == []

    def test_audio_sample_count(self):
        _, a = segment_clips(*self._sequence(54), speaker="s00")
        expect = audio_samples_for_frames(34)
        assert expect == 36267
        assert all(len(c.samples) == expect for c in a)

    def test_coverage(self):
        g, _ = segment_clips(*self._sequence(64), speaker="s00")
        covered = set()
        for k, clip in enumerate(g):
            covered.update(range(k * 10, k * 10 + 34))
        last_end = (len(g) - 1) * 10 + 34
        assert covered == set(range(last_end))


class TestCorpus:
    def test_deterministic_given_seed(self, tmp_path):
        cfg = CorpusConfig(speakers=2, clips_per_speaker=4, seed=11)
        a = synthesize_corpus(cfg)
        b = synthesize_corpus(cfg)
        save_corpus(a, tmp_path / "a")
        save_corpus(b, tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == \
                   (tmp_path / "b" / rel).read_bytes(), rel

    def test_beats_coincide_with_angle_change_maxima(self):
        cfg = CorpusConfig(speakers=2, clips_per_speaker=8, seed=5)
        corpus = synthesize_corpus(cfg)
        checked = 0
        for g, a in zip(corpus.clips, corpus.audio):
            rate = bone_angle_change(g.unit_dirs)
            for beat in a.beat_times:
                f = beat * g.fps
                lo, hi = int(np.floor(f)) - 1, int(np.ceil(f)) + 1
                window = range(max(lo, 1), min(hi, g.frames - 2) + 1)
                # some frame within +-1 of the beat is a local max of the rate
                assert any(rate[t] >= rate[t - 1] and rate[t] >= rate[t + 1]
                           for t in window), (g.clip_id, beat)
                checked += 1
        assert checked > 20

    def test_speakers_have_distinct_bone_lengths(self):
        corpus = synthesize_corpus(CorpusConfig(speakers=3, clips_per_speaker=1, seed=0))
        lengths = [sk.bone_lengths for sk in corpus.skeletons.values()]
        for i in range(len(lengths)):
            for j in range(i + 1, len(lengths)):
                assert not np.allclose(lengths[i], lengths[j])

    def test_speaker_erasure(self):
        # same motion draw, two different skeletons: unit dirs identical,
        # real dirs scaled
        rng_a = np.random.default_rng(77)
        rng_b = np.random.default_rng(77)
        dirs_a, _ = synthesize_motion(rng_a, 10, "gesture")
        dirs_b, _ = synthesize_motion(rng_b, 10, "gesture")
        np.testing.assert_allclose(dirs_a, dirs_b, atol=1e-15)
        small = base_skeleton("gesture")
        big = small.scaled(1.5)
        real_a = dirs_a * small.bone_lengths[None, :, None]
        real_b = dirs_b * big.bone_lengths[None, :, None]
        np.testing.assert_allclose(np.linalg.norm(real_b, axis=-1),
                                   1.5 * np.linalg.norm(real_a, axis=-1),
                                   rtol=1e-9)

    def test_speaker_scale_ratio_preserved_in_corpus(self):
        cfg = CorpusConfig(speakers=2, clips_per_speaker=2, seed=1,
                           speaker_scales=(1.0, 1.5))
        corpus = synthesize_corpus(cfg)
        a = corpus.skeletons["s00"].bone_lengths
        b = corpus.skeletons["s01"].bone_lengths
        np.testing.assert_allclose(b / a, 1.5, rtol=1e-12)

    def test_expressive_mode_feature_width(self):
        cfg = CorpusConfig(mode="expressive", speakers=1, clips_per_speaker=1, seed=0)
        corpus = synthesize_corpus(cfg)
        assert corpus.features().shape == (1, 34, 126)

    def test_gesture_mode_feature_width(self):
        cfg = CorpusConfig(speakers=1, clips_per_speaker=2, seed=0)
        corpus = synthesize_corpus(cfg)
        assert corpus.features().shape == (2, 34, 27)

    def test_unit_dirs_normalized_in_clips(self):
        corpus = synthesize_corpus(CorpusConfig(speakers=1, clips_per_speaker=2, seed=9))
        for c in corpus.clips:
            np.testing.assert_allclose(
                np.linalg.norm(c.unit_dirs, axis=-1), 1.0, atol=1e-5)

    def test_save_load_roundtrip(self, tmp_path):
        cfg = CorpusConfig(speakers=2, clips_per_speaker=3, seed=21)
        corpus = synthesize_corpus(cfg)
        save_corpus(corpus, tmp_path / "c")
        loaded = load_corpus(tmp_path / "c")
        assert loaded.config == cfg
        assert len(loaded.clips) == len(corpus.clips)
        np.testing.assert_array_equal(loaded.features(), corpus.features())
        for orig, back in zip(corpus.audio, loaded.audio):
            np.testing.assert_array_equal(orig.beat_times, back.beat_times)
            assert np.abs(orig.samples - back.samples).max() < 1e-4
        for name in corpus.skeletons:
            np.testing.assert_array_equal(
                corpus.skeletons[name].bone_lengths,
                loaded.skeletons[name].bone_lengths)

    def test_pcm_is_int16_le(self, tmp_path):
        corpus = synthesize_corpus(CorpusConfig(speakers=1, clips_per_speaker=1, seed=2))
        root = save_corpus(corpus, tmp_path / "c")
        pcm = (root / "audio" / f"{corpus.clips[0].clip_id}.pcm").read_bytes()
        assert len(pcm) == 2 * 36267
        back = np.frombuffer(pcm, dtype="<i2").astype(np.float32) / 32767.0
        assert np.abs(back - corpus.audio[0].samples).max() < 1e-4

    def test_corrupt_clip_payload_detected(self, tmp_path):
        from gesturelab.corpus import CorpusFormatError
        corpus = synthesize_corpus(CorpusConfig(speakers=1, clips_per_speaker=1, seed=2))
        root = save_corpus(corpus, tmp_path / "c")
        f = root / "clips" / f"{corpus.clips[0].clip_id}.bin"
        f.write_bytes(f.read_bytes()[:-8])
        with pytest.raises(CorpusFormatError):
            load_corpus(root)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=34, max_value=90),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_segmentation_window_count_property(frames, seed):
    rng = np.random.default_rng(seed)
    dirs, beats = synthesize_motion(rng, frames, "gesture")
    real = dirs.copy()
    root = np.zeros((frames, 3))
    audio = np.zeros(audio_samples_for_frames(frames) + 4, dtype=np.float32)
    g, a = segment_clips(dirs, real, root, audio, beats, "s00")
    assert len(g) == (frames - 34) // 10 + 1
    assert len(g) == len(a)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_normalization_idempotence_property(seed):
    rng = np.random.default_rng(seed)
    skel = base_skeleton("gesture")
    dirs, _ = synthesize_motion(rng, 4, "gesture")
    joints = reconstruct_joints(dirs, np.zeros(3), skel)
    unit = to_unit_direction_vectors(joints, skel)
    joints2 = reconstruct_joints(unit, np.zeros(3), skel)
    unit2 = to_unit_direction_vectors(joints2, skel)
    np.testing.assert_allclose(unit, unit2, atol=1e-5)
