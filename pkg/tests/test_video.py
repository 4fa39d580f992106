import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stconv.errors import ConfigError, FormatError, GeometryError
from stconv.tensor import DTYPE, new_rng
from stconv.video import (Clip, ManifestEntry, SamplerConfig, VideoSource, augment, center_origin,
                          clip_starts, epoch_order, hflip, load_videos, manifest_text,
                          read_frame_dir, read_manifest, resize_bilinear, sample_clips,
                          shuffle_frames, temporal_jitter_sample, write_frame_dir, write_video)

# 0.99 quantile of chi-square with 68 degrees of freedom (scipy.stats.chi2.ppf)
CHI2_68_P99 = 98.0284


def make_video(frames, h=8, w=10, label=0, seed=0):
    data = np.random.default_rng(seed).uniform(0, 1, (frames, 3, h, w)).astype(DTYPE)
    return VideoSource("v", data, label)


class TestResize:
    def test_constant(self):
        out = resize_bilinear(np.full((3, 5, 7), 0.3, DTYPE), 11, 4)
        np.testing.assert_allclose(out, 0.3, rtol=1e-6)

    def test_same_size_identity(self, rng):
        x = rng.uniform(0, 1, (3, 6, 6)).astype(DTYPE)
        np.testing.assert_allclose(resize_bilinear(x, 6, 6), x, atol=1e-6)

    def test_ramp_by_hand(self):
        x = np.tile(np.array([[0.0, 1.0], [0.0, 1.0]], DTYPE), (3, 1, 1))
        out = resize_bilinear(x, 2, 4)
        # half-pixel centres land at -0.25, 0.25, 0.75, 1.25 -> clamp -> 0, .25, .75, 1
        np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-7)
        assert np.all(np.diff(out, axis=-1) >= 0)

    @settings(max_examples=50, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 9), oh=st.integers(1, 12), ow=st.integers(1, 12),
           seed=st.integers(0, 99))
    def test_value_range(self, h, w, oh, ow, seed):
        x = np.random.default_rng(seed).uniform(-2, 5, (3, h, w)).astype(DTYPE)
        out = resize_bilinear(x, oh, ow)
        assert out.shape == (3, oh, ow)
        assert out.min() >= x.min() - 1e-6 and out.max() <= x.max() + 1e-6

    def test_bad_target(self):
        with pytest.raises(GeometryError):
            resize_bilinear(np.zeros((3, 2, 2), DTYPE), 0, 2)


class TestSampling:
    def test_exact_fit(self):
        assert clip_starts(16, 16, 8) == [0]

    def test_sixty_four_frames(self):
        assert clip_starts(64, 16, 8) == [0, 8, 16, 24, 32, 40, 48]

    def test_short_video_padded(self):
        video = make_video(10)
        clips = sample_clips(video, SamplerConfig(16, 8, None, (8, 10)))
        assert len(clips) == 1
        data = clips[0].data
        assert data.shape == (3, 16, 8, 10)
        for t in range(10, 16):
            np.testing.assert_array_equal(data[:, t], video.frames[9])

    def test_clip_content(self):
        video = make_video(20)
        clips = sample_clips(video, SamplerConfig(8, 4, None, (8, 10)))
        np.testing.assert_array_equal(clips[2].data, video.frames[8:16].transpose(1, 0, 2, 3))

    def test_resize_applied(self):
        clips = sample_clips(make_video(16), SamplerConfig(16, 8, (12, 15), (8, 8)))
        assert clips[0].data.shape == (3, 16, 12, 15)

    @settings(max_examples=200, deadline=None)
    @given(f=st.integers(1, 200), clip_len=st.sampled_from([8, 16, 32]), half=st.booleans())
    def test_coverage(self, f, clip_len, half):
        overlap = clip_len // 2 if half else 0
        starts = clip_starts(f, clip_len, overlap)
        padded = max(f, clip_len)
        assert starts[0] == 0 and starts[-1] + clip_len <= padded
        covered = set()
        for s in starts:
            covered.update(range(s, s + clip_len))
        assert covered == set(range(starts[-1] + clip_len))
        assert padded - (starts[-1] + clip_len) < clip_len - overlap

    @pytest.mark.parametrize("overlap", [-1, 16, 20])
    def test_bad_overlap(self, overlap):
        with pytest.raises(ConfigError):
            SamplerConfig(16, overlap)


class TestAugment:
    def test_centre_origin(self):
        assert center_origin((128, 171), (112, 112)) == (8, 29)

    def test_eval_centre_crop(self, rng):
        data = rng.uniform(0, 1, (3, 2, 128, 171)).astype(DTYPE)
        out = augment(Clip("v", 0, data), SamplerConfig(2, 0, None, (112, 112)))
        np.testing.assert_array_equal(out.data, data[..., 8:120, 29:141])

    def test_flip_involution(self, rng):
        clip = Clip("v", 0, rng.uniform(0, 1, (3, 2, 4, 5)).astype(DTYPE))
        np.testing.assert_array_equal(hflip(hflip(clip)).data, clip.data)

    def test_train_deterministic(self, rng):
        clip = Clip("v", 0, rng.uniform(0, 1, (3, 4, 20, 20)).astype(DTYPE))
        cfg = SamplerConfig(4, 0, None, (12, 12), train_mode=True)
        a = augment(clip, cfg, new_rng(3))
        b = augment(clip, cfg, new_rng(3))
        np.testing.assert_array_equal(a.data, b.data)
        assert a.data.shape == (3, 4, 12, 12)

    def test_train_crops_vary(self):
        clip = Clip("v", 0, np.arange(20 * 20, dtype=DTYPE).reshape(1, 1, 20, 20).repeat(3, 0))
        cfg = SamplerConfig(1, 0, None, (10, 10), train_mode=True, flip_prob=0.0)
        r = new_rng(0)
        corners = {float(augment(clip, cfg, r).data[0, 0, 0, 0]) for _ in range(3000)}
        # every origin in the 11 x 11 grid is reachable
        assert corners == {float(20 * t + l) for t in range(11) for l in range(11)}

    def test_flip_probability(self):
        data = np.tile(np.arange(4, dtype=DTYPE), (3, 1, 4, 1))
        cfg = SamplerConfig(1, 0, None, (4, 4), train_mode=True)
        r = new_rng(1)
        flipped = sum(augment(Clip("v", 0, data), cfg, r).data[0, 0, 0, 0] == 3 for _ in range(2000))
        assert 900 < flipped < 1100
        never = SamplerConfig(1, 0, None, (4, 4), train_mode=True, flip_prob=0.0)
        assert all(augment(Clip("v", 0, data), never, r).data[0, 0, 0, 0] == 0 for _ in range(50))

    def test_crop_too_large(self):
        with pytest.raises(GeometryError):
            augment(Clip("v", 0, np.zeros((3, 1, 4, 4), DTYPE)), SamplerConfig(1, 0, None, (5, 4)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_value_range_preserved(self, seed):
        r = np.random.default_rng(seed)
        data = r.uniform(0.2, 0.7, (3, 2, 9, 11)).astype(DTYPE)
        out = augment(Clip("v", 0, data), SamplerConfig(2, 0, None, (5, 6), train_mode=True), new_rng(seed))
        assert out.data.min() >= data.min() and out.data.max() <= data.max()

    def test_mean_offset(self):
        data = np.ones((3, 1, 2, 2), DTYPE)
        out = augment(Clip("v", 0, data), SamplerConfig(1, 0, None, (2, 2), mean=(0.5, 0.25, 0.0)))
        np.testing.assert_allclose(out.data[:, 0, 0, 0], [0.5, 0.75, 1.0])


class TestJitter:
    def test_single_choice(self):
        video = make_video(16)
        assert all(temporal_jitter_sample(video, 16, new_rng(s)).start_frame == 0 for s in range(10))

    def test_uniform_starts(self):
        video = make_video(100, 2, 2)
        r = new_rng(11)
        starts = np.array([temporal_jitter_sample(video, 32, r).start_frame for _ in range(10000)])
        assert starts.min() >= 0 and starts.max() <= 68
        counts = np.bincount(starts, minlength=69)
        expected = 10000 / 69
        assert float(((counts - expected) ** 2 / expected).sum()) < CHI2_68_P99

    def test_reproducible(self):
        video = make_video(50)
        a = temporal_jitter_sample(video, 8, new_rng(4), (6, 6))
        b = temporal_jitter_sample(video, 8, new_rng(4), (6, 6))
        assert a.start_frame == b.start_frame
        np.testing.assert_array_equal(a.data, b.data)


class TestShuffleAndOrder:
    def test_shuffle_is_permutation(self, rng):
        clip = Clip("v", 0, rng.uniform(0, 1, (3, 8, 2, 2)).astype(DTYPE))
        out = shuffle_frames(clip, new_rng(0))
        frames = {clip.data[:, t].tobytes() for t in range(8)}
        assert {out.data[:, t].tobytes() for t in range(8)} == frames

    def test_epoch_order(self):
        order = epoch_order(640, 4, new_rng(0))
        assert order.size == 2560
        assert np.all(np.bincount(order) == 4)


class TestIngestion:
    def test_frame_dir_roundtrip(self, tmp_path):
        frames = np.random.default_rng(0).integers(0, 256, (3, 3, 5, 6)).astype(DTYPE) / 255
        write_frame_dir(tmp_path / "v", frames)
        np.testing.assert_allclose(read_frame_dir(tmp_path / "v"), frames, atol=1e-7)

    def test_natural_order(self, tmp_path):
        frames = np.zeros((11, 3, 2, 2), DTYPE)
        for i in range(11):
            frames[i] = i / 255
        d = tmp_path / "v"
        write_frame_dir(d, frames)
        for p in d.iterdir():  # strip zero padding: 0.ppm ... 10.ppm
            p.rename(d / f"{int(p.stem)}.ppm")
        np.testing.assert_allclose(read_frame_dir(d)[:, 0, 0, 0], np.arange(11) / 255, atol=1e-7)

    def test_empty_dir(self, tmp_path):
        with pytest.raises(FormatError):
            read_frame_dir(tmp_path)

    def test_manifest(self, tmp_path):
        video = make_video(4, label=1)
        write_video(tmp_path / "a.stt", video)
        entries = [ManifestEntry("a", tmp_path / "a.stt", 1, 4)]
        (tmp_path / "m.csv").write_text(manifest_text(entries, tmp_path))
        back = read_manifest(tmp_path / "m.csv")
        assert back == entries
        loaded = load_videos(back)[0]
        assert loaded.label == 1
        np.testing.assert_array_equal(loaded.frames, video.frames)

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,path\n")
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "m.csv")
