import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ffcsn import container
from ffcsn.synthgen import (
    DECEPTIVE,
    TRUTHFUL,
    Dataset,
    DatasetError,
    GenConfig,
    VideoSample,
    assign_identities_and_labels,
    cue_sigmas,
    generate_dataset,
    generate_samples,
    read_dataset,
    render_episode,
    segment_bounds,
)

SMALL = dict(n_identities=6, n_videos=8, n_deceptive=4, frame_hw=16)


# -- container -----------------------------------------------------------------

def test_container_header_layout():
    buf = container.encode({"w": np.zeros((2, 3), dtype=np.float32)})
    assert buf[:4] == b"FFCS"
    assert struct.unpack_from("<II", buf, 4) == (container.VERSION, 1)
    (nlen,) = struct.unpack_from("<H", buf, 12)
    assert buf[14 : 14 + nlen] == b"w"
    assert struct.unpack_from("<BB", buf, 15) == (0, 2)
    assert struct.unpack_from("<2Q", buf, 17) == (2, 3)
    assert len(buf) == 17 + 16 + 6 * 4


@settings(max_examples=50, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]), st.tuples(st.integers(0, 3), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_container_round_trip_is_bit_exact(arr):
    out = container.decode(container.encode({"a": arr, "b/c": arr[:1]}))
    assert list(out) == ["a", "b/c"]
    assert out["a"].dtype == arr.dtype and out["a"].tobytes() == arr.tobytes()
    assert container.encode(out) == container.encode({"a": arr, "b/c": arr[:1]})


@pytest.mark.parametrize("cut", [3, 11, 14, 20, -1])
def test_container_truncation_detected(cut):
    buf = container.encode({"w": np.ones(4)})
    with pytest.raises(container.ContainerError, match="truncated|magic"):
        container.decode(buf[:cut], "file.ffcs")


def test_container_rejects_bad_magic_version_trailing_and_dtype():
    buf = container.encode({"w": np.ones(2)})
    with pytest.raises(container.ContainerError, match="magic"):
        container.decode(b"XXXX" + buf[4:])
    with pytest.raises(container.ContainerError, match="version"):
        container.decode(buf[:4] + struct.pack("<I", 99) + buf[8:])
    with pytest.raises(container.ContainerError, match="trailing"):
        container.decode(buf + b"\0")
    with pytest.raises(container.ContainerError, match="dtype"):
        container.encode({"i": np.arange(3)})


def test_container_json_text_round_trip():
    obj = {"a": [1, 2.5], "name": "héllo"}
    assert container.unpack_json(container.pack_json(obj)) == obj


# -- GenConfig -------------------------------------------------------------------

def test_gen_config_defaults_mirror_dataset_split():
    cfg = GenConfig()
    assert (cfg.n_videos, cfg.n_identities, cfg.n_truthful, cfg.n_deceptive) == (104, 58, 50, 54)
    assert cfg.lag_deceptive == (2, 3) and cfg.lag_truthful == 0
    cfg.validate()


@pytest.mark.parametrize("bad", [
    dict(n_videos=3, n_identities=4),
    dict(leak_prob=1.5),
    dict(lag_deceptive=(15,)),
    dict(lag_truthful=1),
    dict(episode_len=12),
])
def test_gen_config_invalid(bad):
    with pytest.raises(ValueError):
        GenConfig(**bad).validate()


def test_segment_bounds_equal_thirds():
    assert segment_bounds(45, 3) == [(0, 15), (15, 30), (30, 45)]


# -- render_episode ----------------------------------------------------------------

def test_truthful_cues_are_synchronous():
    s = render_episode(0, TRUTHFUL, np.random.default_rng(0), GenConfig(**SMALL))
    assert s.face_cue_frames == s.flow_cue_frames
    assert s.lags == [0, 0, 0]


def test_deceptive_lags_within_two_to_three():
    cfg = GenConfig(**SMALL)
    for seed in range(20):
        s = render_episode(1, DECEPTIVE, np.random.default_rng(seed), cfg)
        assert set(s.lags) <= {2, 3}


def test_render_is_deterministic():
    cfg = GenConfig(**SMALL)
    a = render_episode(2, DECEPTIVE, np.random.default_rng(5), cfg)
    b = render_episode(2, DECEPTIVE, np.random.default_rng(5), cfg)
    assert a.equals(b)
    assert a.face_frames.tobytes() == b.face_frames.tobytes()


def test_render_shapes_and_finiteness():
    cfg = GenConfig(**SMALL)
    s = render_episode(0, TRUTHFUL, np.random.default_rng(1), cfg)
    assert s.face_frames.shape == (45, 3, 16, 16) and s.flow_frames.shape == (45, 2, 16, 16)
    assert s.face_frames.dtype == np.float32
    assert np.isfinite(s.face_frames).all() and np.isfinite(s.flow_frames).all()


def test_render_rejects_bad_identity_and_label():
    cfg = GenConfig(**SMALL)
    with pytest.raises(ValueError):
        render_episode(6, TRUTHFUL, np.random.default_rng(0), cfg)
    with pytest.raises(ValueError):
        render_episode(0, 2, np.random.default_rng(0), cfg)


def test_lag_leaving_segment_is_an_error():
    cfg = GenConfig(**SMALL, lag_deceptive=(9,))
    with pytest.raises(ValueError, match="leaves segment"):
        render_episode(0, DECEPTIVE, np.random.default_rng(0), cfg)


def test_cues_lie_within_their_segments():
    cfg = GenConfig(**SMALL)
    s = render_episode(0, DECEPTIVE, np.random.default_rng(3), cfg)
    for (lo, hi), f, m in zip(segment_bounds(45, 3), s.face_cue_frames, s.flow_cue_frames):
        assert lo <= f - cfg.face_hold + 1 and m < hi


def test_flow_cue_energy_sits_on_cue_frame():
    cfg = GenConfig(**SMALL, noise_std=0.0)
    s = render_episode(0, DECEPTIVE, np.random.default_rng(4), cfg)
    energy = (s.flow_frames ** 2).sum(axis=(1, 2, 3))
    assert set(np.nonzero(energy > 1e-6)[0]) == set(s.flow_cue_frames)


def _anisotropy(frame):
    """log ratio of x-spread to y-spread of a non-negative blob image."""
    img = np.clip(frame, 0, None)
    ys, xs = np.indices(img.shape)
    w = img / img.sum()
    my, mx = (w * ys).sum(), (w * xs).sum()
    return float(np.log((w * (xs - mx) ** 2).sum() / (w * (ys - my) ** 2).sum()))


def _face_anisotropies(label, leak_prob, n=40):
    cfg = GenConfig(**SMALL, leak_prob=leak_prob, noise_std=0.0, texture_amplitude=0.0)
    vals = []
    for seed in range(n):
        s = render_episode(0, label, np.random.default_rng(seed), cfg)
        vals += [_anisotropy(s.face_frames[t, 0]) for t in s.face_cue_frames]
    return np.array(vals)


def test_no_leak_face_cue_shapes_match_across_classes():
    t, d = _face_anisotropies(TRUTHFUL, 0.0), _face_anisotropies(DECEPTIVE, 0.0)
    assert np.allclose(t, d, atol=0.15)
    assert cue_sigmas(GenConfig(), TRUTHFUL, False) == cue_sigmas(GenConfig(), DECEPTIVE, False)


def test_leak_stretches_face_cue_in_class_direction():
    t, d = _face_anisotropies(TRUTHFUL, 1.0), _face_anisotropies(DECEPTIVE, 1.0)
    assert t.mean() < -0.3 and d.mean() > 0.3


# -- dataset generation ------------------------------------------------------------

def test_defaults_give_fifty_truthful_and_fifty_four_deceptive():
    ids, labels = assign_identities_and_labels(GenConfig(), seed=0)
    assert np.bincount(labels).tolist() == [50, 54]
    assert sorted(set(ids)) == list(range(58))
    owners = {}
    for i, y in zip(ids, labels):
        owners.setdefault(i, set()).add(y)
    assert any(len(v) == 2 for v in owners.values())


def test_two_videos_two_identities_one_each():
    ids, _ = assign_identities_and_labels(GenConfig(n_videos=2, n_identities=2, n_deceptive=1), 0)
    assert sorted(ids) == [0, 1]


def test_lag_histogram_supported_on_configured_lags():
    samples = generate_samples(GenConfig(**SMALL), seed=1)
    lags = {y: set() for y in (TRUTHFUL, DECEPTIVE)}
    for s in samples:
        lags[s.label].update(s.lags)
    assert lags[TRUTHFUL] == {0} and lags[DECEPTIVE] <= {2, 3}


def test_generate_and_read_round_trip(tmp_path):
    cfg = GenConfig(**SMALL)
    manifest = generate_dataset(cfg, 3, tmp_path / "d")
    assert len(manifest.records) == 8
    ds = read_dataset(tmp_path / "d" / "manifest.json")
    fresh = generate_samples(cfg, 3)
    assert len(ds) == 8 and all(a.equals(b) for a, b in zip(ds.samples, fresh))
    assert ds.seed == 3 and ds.gen_config == cfg


def test_generation_is_a_pure_function_of_config_and_seed(tmp_path):
    cfg = GenConfig(**SMALL)
    generate_dataset(cfg, 7, tmp_path / "a")
    generate_dataset(cfg, 7, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_unwritable_output_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetError, match="not writable"):
        generate_dataset(GenConfig(**SMALL), 0, blocker / "sub")


def test_read_truncated_sample_names_file(tmp_path):
    generate_dataset(GenConfig(**SMALL), 0, tmp_path)
    victim = tmp_path / "sample_0003.ffcs"
    victim.write_bytes(victim.read_bytes()[:100])
    with pytest.raises(DatasetError, match="sample_0003"):
        read_dataset(tmp_path)


def test_read_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        read_dataset(tmp_path)


def test_read_version_mismatch(tmp_path):
    generate_dataset(GenConfig(**SMALL), 0, tmp_path)
    meta = json.loads((tmp_path / "manifest.json").read_text())
    meta["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="version"):
        read_dataset(tmp_path)


def test_read_shape_mismatch_names_file(tmp_path):
    cfg = GenConfig(**SMALL)
    generate_dataset(cfg, 0, tmp_path)
    meta = json.loads((tmp_path / "manifest.json").read_text())
    meta["gen_config"]["frame_hw"] = 32
    (tmp_path / "manifest.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="sample_0000"):
        read_dataset(tmp_path)


def test_sample_entries_round_trip():
    s = render_episode(1, DECEPTIVE, np.random.default_rng(2), GenConfig(**SMALL))
    back = VideoSample.from_entries(container.decode(container.encode(s.to_entries())))
    assert back.equals(s)


def test_dataset_access_log_records_reads():
    ds = Dataset.synthesize(GenConfig(**SMALL), 0)
    ds[3], ds[1]
    assert ds.access_log == [3, 1]
    assert ds.labels.tolist() == [s.label for s in ds.samples]
