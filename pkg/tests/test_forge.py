import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracefuse.forge.dataset import (ManifestError, build_dataset, load_manifest, mix_counts, parse_mix, plan,
                                     read_png)
from tracefuse.forge.rng import Xoshiro256, splitmix64
from tracefuse.forge.scenes import (ForgeConfig, GenerationError, ManipulationType, config_hash, copy_move_rects,
                                    fnv1a64, gen_authentic, gen_base_scene, gen_copy_move, gen_remove, gen_splice,
                                    generate, render_coc_text, render_scene)
from tracefuse.stub import FAKE, REAL, SEG, Vocabulary

M = ManipulationType
EVEN = {M.SPLICE: 0.25, M.COPY_MOVE: 0.25, M.REMOVE: 0.25, M.AUTHENTIC: 0.25}


# -- rng reference vectors ---------------------------------------------------

def test_splitmix64_vector():
    x, out = 1234567, []
    for _ in range(5):
        x, z = splitmix64(x)
        out.append(z)
    assert out == [6457827717110365317, 3203168211198807973, 9817491932198370423,
                   4593380528125082431, 16408922859458223821]


def test_xoshiro_vector():
    r = Xoshiro256(state=[1, 2, 3, 4])
    assert r.next_u64(6).tolist() == [11520, 0, 1509978240, 1215971899390074240,
                                       1216172134540287360, 607988272756665600]


def test_xoshiro_rejects_zero_state():
    with pytest.raises(ValueError):
        Xoshiro256(state=[0, 0, 0, 0])


def test_rng_conversions():
    r = Xoshiro256(5)
    u = r.random(10000)
    assert 0 <= u.min() and u.max() < 1
    z = Xoshiro256(6).normal(20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03
    k = Xoshiro256(7).integers(3, 9, size=1000)
    assert set(k.tolist()) == set(range(3, 9))


def test_fnv1a64_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert config_hash(ForgeConfig()) == config_hash(ForgeConfig())
    assert config_hash(ForgeConfig()) != config_hash(ForgeConfig(feather=True))


# -- scenes ------------------------------------------------------------------

def test_base_scene_determinism():
    a, b = gen_base_scene(11), gen_base_scene(11)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, gen_base_scene(12))
    assert a.shape == (3, 64, 64) and a.min() >= 0 and a.max() <= 1


def test_shape_noise_matches_configured_sigma():
    checked = 0
    for seed in range(30):
        scene = render_scene(seed)
        resid = (scene.image - scene.clean) * 255.0
        for i, s in enumerate(scene.shapes):
            vis = scene.visible_mask(i)
            if vis.sum() < 150:
                continue
            est = resid[:, vis].std()
            assert abs(est - s.sigma) / s.sigma < 0.2, (seed, i, est, s.sigma)
            checked += 1
    assert checked > 10


def test_authentic():
    s = gen_authentic(3)
    assert s.label == "REAL" and s.mask.sum() == 0
    assert REAL in s.text and SEG not in s.text


def test_copy_move_exact_copy():
    for seed in range(20):
        src, dst = copy_move_rects(seed)
        sy, sx, h, w = src
        dy, dx, _, _ = dst
        assert sy + h <= dy or dy + h <= sy or sx + w <= dx or dx + w <= sx
        s = gen_copy_move(seed)
        base = render_scene(seed).image
        np.testing.assert_array_equal(s.image[:, dy:dy + h, dx:dx + w], base[:, sy:sy + h, sx:sx + w])
        assert s.mask.sum() == h * w


def test_splice_area_and_noise_margin():
    cfg = ForgeConfig()
    for seed in range(20):
        s = gen_splice(seed)
        frac = s.mask.mean()
        assert cfg.area_frac[0] <= frac <= cfg.area_frac[1]
        assert FAKE in s.text and "SPLICE" in s.text


def test_splice_region_is_noisier_than_host():
    diffs = []
    for seed in range(10):
        s = gen_splice(seed)
        lap = s.image[:, 1:-1, 1:-1] * 4 - s.image[:, :-2, 1:-1] - s.image[:, 2:, 1:-1] - s.image[:, 1:-1, :-2] \
            - s.image[:, 1:-1, 2:]
        m = s.mask[1:-1, 1:-1].astype(bool)
        diffs.append(np.abs(lap[:, m]).mean() > np.abs(lap[:, ~m]).mean())
    assert all(diffs)


def test_remove_fill_is_smooth():
    for seed in range(10):
        s = gen_remove(seed)
        m = s.mask.astype(bool)
        assert s.label == "FAKE" and m.any()
        assert (s.image - render_scene(seed).image)[:, m].std() > 0


def test_feather_blends_boundary():
    cfg = ForgeConfig(feather=True)
    hard, soft = gen_splice(4), gen_splice(4, cfg)
    assert np.array_equal(hard.mask, soft.mask)
    assert not np.array_equal(hard.image, soft.image)


def test_placement_failure_is_an_error():
    cfg = ForgeConfig(area_frac=(0.9, 0.95))
    with pytest.raises(GenerationError):
        gen_splice(1, cfg)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(M)), st.integers(0, 2 ** 63))
def test_label_iff_mask(kind, seed):
    s = generate(kind, seed)
    assert (s.label == "FAKE") == bool(s.mask.any())
    assert (kind is M.AUTHENTIC) == (s.label == "REAL")
    assert set(np.unique(s.mask).tolist()) <= {0, 1}


def test_coc_text_roundtrip():
    v = Vocabulary()
    for kind in M:
        text = render_coc_text("REAL" if kind is M.AUTHENTIC else "FAKE", kind)
        assert v.decode(v.encode(text)) == text
        assert len(text) == 5


# -- datasets ----------------------------------------------------------------

def test_mix_counts():
    assert mix_counts(100, EVEN) == {m: 25 for m in M}
    assert sum(mix_counts(7, EVEN).values()) == 7
    with pytest.raises(ValueError):
        mix_counts(10, {M.SPLICE: 0.5, M.REMOVE: 0.4})


def test_parse_mix():
    assert parse_mix("splice=0.5,copy_move=0.5") == {M.SPLICE: 0.5, M.COPY_MOVE: 0.5}
    assert parse_mix("0.25,0.25,0.25,0.25") == EVEN
    with pytest.raises(ValueError):
        parse_mix("0.5,0.5")


def test_plan_is_pure():
    assert plan(20, EVEN, 3) == plan(20, EVEN, 3)
    assert plan(20, EVEN, 3) != plan(20, EVEN, 4)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_build_dataset_reproducible(tmp_path):
    a = build_dataset(12, EVEN, 9, tmp_path / "a")
    build_dataset(12, EVEN, 9, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    loaded = load_manifest(tmp_path / "a")
    assert [r.to_json() for r in loaded.records] == [r.to_json() for r in a.records]
    counts = {m: sum(r.manip == m.value for r in loaded.records) for m in M}
    assert counts == {m: 3 for m in M}


def test_pngs_match_generated_samples(tmp_path):
    m = build_dataset(4, EVEN, 2, tmp_path)
    for i, rec in enumerate(m.records):
        s = generate(M(rec.manip), rec.seed)
        np.testing.assert_allclose(read_png(tmp_path / rec.image), s.image, atol=1e-12)
        img, mask = m.load_sample(i)
        np.testing.assert_array_equal(mask, s.mask)


def test_manifest_validation(tmp_path):
    build_dataset(4, EVEN, 1, tmp_path)
    (tmp_path / "images" / "00000.png").unlink()
    with pytest.raises(ManifestError):
        load_manifest(tmp_path)
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "missing")


def test_manifest_hash_mismatch(tmp_path):
    import json
    build_dataset(4, EVEN, 1, tmp_path)
    meta = json.loads((tmp_path / "config.json").read_text())
    meta["config"]["feather"] = True
    (tmp_path / "config.json").write_text(json.dumps(meta))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path)
