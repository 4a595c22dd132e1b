import json

import numpy as np
import pytest

from coatsim import io as cio
from coatsim.core import Rng
from coatsim.dataset import (TASK_MIXTURE, ConfigError, DatasetConfig, InsufficientVariantsError, albedo_pool,
                             build_scene_group, build_training_sample, generate_dataset, read_manifest,
                             sample_coating, sample_scene, sample_task_mixture, scene_ids, validate_manifest)
from coatsim.render import render_uncoated, test_scene


@pytest.fixture(scope="module")
def tiny_group():
    scene = test_scene(24)
    return build_scene_group(scene, Rng(9), 3, coverage=0.6, scene_id="tiny")


def test_default_config_scene_ids_distinct():
    ids = scene_ids(DatasetConfig())
    assert len(ids) == 24
    assert len({sid for sid, _, _ in ids}) == 24
    assert len({(o, v) for _, o, v in ids}) == 24


def test_singleton_catalog_is_reproducible():
    config = DatasetConfig(groups=1, variants=1, resolution=16, objects=["sphere"], viewpoints=1)
    a = generate_dataset(config, 5)[0]
    b = generate_dataset(config, 5)[0]
    assert a.scene == b.scene
    assert np.array_equal(a.variants[0].render.image, b.variants[0].render.image)


def test_seeds_change_lights():
    config = DatasetConfig(resolution=16)
    a = sample_scene(Rng(1), config.objects, config, 0, 0)
    b = sample_scene(Rng(2), config.objects, config, 0, 0)
    assert a.lights[0].position != b.lights[0].position


@pytest.mark.parametrize("bad", [{"groups": 0}, {"objects": []}, {"objects": ["teapot"]}, {"viewpoints": 9},
                                 {"colour": 1}])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        DatasetConfig.from_dict(bad)


def test_config_roundtrip():
    config = DatasetConfig(groups=3, resolution=32)
    assert DatasetConfig.from_dict(config.to_dict()) == config


def test_sample_coating_contract():
    pool = albedo_pool()
    mask = np.ones((4, 4))
    a = sample_coating(Rng(3), pool, mask)
    b = sample_coating(Rng(3), pool, mask)
    assert a.traits == b.traits and a.albedo_record() == b.albedo_record()
    rng = Rng(4)
    draws = [sample_coating(rng, pool, mask) for _ in range(10_000)]
    assert {c.traits.metalness for c in draws} == {0.0, 1.0}
    assert {c.traits.transmission for c in draws} == {0.0, 1.0}
    uniform = np.mean([c.is_uniform for c in draws])
    assert abs(uniform - 0.5) <= 0.02


def test_sample_coating_empty_mask():
    with pytest.raises(ValueError):
        sample_coating(Rng(0), albedo_pool(), np.zeros((3, 3)))


def test_group_single_variant():
    group = build_scene_group(test_scene(16), Rng(1), 1, coverage=0.5)
    assert len(group.variants) == 1
    assert cio.mask_hash(group.variants[0].coating.mask) == cio.mask_hash(group.mask)


def test_group_shares_mask_and_geometry(tiny_group):
    hashes = {cio.mask_hash(v.coating.mask) for v in tiny_group.variants}
    assert hashes == {cio.mask_hash(tiny_group.mask)}
    for v in tiny_group.variants:
        assert np.array_equal(v.render.depth, tiny_group.original.depth)


def test_training_sample_tasks(tiny_group):
    rng = Rng(0)
    add = build_training_sample(tiny_group, "add", rng)
    assert add.input_image is tiny_group.original.image
    assert add.task in ("add_uniform", "add_textured") and add.traits is not None
    rem = build_training_sample(tiny_group, "remove", rng)
    assert rem.traits is None
    assert rem.target_image is tiny_group.original.image
    assert any(rem.input_image is v.render.image for v in tiny_group.variants)
    assert not rem.projected_albedo.any()


def test_replace_uses_two_distinct_variants():
    group = build_scene_group(test_scene(16), Rng(2), 2, coverage=0.7)
    images = [v.render.image for v in group.variants]
    rng = Rng(5)
    for _ in range(20):
        s = build_training_sample(group, "replace", rng)
        i = next(k for k, im in enumerate(images) if s.input_image is im)
        j = next(k for k, im in enumerate(images) if s.target_image is im)
        assert i != j


def test_replace_needs_two_variants():
    group = build_scene_group(test_scene(16), Rng(2), 1, coverage=0.7)
    with pytest.raises(InsufficientVariantsError):
        build_training_sample(group, "replace", Rng(0))


def test_task_mixture():
    draws = sample_task_mixture(Rng(1), 100_000)
    for name, p in TASK_MIXTURE:
        assert abs(draws.count(name) / len(draws) - p) <= 0.01
    assert len(sample_task_mixture(Rng(1), 1)) == 1
    assert sample_task_mixture(Rng(8), 50) == sample_task_mixture(Rng(8), 50)


def test_mini_manifest_validates(mini_manifest):
    manifest = read_manifest(mini_manifest)
    assert len(manifest.groups) == 24
    assert all(len(g["variants"]) == 8 for g in manifest.groups)
    assert validate_manifest(manifest) == []
    data = json.loads(mini_manifest.read_text())
    assert data["root"] == "." and data["master_seed"] == 7


def test_validate_flags_missing_file(tmp_path, mini_manifest):
    manifest = read_manifest(mini_manifest)
    record = json.loads(json.dumps(manifest.groups[0]))
    record["variants"][0]["files"]["image"] = "nowhere/image.f32"
    manifest.groups = [record]
    assert any("missing" in p for p in validate_manifest(manifest))
