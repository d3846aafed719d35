import os

import numpy as np
import pytest

from brainfed.synthdata import (
    DatasetFormatError,
    SpecError,
    SyntheticSpec,
    canary_values,
    decode_corpus,
    encode_corpus,
    expected_file_size,
    find_canaries,
    generate,
    read_dataset,
    write_dataset,
)

SMALL = SyntheticSpec(
    num_subjects=2, voxel_dims=(10, 12), train_per_subject=20, shared_test_count=6, canaries=4
)


def test_default_shapes():
    c = generate()
    assert [s.input_dim for s in c.subjects] == [48, 56, 64, 72]
    assert all(s.sample_count == 512 for s in c.subjects)
    assert c.test_image.shape == (128, 32) and c.test_text.shape == (128, 24)


def test_shared_test_targets_depend_only_on_latent():
    spec = SyntheticSpec(num_subjects=2, voxel_dims=(10, 10), noise_sigma=0.0, canaries=0,
                         train_per_subject=30, shared_test_count=8)
    c = generate(spec)
    assert c.latents["test"].shape == (8, spec.latent_dim)
    # same latents, different mixing matrices: targets shared, inputs differ
    assert not np.array_equal(c.subjects[0].test_inputs, c.subjects[1].test_inputs)
    other = generate(SyntheticSpec(**{**spec.__dict__, "data_seed": spec.data_seed}))
    assert np.array_equal(other.test_image, c.test_image)


def test_signal_scale_shrinks_only_the_stimulus_part():
    base = SyntheticSpec(num_subjects=1, voxel_dims=(10,), noise_sigma=0.0, canaries=0,
                         train_per_subject=50, shared_test_count=4)
    a = generate(base)
    b = generate(SyntheticSpec(**{**base.__dict__, "signal_scale": 0.5}))
    xa, xb = a.subjects[0].train_inputs, b.subjects[0].train_inputs
    # offsets b_s are untouched, so centred inputs scale exactly by the factor
    assert np.allclose(xb - xb.mean(axis=0), 0.5 * (xa - xa.mean(axis=0)))
    assert np.array_equal(a.test_image, b.test_image)
    with pytest.raises(SpecError):
        generate(SyntheticSpec(**{**base.__dict__, "signal_scale": 0.0}))


def test_generation_is_deterministic():
    assert generate(SMALL).equals(generate(SMALL))
    assert not generate(SMALL).equals(generate(SyntheticSpec(**{**SMALL.__dict__, "data_seed": 99})))


def test_latent_linearly_decodable():
    spec = SyntheticSpec(num_subjects=1, voxel_dims=(20,), train_per_subject=1000, noise_sigma=0.01,
                         canaries=0, shared_test_count=2)
    c = generate(spec)
    x = c.subjects[0].train_inputs
    z = c.latents["train"][c.latents["train_ids"][0]]
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, z, rcond=None)
    resid = z - design @ coef
    r2 = 1.0 - resid.var(axis=0).sum() / z.var(axis=0).sum()
    assert r2 > 0.99


def test_train_latents_disjoint():
    c = generate()
    seen = set()
    for ids in c.latents["train_ids"].values():
        assert seen.isdisjoint(ids.tolist())
        seen.update(ids.tolist())


def test_invalid_spec():
    with pytest.raises(SpecError):
        generate(SyntheticSpec(num_subjects=1, voxel_dims=(4,), latent_dim=8))
    with pytest.raises(SpecError):
        generate(SyntheticSpec(num_subjects=2, voxel_dims=(48,)))


def test_canaries_embedded():
    c = generate(SMALL)
    found = find_canaries(c)
    assert sorted(v for _, _, v in found) == sorted(canary_values(4).tolist())


def test_roundtrip_and_size(tmp_path):
    c = generate()
    path = tmp_path / "d.bgds"
    write_dataset(path, c)
    assert os.path.getsize(path) == expected_file_size(c)
    assert read_dataset(path).equals(c)


def test_file_size_hand_count():
    c = generate(SMALL)
    header = 4 + 2 + 2 + 2 * 10 + 12
    floats = 20 * (10 + 32 + 24) + 20 * (12 + 32 + 24) + 6 * 10 + 6 * 12 + 6 * (32 + 24)
    assert len(encode_corpus(c)) == header + 8 * floats


def test_bad_magic_and_truncation():
    data = bytearray(encode_corpus(generate(SMALL)))
    with pytest.raises(DatasetFormatError):
        decode_corpus(bytes(data[:-8]))
    data[0:4] = b"XXXX"
    with pytest.raises(DatasetFormatError, match="magic"):
        decode_corpus(bytes(data))
