import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from delt.core import (ConfigError, DatasetProfile, DistilledDataset, EvalConfig, IntegrityError, RecoveryConfig,
                       SyntheticSample, get_profile, load_distilled, load_soft_labels, quantize_image,
                       save_distilled, validate_recovery_config, verify_distilled)


def make_dataset(profile, ipc=2, cfg=None, seed=0):
    gen = torch.Generator().manual_seed(seed)
    samples = []
    for c in range(profile.num_classes):
        for i in range(ipc):
            b = 0 if cfg is None else i % cfg.num_subbatches
            iters = 0 if cfg is None else cfg.max_iterations - b * cfg.round_iterations
            img = torch.randn(profile.image_shape, generator=gen)
            samples.append(SyntheticSample(img, c, i, b, iters, "gaussian"))
    meta = {"ipc": ipc}
    if cfg is not None:
        meta["recovery_config"] = cfg.to_dict()
    return DistilledDataset(profile, tuple(samples), meta)


def test_profiles_have_expected_shapes():
    assert get_profile("cifar10").image_shape == (3, 32, 32)
    assert get_profile("imagenet1k").image_shape == (3, 224, 224)
    assert get_profile("tiny_imagenet").num_classes == 200
    with pytest.raises(ConfigError):
        get_profile("mnist9")


@pytest.mark.parametrize("kw", [{"num_classes": 1}, {"resolution": 0}, {"randaugment_mstd": 0.0}])
def test_profile_invariants(kw):
    base = dict(name="x", num_classes=10, resolution=8, channel_mean=(0.5,), channel_std=(0.5,))
    base.update(kw)
    with pytest.raises(ConfigError):
        DatasetProfile(**base)


def test_normalize_roundtrip(tiny_profile):
    x = torch.rand(2, *tiny_profile.image_shape)
    torch.testing.assert_close(tiny_profile.denormalize(tiny_profile.normalize(x)), x)


def test_profile_dict_roundtrip():
    p = get_profile("cifar10")
    assert DatasetProfile.from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_default_recovery_config_is_valid():
    cfg = RecoveryConfig()
    validate_recovery_config(cfg)
    assert (cfg.max_iterations, cfg.round_iterations, cfg.alpha_bn, cfg.learning_rate) == (4000, 500, 0.01, 0.25)
    assert (cfg.adam_beta1, cfg.adam_beta2, cfg.synthesis_batch_size) == (0.5, 0.9, 100)


@pytest.mark.parametrize(
    "kw, msg",
    [
        ({"num_subbatches": 0}, "num_subbatches"),
        ({"ipc": 4, "num_subbatches": 5}, "exceeds ipc"),
        ({"ipc": 8, "num_subbatches": 8, "max_iterations": 3000, "round_iterations": 500}, "no iterations"),
        ({"crop_scale_min": 0.0}, "crop"),
        ({"crop_scale_min": 0.6, "crop_scale_max": 0.5}, "crop"),
        ({"crop_scale_max": 1.2}, "crop"),
        ({"alpha_bn": -0.1}, "alpha_bn"),
        ({"init_mode": "zeros"}, "init_mode"),
        ({"selection": "middle"}, "selection"),
        ({"ordering": "zigzag"}, "ordering"),
        ({"lr_schedule": "step"}, "lr_schedule"),
    ],
)
def test_recovery_config_rejects(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        validate_recovery_config(RecoveryConfig(**kw))


@given(
    ipc=st.integers(1, 64), m=st.integers(1, 12), mi=st.integers(1, 5000), ri=st.integers(0, 1000),
    lo=st.floats(-0.5, 1.5), hi=st.floats(-0.5, 1.5), alpha=st.floats(-1, 1),
)
def test_recovery_config_validation_is_exact(ipc, m, mi, ri, lo, hi, alpha):
    kw = dict(ipc=ipc, num_subbatches=m, max_iterations=mi, round_iterations=ri,
              crop_scale_min=lo, crop_scale_max=hi, alpha_bn=alpha)
    ok = m <= ipc and mi - (m - 1) * ri >= 1 and 0 < lo <= hi <= 1 and alpha >= 0
    if ok:
        validate_recovery_config(RecoveryConfig(**kw))
    else:
        # construction validates eagerly
        with pytest.raises(ConfigError):
            RecoveryConfig(**kw)


def test_recovery_config_roundtrip():
    cfg = RecoveryConfig(ipc=50, num_subbatches=5, seed=3)
    assert RecoveryConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("ipc, bs", [(1, 10), (10, 50), (50, 100)])
def test_eval_batch_size_by_ipc(ipc, bs):
    cfg = EvalConfig.for_run(ipc, "resnet18")
    assert cfg.batch_size == bs
    assert (cfg.learning_rate, cfg.weight_decay, cfg.epochs) == (0.001, 0.01, 300)


def test_eval_mobilenet_lr():
    assert EvalConfig.for_run(10, "mobilenet_v2_small").learning_rate == 0.0025


def test_eval_config_rejects():
    with pytest.raises(ConfigError):
        EvalConfig(batch_size=0)
    with pytest.raises(ConfigError):
        EvalConfig(augmentations=("cutmix",))
    with pytest.raises(ConfigError):
        EvalConfig(optimizer="sgd")


def test_validate_wrong_count(tiny_profile):
    ds = make_dataset(tiny_profile, ipc=10)
    short = DistilledDataset(tiny_profile, ds.samples[1:], ds.run_metadata)
    with pytest.raises(ConfigError, match="class 0 has 9 samples"):
        short.validate()


def test_validate_iteration_count(tiny_profile):
    cfg = RecoveryConfig(ipc=2, num_subbatches=2, max_iterations=10, round_iterations=4)
    ds = make_dataset(tiny_profile, 2, cfg)
    ds.validate()
    s = ds.samples[1]
    bad = SyntheticSample(s.image, s.class_id, s.ipc_index, s.subbatch_index, 10, s.init_provenance)
    broken = DistilledDataset(tiny_profile, (bad,) + ds.samples[2:] + ds.samples[:1], ds.run_metadata)
    with pytest.raises(ConfigError, match="ipc_index 1"):
        broken.validate()


def test_validate_shape(tiny_profile):
    ds = make_dataset(tiny_profile, 1)
    s = ds.samples[0]
    bad = SyntheticSample(torch.zeros(3, 4, 4), s.class_id, s.ipc_index)
    with pytest.raises(ConfigError, match="shape"):
        DistilledDataset(tiny_profile, (bad,) + ds.samples[1:], ds.run_metadata).validate()


def test_save_load_roundtrip(tmp_path, tiny_profile):
    cfg = RecoveryConfig(ipc=2, num_subbatches=2, max_iterations=10, round_iterations=4)
    ds = make_dataset(tiny_profile, 2, cfg)
    digest = save_distilled(ds, tmp_path / "run")
    assert (tmp_path / "run" / "images" / "00003" / "0001.png").is_file()
    loaded = load_distilled(tmp_path / "run")
    expected = DistilledDataset(tiny_profile, tuple(
        SyntheticSample(quantize_image(s.image, tiny_profile), s.class_id, s.ipc_index, s.subbatch_index,
                        s.iterations_trained, s.init_provenance) for s in ds.samples), ds.run_metadata)
    assert loaded == expected
    # a second save of the loaded data is byte-identical
    assert save_distilled(loaded, tmp_path / "run2") == digest


def test_same_digest_twice(tmp_path, tiny_profile):
    ds = make_dataset(tiny_profile)
    assert save_distilled(ds, tmp_path / "a") == save_distilled(ds, tmp_path / "b")


def test_quantization_error_bound(tmp_path, tiny_profile):
    ds = make_dataset(tiny_profile, 3)
    save_distilled(ds, tmp_path / "r")
    loaded = load_distilled(tmp_path / "r")
    for a, b in zip(ds.samples, loaded.samples):
        pa = tiny_profile.denormalize(a.image).clamp(0, 1)
        pb = tiny_profile.denormalize(b.image)
        assert float((pa - pb).abs().max()) <= 1 / 255 + 1e-6


def test_tampered_image_detected(tmp_path, tiny_profile):
    save_distilled(make_dataset(tiny_profile), tmp_path / "r")
    png = tmp_path / "r" / "images" / "00000" / "0000.png"
    other = tmp_path / "r" / "images" / "00001" / "0000.png"
    png.write_bytes(other.read_bytes())
    with pytest.raises(IntegrityError, match="digest mismatch"):
        load_distilled(tmp_path / "r")


def test_empty_directory_is_not_a_dataset(tmp_path):
    with pytest.raises(IntegrityError, match="not a distilled dataset"):
        load_distilled(tmp_path)


def test_refuses_overwrite(tmp_path, tiny_profile):
    ds = make_dataset(tiny_profile)
    save_distilled(ds, tmp_path / "r")
    with pytest.raises(FileExistsError):
        save_distilled(ds, tmp_path / "r")
    save_distilled(ds, tmp_path / "r", overwrite=True)


def test_invalid_dataset_leaves_no_files(tmp_path, tiny_profile):
    ds = make_dataset(tiny_profile, 2)
    bad = DistilledDataset(tiny_profile, ds.samples[:-1], ds.run_metadata)
    with pytest.raises(ConfigError):
        save_distilled(bad, tmp_path / "r")
    assert list(tmp_path.iterdir()) == []


def test_soft_label_files(tmp_path, tiny_profile):
    ds = make_dataset(tiny_profile, 2)
    rng = np.random.default_rng(0)
    labels = {c: rng.random((2, tiny_profile.num_classes)).astype(np.float32) for c in range(4)}
    save_distilled(ds, tmp_path / "r", soft_labels=labels)
    raw = (tmp_path / "r" / "labels" / "00002.f32").read_bytes()
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(2, 4), labels[2])
    back = load_soft_labels(tmp_path / "r")
    for c in labels:
        np.testing.assert_array_equal(back[c], labels[c])
    verify_distilled(tmp_path / "r")


def test_logs_do_not_affect_digest(tmp_path, tiny_profile):
    d = save_distilled(make_dataset(tiny_profile), tmp_path / "r")
    (tmp_path / "r" / "logs").mkdir()
    (tmp_path / "r" / "logs" / "g.jsonl").write_text("{}\n")
    assert verify_distilled(tmp_path / "r") == d


@given(st.lists(st.floats(-4, 4), min_size=3 * 8 * 8, max_size=3 * 8 * 8))
def test_quantize_is_idempotent(values):
    p = DatasetProfile("tiny", 4, 8, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    img = torch.tensor(values, dtype=torch.float32).view(3, 8, 8)
    q = quantize_image(img, p)
    assert torch.equal(quantize_image(q, p), q)
