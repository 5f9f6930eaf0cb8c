import copy

import pytest
import torch

import delt.relabel as RL
from delt.core import EvalConfig, get_profile
from delt.models import build_model
from delt.relabel import (Augmenter, append_result, dataset_soft_labels, evaluate_top1, post_train,
                          random_real_subset, read_results, soft_labels, soft_cross_entropy)
from delt.teacher import TeacherSnapshot, predict


@pytest.fixture(scope="module")
def real_set(digits_train):
    return random_real_subset(digits_train.images, digits_train.labels, digits_train.profile, 2, seed=0)


def test_uniform_logits(tiny_teacher, tiny_profile):
    model = copy.deepcopy(tiny_teacher.model)
    torch.nn.init.zeros_(model.fc.weight)
    torch.nn.init.zeros_(model.fc.bias)
    t = TeacherSnapshot("z", model, 4, tiny_profile)
    p = soft_labels(t, torch.randn(3, 3, 8, 8))
    torch.testing.assert_close(p, torch.full((3, 4), 0.25))


def test_rows_are_distributions(tiny_teacher):
    x = torch.randn(16, 3, 8, 8)
    p = soft_labels(tiny_teacher, x)
    assert float((p.sum(1) - 1).abs().max()) < 1e-6
    assert bool(((p > 0) & (p < 1)).all())
    assert torch.equal(p.argmax(1), predict(tiny_teacher.model, x).argmax(1))


def test_soft_cross_entropy_matches_hard_ce_for_one_hot():
    logits = torch.randn(5, 7)
    y = torch.randint(0, 7, (5,))
    onehot = torch.nn.functional.one_hot(y, 7).float()
    torch.testing.assert_close(soft_cross_entropy(logits, onehot), torch.nn.functional.cross_entropy(logits, y))


def test_random_real_subset(digits_train, real_set):
    real_set.validate()
    assert len(real_set.samples) == 20
    again = random_real_subset(digits_train.images, digits_train.labels, digits_train.profile, 2, seed=0)
    assert again == real_set
    other = random_real_subset(digits_train.images, digits_train.labels, digits_train.profile, 2, seed=1)
    assert other != real_set


def test_dataset_soft_labels(digits_teacher, real_set):
    labels = dataset_soft_labels(real_set, digits_teacher)
    assert sorted(labels) == list(range(10))
    assert labels[3].shape == (2, 10)
    assert abs(float(labels[3].sum()) - 2.0) < 1e-5


def test_zero_epochs_is_untrained(digits_teacher, real_set, digits_val):
    res = post_train(real_set, "convnet3_w32", digits_teacher, EvalConfig(epochs=0, batch_size=10),
                     digits_val.normalized(), digits_val.labels)
    assert res.curve[0][0] == 0 and res.final_top1 < 0.3


def test_class_count_mismatch(tiny_teacher, real_set):
    with pytest.raises(ValueError, match="classes"):
        post_train(real_set, "convnet3_w32", tiny_teacher, EvalConfig(epochs=1))


def test_teacher_and_student_see_the_same_views(digits_teacher, real_set, monkeypatch):
    seen_teacher, seen_student = [], []
    real_soft = RL.soft_labels

    def spy_soft(t, x):
        seen_teacher.append(x.clone())
        return real_soft(t, x)

    def spy_build(*a, **k):
        m = build_model(*a, **k)
        m.register_forward_pre_hook(lambda mod, inp: seen_student.append(inp[0].detach().clone()) if mod.training
                                    else None)
        return m

    monkeypatch.setattr(RL, "soft_labels", spy_soft)
    monkeypatch.setattr(RL, "build_model", spy_build)
    post_train(real_set, "convnet3_w32", digits_teacher, EvalConfig(epochs=2, batch_size=8))
    assert len(seen_teacher) == len(seen_student) == 6
    for a, b in zip(seen_teacher, seen_student):
        assert torch.equal(a, b)
    # augmentation actually changed the images
    assert not torch.equal(seen_teacher[0], seen_teacher[3])


def test_never_reads_training_split(digits_teacher, real_set, monkeypatch):
    import delt.data

    def forbidden(*a, **k):
        raise AssertionError("training split accessed")

    monkeypatch.setattr(delt.data, "load_split", forbidden)
    monkeypatch.setattr(delt.data, "load_digits_split", forbidden)
    post_train(real_set, "convnet3_w32", digits_teacher, EvalConfig(epochs=1, batch_size=10))


def test_post_train_is_deterministic(digits_teacher, real_set):
    cfg = EvalConfig(epochs=2, batch_size=10, seed=4)
    a = post_train(real_set, "convnet3_w32", digits_teacher, cfg).student
    b = post_train(real_set, "convnet3_w32", digits_teacher, cfg).student
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_augmenter_is_seeded():
    p = get_profile("digits")
    aug = Augmenter(EvalConfig(), p)
    x = torch.randn(4, *p.image_shape)
    a = aug(x, torch.Generator().manual_seed(1))
    b = aug(x, torch.Generator().manual_seed(1))
    assert a.shape == x.shape and torch.equal(a, b)


class Constant(torch.nn.Module):
    def __init__(self, c, n):
        super().__init__()
        self.c, self.n = c, n
        self.w = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        out = torch.zeros(len(x), self.n)
        out[:, self.c] = 1
        return out + self.w


def test_constant_student_accuracy_is_class_prior(digits_val):
    acc = evaluate_top1(Constant(3, 10), digits_val.normalized(), digits_val.labels)
    assert acc == pytest.approx(float((digits_val.labels == 3).float().mean()))
    assert 0 <= acc <= 1


def test_empty_split():
    with pytest.raises(ValueError):
        evaluate_top1(Constant(0, 10), torch.empty(0, 3, 16, 16), torch.empty(0, dtype=torch.long))


def test_results_table(tmp_path):
    append_result(tmp_path / "r.jsonl", {"top1": 40.0, "seed": 0})
    append_result(tmp_path / "r.jsonl", {"top1": 41.0, "seed": 1})
    assert [r["top1"] for r in read_results(tmp_path / "r.jsonl")] == [40.0, 41.0]
