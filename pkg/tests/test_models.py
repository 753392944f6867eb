import numpy as np
import pytest
import torch

from dckd.errors import ShapeError, StructureError
from dckd.models import (STUDENT_ARCH, TEACHER_ARCH, ArchSpec, ParamVector, RestorationModel, extract_params, freeze,
                         inject_params, load_checkpoint, param_count, save_checkpoint)


def test_identity_model_passes_input_through():
    model = RestorationModel(ArchSpec(depth=0, upscale=1))
    x = torch.rand(2, 3, 7, 5)
    assert torch.equal(model(x), x)


def test_toy_student_shape():
    # 2 convs: 3->8, 8->3*2*2, then pixel shuffle by 2
    model = RestorationModel(STUDENT_ARCH)
    assert [tuple(l.weight.shape) for l in model.layers] == [(8, 3, 3, 3), (12, 8, 3, 3)]
    out = model(torch.rand(1, 3, 16, 16))
    assert out.shape == (1, 3, 32, 32)
    assert torch.isfinite(out).all()


@pytest.mark.parametrize("h,w,r", [(5, 7, 2), (8, 8, 3), (1, 1, 4), (6, 4, 1)])
def test_scale_contract(h, w, r):
    model = RestorationModel(ArchSpec(width=4, depth=3, upscale=r))
    assert model(torch.rand(2, 3, h, w)).shape == (2, 3, r * h, r * w)


def test_rejects_bad_input():
    model = RestorationModel(STUDENT_ARCH)
    with pytest.raises(ShapeError):
        model(torch.rand(1, 4, 8, 8))
    with pytest.raises(ShapeError):
        model(torch.rand(3, 8, 8))


def test_forward_is_deterministic():
    model = RestorationModel(TEACHER_ARCH, seed=3)
    x = torch.rand(2, 3, 9, 9)
    assert torch.equal(model(x), model(x))


def test_seeded_init_reproducible():
    a, b = RestorationModel(STUDENT_ARCH, seed=5), RestorationModel(STUDENT_ARCH, seed=5)
    assert extract_params(a).equal(extract_params(b))
    assert not extract_params(a).equal(extract_params(RestorationModel(STUDENT_ARCH, seed=6)))


def test_extract_inject_roundtrip():
    model = RestorationModel(STUDENT_ARCH, seed=1)
    x = torch.rand(1, 3, 6, 6)
    before = model(x)
    p = extract_params(model)
    inject_params(model, p)
    assert extract_params(model).equal(p)
    assert torch.equal(model(x), before)


def test_extract_is_a_deep_copy():
    model = RestorationModel(STUDENT_ARCH, seed=1)
    p = extract_params(model)
    with torch.no_grad():
        model.layers[0].weight.add_(1.0)
    assert not extract_params(model).equal(p)
    assert torch.equal(p.as_dict()["layers.0.weight"] + 1.0, model.layers[0].weight)


def test_one_optimizer_step_changes_params():
    # oracle: a 1-parameter linear model y = w*x with loss (w*x - 1)^2 at x=1, w=0 has gradient -2
    model = RestorationModel(ArchSpec(channels=1, depth=1, upscale=1, kernel_size=1, residual=False))
    inject_params(model, ParamVector([("layers.0.weight", torch.zeros(1, 1, 1, 1)), ("layers.0.bias", torch.zeros(1))]))
    before = extract_params(model)
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    loss = (model(torch.ones(1, 1, 1, 1)) - 1).pow(2).sum()
    loss.backward()
    assert model.layers[0].weight.grad.item() == pytest.approx(-2.0)
    opt.step()
    after = extract_params(model)
    assert not after.equal(before)
    assert after.as_dict()["layers.0.weight"].item() == pytest.approx(0.2)


def test_zero_weights_leave_the_bias():
    # a single 1x1 conv without skip is a per-pixel linear map W x + b
    model = RestorationModel(ArchSpec(depth=1, upscale=1, kernel_size=1, residual=False))
    bias = torch.tensor([0.1, -0.2, 0.3])
    inject_params(model, ParamVector([("layers.0.weight", torch.zeros(3, 3, 1, 1)), ("layers.0.bias", bias)]))
    out = model(torch.rand(2, 3, 4, 4))
    assert torch.equal(out, bias.view(1, 3, 1, 1).expand(2, 3, 4, 4))
    inject_params(model, ParamVector([("layers.0.weight", torch.zeros(3, 3, 1, 1)), ("layers.0.bias", torch.zeros(3))]))
    assert torch.equal(model(torch.rand(1, 3, 2, 2)), torch.zeros(1, 3, 2, 2))


def test_inject_teacher_params_into_same_spec():
    a, b = RestorationModel(TEACHER_ARCH, seed=1), RestorationModel(TEACHER_ARCH, seed=2)
    inject_params(b, extract_params(a))
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(a(x), b(x))


def test_inject_mismatch_names_offender():
    student = RestorationModel(STUDENT_ARCH)
    with pytest.raises(StructureError, match="layers.0.weight"):
        inject_params(student, extract_params(RestorationModel(TEACHER_ARCH)))
    p = extract_params(student)
    with pytest.raises(StructureError, match="layers.1.bias"):
        inject_params(student, ParamVector(p.entries[:-1]))


def test_freeze_blocks_gradients_and_updates():
    teacher = freeze(RestorationModel(TEACHER_ARCH))
    student = RestorationModel(STUDENT_ARCH)
    before = extract_params(teacher)
    opt = torch.optim.Adam(student.parameters(), lr=1e-2)
    for _ in range(100):
        x = torch.rand(2, 3, 6, 6)
        loss = (student(x) - teacher(x)).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert extract_params(teacher).equal(before)
    assert all(p.grad is None for p in teacher.parameters())
    assert not teacher.trainable


def test_param_count_matches_module():
    for spec in (STUDENT_ARCH, TEACHER_ARCH, ArchSpec(depth=1), ArchSpec(depth=0)):
        model = RestorationModel(spec)
        assert param_count(spec) == sum(p.numel() for p in model.parameters())
    # hand count: 3*8*9+8 + 8*12*9+12
    assert param_count(STUDENT_ARCH) == 224 + 876


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = RestorationModel(TEACHER_ARCH, seed=4)
    path = save_checkpoint(tmp_path / "m.npz", model, {"iteration": 12, "seed": 4})
    loaded, meta = load_checkpoint(path)
    assert loaded.spec == model.spec
    assert meta["iteration"] == 12 and meta["seed"] == 4
    assert extract_params(loaded).equal(extract_params(model))
    with np.load(path) as a, np.load(save_checkpoint(tmp_path / "m2.npz", loaded, {"iteration": 12, "seed": 4})) as b:
        assert a.files == b.files
        for k in a.files:
            assert np.array_equal(a[k], b[k])


def test_checkpoint_float64(tmp_path):
    model = RestorationModel(STUDENT_ARCH, dtype=torch.float64)
    loaded, _ = load_checkpoint(save_checkpoint(tmp_path / "m.npz", model))
    assert next(loaded.parameters()).dtype == torch.float64
    assert extract_params(loaded).equal(extract_params(model))


def test_freeze_after_training_clears_gradients():
    model = RestorationModel(STUDENT_ARCH)
    model(torch.rand(1, 3, 4, 4)).sum().backward()
    assert any(p.grad is not None for p in model.parameters())
    freeze(model)
    assert all(p.grad is None and not p.requires_grad for p in model.parameters())
