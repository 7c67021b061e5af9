import numpy as np

from xmdistill.gradcheck import LOSS_NAMES, analytic_grads, build_micro, check_model, kink_margin, rel_error


def test_rel_error_definition():
    assert rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) == 0.2
    assert rel_error(np.array([1e-9]), np.array([0.0])) == 0.1


def test_micro_batches_avoid_relu_kinks():
    model, batch = build_micro(5)
    assert kink_margin(model, batch) > 1e-3


def test_one_config_passes_for_each_role():
    for role in ("audio->visual", "visual->audio"):
        report = check_model(*build_micro(11, role=role))
        assert set(report.errors) == set(LOSS_NAMES)
        assert report.ok(), report.errors


def test_gradcheck_catches_a_broken_gradient():
    model, batch = build_micro(12)
    grads = analytic_grads(model, batch, "total")
    key = next(iter(grads))
    from xmdistill.gradcheck import numeric_grads
    num = numeric_grads(model, batch)["total"]
    grads[key] = grads[key] * 1.01
    a = np.concatenate([g.ravel() for g in grads.values()])
    n = np.concatenate([num[k].ravel() for k in grads])
    assert rel_error(a, n) > 1e-4
