import numpy as np
import pytest
import torch

from pmg.data import SyntheticSpec, make_synthetic
from pmg.errors import EvaluationError
from pmg.inference import combine, evaluate, predict


def test_worked_example_c1_differs_from_c2():
    c1, c2 = combine([np.array([0.6, 0.4]), np.array([0.3, 0.7])], np.array([0.55, 0.45]))
    assert (c1, c2) == (0, 1)


def test_one_hot_sources():
    k = np.eye(6)[4]
    assert combine([k, k, k], k) == (4, 4)


def test_ties_lowest_index():
    assert combine([np.array([0.5, 0.5])], np.array([0.5, 0.5])) == (0, 0)


def test_brute_force_sum():
    rng = np.random.default_rng(0)
    for _ in range(200):
        probs = rng.dirichlet(np.ones(10), size=4)
        _, c2 = combine(list(probs[:3]), probs[3])
        tot = [sum(probs[s][j] for s in range(4)) for j in range(10)]
        assert c2 == max(range(10), key=lambda j: (tot[j], -j))


def test_predict_shapes_and_rule(desk_model, desk_batch):
    pred = predict(desk_model, desk_batch[0])
    assert pred.c1.shape == (4,)
    assert set(pred.per_source_probs) == {3, 4, 5, "concat"}
    np.testing.assert_array_equal(pred.c1, pred.concat_probs.argmax(1))
    total = pred.concat_probs + sum(pred.stage_probs.values())
    np.testing.assert_array_equal(pred.c2, total.argmax(1))
    logit = predict(desk_model, desk_batch[0], score_mode="logit")
    np.testing.assert_array_equal(logit.c1, pred.c1)


def test_evaluate_repeatable_and_empty(desk_model):
    ds = make_synthetic(SyntheticSpec(samples_per_class=2))
    a = evaluate(desk_model, ds)
    assert a.as_row() == evaluate(desk_model, ds).as_row()
    assert a.confusion_c1.sum() == len(ds) == a.confusion_c2.sum()
    assert 0 <= a.accuracy_c2 <= 1
    with pytest.raises(EvaluationError):
        evaluate(desk_model, ds.subset([]))


def test_single_correct_sample_full_accuracy(desk_model):
    ds = make_synthetic(SyntheticSpec(samples_per_class=1))
    # relabel one image with whatever every head agrees on, forcing agreement
    desk_model.eval()
    with torch.no_grad():
        for head in [desk_model.head(l) for l in desk_model.supervised] + [desk_model.head_concat]:
            head.fc2.weight.zero_()
            head.fc2.bias.zero_()
            head.fc2.bias[3] = 1.0
    one = ds.subset([0])
    one.items = [(one.items[0][0], 3)]
    rep = evaluate(desk_model, one)
    assert rep.accuracy_c1 == rep.accuracy_c2 == 1.0
    assert all(a == 1.0 for a in rep.stage_accuracy.values())
