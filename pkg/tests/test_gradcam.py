import numpy as np
import pytest
import torch

from pmg.errors import StageIndexError
from pmg.gradcam import class_score, grad_cam, save_overlay
from pmg.model import ArchConfig, build_model

from gradcheck import rel_err


@pytest.fixture
def image():
    return torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(4), dtype=torch.float64)


@pytest.mark.parametrize("stage", [2, 3])
def test_map_range_and_determinism(tiny_model, image, stage):
    a = grad_cam(tiny_model, image, stage)
    b = grad_cam(tiny_model, image, stage)
    assert np.array_equal(a.heatmap, b.heatmap)
    assert a.heatmap.min() >= 0 and a.heatmap.max() <= 1
    assert a.heatmap.max() == 1.0 or not a.heatmap.any()


def test_channel_weights_match_finite_differences(tiny_model, image):
    res = grad_cam(tiny_model, image, 2, class_index=1)
    feat = torch.from_numpy(res.feature)[None].clone()
    h, w = feat.shape[2:]
    eps = 1e-5
    errs = []
    with torch.no_grad():
        for c in range(feat.shape[1]):
            # d score / d F[c, i, j], averaged over positions
            g = 0.0
            for i in range(h):
                for j in range(w):
                    up, down = feat.clone(), feat.clone()
                    up[0, c, i, j] += eps
                    down[0, c, i, j] -= eps
                    s_up = class_score(tiny_model, up, 2)[0, 1].item()
                    s_down = class_score(tiny_model, down, 2)[0, 1].item()
                    g += (s_up - s_down) / (2 * eps)
            errs.append(rel_err(res.channel_weights[c], g / (h * w)))
    assert max(errs) < 1e-4


def test_single_channel_positive_weight_is_normalized_relu():
    model = build_model(ArchConfig(num_stages=1, supervised_stages=1, num_classes=2, vector_dim=4, channels=(1,)), seed=0).double()
    x = torch.randn(3, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    res = grad_cam(model, x, 1, class_index="predicted")
    f = res.feature[0]
    if res.channel_weights[0] <= 0:
        res = grad_cam(model, x, 1, class_index=1 - res.class_index)
    assert res.channel_weights[0] > 0
    expected = np.maximum(f, 0)
    np.testing.assert_allclose(res.heatmap, expected / expected.max(), rtol=1e-12)


def test_invalid_stage(tiny_model, image):
    with pytest.raises(StageIndexError):
        grad_cam(tiny_model, image, 1)


def test_concat_source(tiny_model, image):
    res = grad_cam(tiny_model, image, 2, source="concat")
    assert res.heatmap.shape == (2, 2)  # 8 -> 4 -> 2


def test_overlay_file(tmp_path, tiny_model, image):
    res = grad_cam(tiny_model, image, 2)
    rgb = np.zeros((8, 8, 3), dtype=np.uint8)
    assert save_overlay(rgb, res.heatmap, tmp_path / "o.png").exists()
