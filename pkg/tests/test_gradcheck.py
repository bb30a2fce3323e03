"""The finite-difference suite itself (a quick pass; the full run is in the acceptance suite)."""
import numpy as np

from cocoreco import gradcheck
from cocoreco import tensor as T


def test_every_case_passes_quickly():
    names = [n for n in gradcheck.CASES if n != "composite_total_loss"]
    results = gradcheck.run_suite(instances=3, seed=1, names=names)
    bad = {r.name: r.max_error for r in results if not r.passed}
    assert not bad


def test_composite_instance():
    (r,) = gradcheck.run_suite(instances=1, seed=2, names=["composite_total_loss"])
    assert r.passed


def test_kink_distance_sees_relu_inputs():
    x = T.Tensor(np.array([0.5, -1e-6, 2.0]))
    assert gradcheck.kink_distance(lambda x: T.relu(x), [x]) == 1e-6


def test_suite_covers_every_differentiable_op():
    expected = {
        "conv2d", "pool2d_max", "pool2d_avg", "upsample_bilinear2d", "dense", "elementwise_add", "relu",
        "scale_channels", "softmax_cross_entropy", "mse_loss", "causality_map", "attention_weights",
        "apply_cab", "minibatch_alignment_loss", "project_forward", "project_backward", "composite_total_loss",
    }
    assert expected <= set(gradcheck.CASES)
