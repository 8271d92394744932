"""
Gradient-check suite.

Every check builds a small seeded instance, reduces the layer output to a
scalar by projecting it onto a fixed random tensor, and compares the
analytic backward pass with central finite differences. Layer checks use a
1e-6 tolerance, end-to-end checks 1e-5.
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional

import torch

from app.core.errors import ConfigurationError
from app.kernels.activations import relu, relu_backward, sigmoid, sigmoid_backward
from app.kernels.conv import ConvParams, DeconvParams, conv2d, conv2d_backward, deconv2d, deconv2d_backward
from app.kernels.gradcheck import grad_check
from app.kernels.linear import fully_connected, fully_connected_backward
from app.kernels.losses import smooth_l1, softmax_cross_entropy
from app.kernels.tensor import default_dtype, make_generator
from app.models.aqm import AqmParams, SeBlockParams, aqm_backward, aqm_forward_trace, se_block_backward, se_block_forward
from app.models.backbone import build_toy_backbone
from app.models.detector import LffnDetector
from app.models.fusion import (
    FusionParams,
    PyramidInputs,
    build_pyramid_backward,
    build_pyramid_forward,
    expand_compress_backward,
    expand_compress_forward,
)
from app.models.head import HeadOutput, HeadParams, head_backward, head_forward_trace
from app.schemas.config import AblationMode, BackboneConfig, FusionConfig, PoolMode, RunConfig
from app.schemas.reports import GradCheckReport

logger = logging.getLogger(__name__)

LAYER_TOLERANCE = 1e-6
END_TO_END_TOLERANCE = 1e-5

CheckFn = Callable[[torch.Generator], GradCheckReport]


def _randn(shape, generator: torch.Generator, scale: float = 1.0) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=default_dtype()) * scale


def _project(tensors: Iterable[torch.Tensor], weights: Iterable[torch.Tensor]) -> float:
    return float(sum((t * w).sum() for t, w in zip(tensors, weights)))


def check_conv2d(generator: torch.Generator) -> GradCheckReport:
    x = _randn((2, 4, 5, 5), generator)
    params = ConvParams.initialize(4, 6, 3, generator, stride=2, padding=1, groups=2)
    r = _randn(conv2d(x, params).shape, generator)
    grads = conv2d_backward(x, params, r)
    return grad_check(
        "conv2d",
        lambda: _project([conv2d(x, params)], [r]),
        {"input": x, "weight": params.weight, "bias": params.bias},
        {"input": grads.input, "weight": grads.weight, "bias": grads.bias},
        tolerance=LAYER_TOLERANCE,
    )


def check_deconv2d(generator: torch.Generator) -> GradCheckReport:
    x = _randn((1, 3, 3, 4), generator)
    params = DeconvParams.initialize(3, 2, generator)
    r = _randn(deconv2d(x, params).shape, generator)
    grads = deconv2d_backward(x, params, r)
    return grad_check(
        "deconv2d",
        lambda: _project([deconv2d(x, params)], [r]),
        {"input": x, "weight": params.weight, "bias": params.bias},
        {"input": grads.input, "weight": grads.weight, "bias": grads.bias},
        tolerance=LAYER_TOLERANCE,
    )


def check_fully_connected(generator: torch.Generator) -> GradCheckReport:
    v = _randn((4, 6), generator)
    weight = _randn((3, 6), generator)
    bias = _randn((3,), generator)
    r = _randn((4, 3), generator)
    grads = fully_connected_backward(v, weight, bias, r)
    return grad_check(
        "fully_connected",
        lambda: _project([fully_connected(v, weight, bias)], [r]),
        {"input": v, "weight": weight, "bias": bias},
        {"input": grads.input, "weight": grads.weight, "bias": grads.bias},
        tolerance=LAYER_TOLERANCE,
    )


def check_activations(generator: torch.Generator) -> GradCheckReport:
    x = _randn((1, 2, 4, 4), generator)
    # keep relu inputs away from the hinge
    x = torch.where(x.abs() < 0.1, torch.sign(x) * 0.1 + x, x)
    r1 = _randn(x.shape, generator)
    r2 = _randn(x.shape, generator)
    analytic = relu_backward(x, r1) + sigmoid_backward(sigmoid(x), r2)
    return grad_check(
        "relu+sigmoid",
        lambda: _project([relu(x), sigmoid(x)], [r1, r2]),
        {"input": x},
        {"input": analytic},
        tolerance=LAYER_TOLERANCE,
    )


def check_losses(generator: torch.Generator) -> GradCheckReport:
    logits = _randn((5, 4), generator)
    labels = torch.randint(0, 4, (5,), generator=generator)
    pred = _randn((6, 4), generator)
    target = pred + _randn((6, 4), generator, scale=0.4)
    # stay clear of the smooth-L1 transition at |x| = 1
    target = torch.where(((pred - target).abs() - 1.0).abs() < 0.05, pred + 0.5, target)
    _, g_ce = softmax_cross_entropy(logits, labels)
    _, g_l1 = smooth_l1(pred, target)
    return grad_check(
        "softmax_cross_entropy+smooth_l1",
        lambda: softmax_cross_entropy(logits, labels)[0] + smooth_l1(pred, target)[0],
        {"logits": logits, "pred": pred},
        {"logits": g_ce, "pred": g_l1},
        tolerance=LAYER_TOLERANCE,
    )


def check_expand_compress(generator: torch.Generator) -> GradCheckReport:
    x = _randn((1, 4, 3, 3), generator)
    dec = DeconvParams.initialize(4, 4, generator)
    comp = ConvParams.initialize(4, 2, 1, generator)
    trace = expand_compress_forward(x, dec, comp)
    r = _randn(trace.output.shape, generator)
    grads = expand_compress_backward(trace, dec, comp, r)
    return grad_check(
        "expand_compress",
        lambda: _project([expand_compress_forward(x, dec, comp).output], [r]),
        {"input": x, "deconv.weight": dec.weight, "compress.weight": comp.weight, "compress.bias": comp.bias},
        {
            "input": grads.input,
            "deconv.weight": grads.deconv.weight,
            "compress.weight": grads.compress.weight,
            "compress.bias": grads.compress.bias,
        },
        tolerance=LAYER_TOLERANCE,
    )


def _tiny_fusion_config() -> FusionConfig:
    return FusionConfig(output_channels=8, p5_channels=8, topdown_channel_schedule=[6, 4, 2])


def check_pyramid(generator: torch.Generator) -> GradCheckReport:
    config = _tiny_fusion_config()
    inputs = PyramidInputs(*(_randn((1, 3, s, s), generator) for s in (8, 4, 2, 1)))
    params = FusionParams.initialize(config, [3, 3, 3, 3], generator)

    def levels():
        return build_pyramid_forward(inputs, params, config)[0].levels()

    rs = [_randn(t.shape, generator) for t in levels()]
    _, trace = build_pyramid_forward(inputs, params, config)
    c_grads, p_grads = build_pyramid_backward(inputs, trace, params, config, rs)
    tensors = {f"C{i + 2}": t for i, t in enumerate(inputs.levels())}
    tensors.update(params.named_tensors("fusion"))
    analytic = {f"C{i + 2}": g for i, g in enumerate(c_grads)}
    analytic.update(p_grads)
    return grad_check(
        "fusion_pyramid", lambda: _project(levels(), rs), tensors, analytic, tolerance=LAYER_TOLERANCE
    )


def check_aqm(generator: torch.Generator) -> GradCheckReport:
    y = torch.rand((2, 4, 3, 3), generator=generator, dtype=default_dtype()) + 0.1
    params = AqmParams(_randn((4, 4), generator, scale=0.5), PoolMode.EVAL)
    _, trace = aqm_forward_trace(y, params, None)
    r = _randn(y.shape, generator)
    grads = aqm_backward(trace, params, r)
    return grad_check(
        "aqm_eval",
        lambda: _project([aqm_forward_trace(y, params, None)[0]], [r]),
        {"input": y, "weight": params.weight},
        {"input": grads.input, "weight": grads.weight},
        tolerance=LAYER_TOLERANCE,
    )


def check_se_block(generator: torch.Generator) -> GradCheckReport:
    y = _randn((2, 8, 3, 3), generator)
    params = SeBlockParams.initialize(8, 2, generator)
    _, trace = se_block_forward(y, params)
    r = _randn(y.shape, generator)
    grads = se_block_backward(trace, params, r)
    tensors = {"input": y}
    tensors.update(params.named_tensors("se"))
    analytic = {"input": grads.input}
    analytic.update(grads.params)
    return grad_check(
        "se_block", lambda: _project([se_block_forward(y, params)[0]], [r]), tensors, analytic,
        tolerance=LAYER_TOLERANCE,
    )


def check_head(generator: torch.Generator) -> GradCheckReport:
    levels = [_randn((1, 4, s, s), generator) for s in (4, 2)]
    params = HeadParams.initialize(4, 3, 2, generator)

    def outputs():
        return head_forward_trace(levels, params)[0]

    rs = [HeadOutput(_randn(o.logits.shape, generator), _randn(o.deltas.shape, generator)) for o in outputs()]
    _, trace = head_forward_trace(levels, params)
    level_grads, p_grads = head_backward(trace, params, rs)

    def loss():
        return sum(_project([o.logits, o.deltas], [r.logits, r.deltas]) for o, r in zip(outputs(), rs))

    tensors = {f"level{i}": t for i, t in enumerate(levels)}
    tensors.update(params.named_tensors("head"))
    analytic = {f"level{i}": g for i, g in enumerate(level_grads)}
    analytic.update(p_grads)
    return grad_check("detection_head", loss, tensors, analytic, tolerance=LAYER_TOLERANCE)


def check_backbone(generator: torch.Generator) -> GradCheckReport:
    backbone = build_toy_backbone(
        BackboneConfig(stem_channels=3, stage_channels=[4, 4, 4, 4], se=True, se_reduction=2), generator
    )
    images = _randn((1, 3, 16, 16), generator)

    def levels():
        return backbone.forward(images).levels()

    rs = [_randn(t.shape, generator) for t in levels()]
    _, trace = backbone.forward_trace(images)
    g_image, grads = backbone.backward(trace, rs)
    tensors = {"image": images}
    tensors.update(backbone.named_tensors("backbone"))
    analytic = {"image": g_image}
    analytic.update(grads)
    return grad_check(
        "toy_backbone", lambda: _project(levels(), rs), tensors, analytic,
        tolerance=END_TO_END_TOLERANCE, max_entries=12, generator=generator,
    )


def tiny_run_config(mode: AblationMode = AblationMode.LFFN_AQM) -> RunConfig:
    """Narrow detector used by the end-to-end check."""
    return RunConfig(
        mode=mode,
        backbone=BackboneConfig(stem_channels=4, stage_channels=[4, 4, 8, 8]),
        fusion=_tiny_fusion_config(),
        aqm={"init_std": 0.3},
    )


def check_detector(generator: torch.Generator) -> GradCheckReport:
    config = tiny_run_config()
    detector = LffnDetector.initialize(config, generator)
    images = _randn((1, 3, 32, 32), generator, scale=0.5)

    def outputs():
        return detector.forward(images, pool_mode=PoolMode.EVAL).outputs

    result = detector.forward(images, pool_mode=PoolMode.EVAL)
    rs = [HeadOutput(_randn(o.logits.shape, generator), _randn(o.deltas.shape, generator)) for o in result.outputs]
    grads = detector.backward(result, rs)

    def loss():
        return sum(_project([o.logits, o.deltas], [r.logits, r.deltas]) for o, r in zip(outputs(), rs))

    tensors = detector.named_tensors()
    return grad_check(
        "detector_end_to_end", loss, tensors, {k: grads[k] for k in tensors},
        tolerance=END_TO_END_TOLERANCE, max_entries=6, generator=generator,
    )


CHECKS: Dict[str, CheckFn] = {
    "conv2d": check_conv2d,
    "deconv2d": check_deconv2d,
    "fully_connected": check_fully_connected,
    "activations": check_activations,
    "losses": check_losses,
    "expand_compress": check_expand_compress,
    "pyramid": check_pyramid,
    "aqm": check_aqm,
    "se_block": check_se_block,
    "head": check_head,
    "backbone": check_backbone,
    "detector": check_detector,
}


def run_gradcheck_suite(seed: int = 0, names: Optional[Iterable[str]] = None) -> List[GradCheckReport]:
    """
    Run the named checks (all by default), each with its own seeded generator.

    Raises:
        ConfigurationError: Unknown check name
    """
    selected = list(names) if names else list(CHECKS)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise ConfigurationError(f"unknown gradient checks {unknown}; available: {sorted(CHECKS)}")
    reports = []
    for index, name in enumerate(selected):
        report = CHECKS[name](make_generator(seed * 1000 + index))
        status = "ok" if report.passed else "FAILED"
        logger.info(
            f"gradcheck {name}: {status} (max relative error {report.max_relative_error:.2e}, "
            f"max absolute error {report.max_absolute_error:.2e})"
        )
        reports.append(report)
    return reports
