"""
Tests for the layer-weakening fusion pyramid.
"""

import pytest
import torch
from pydantic import ValidationError

from app.core.errors import ConfigurationError, DimensionError
from app.kernels.conv import ConvParams, DeconvParams, conv2d
from app.kernels.tensor import make_generator
from app.models.fusion import (
    FusionParams,
    PyramidInputs,
    build_pyramid,
    build_pyramid_forward,
    expand_compress,
    lateral_merge,
)
from app.schemas.config import FusionConfig, MergeMode


def random_inputs(generator, channels=(4, 6, 8, 8), top=2, batch=1) -> PyramidInputs:
    sizes = [top * 8, top * 4, top * 2, top]
    return PyramidInputs(
        *(torch.randn((batch, c, s, s), generator=generator, dtype=torch.float64) for c, s in zip(channels, sizes))
    )


class TestExpandCompress:
    def test_doubles_resolution_and_compresses(self, generator):
        x = torch.randn((1, 256, 4, 4), generator=generator, dtype=torch.float64)
        dec = DeconvParams.initialize(256, 256, generator)
        comp = ConvParams.initialize(256, 128, 1, generator)
        out = expand_compress(x, dec, comp, channels=128)
        assert out.shape == (1, 128, 8, 8)
        assert (out >= 0).all()

    def test_schedule_mismatch(self, generator):
        dec = DeconvParams.initialize(8, 8, generator)
        comp = ConvParams.initialize(8, 4, 1, generator)
        with pytest.raises(ConfigurationError):
            expand_compress(torch.ones((1, 8, 2, 2), dtype=torch.float64), dec, comp, channels=3)

    def test_compression_must_be_pointwise(self, generator):
        dec = DeconvParams.initialize(8, 8, generator)
        comp = ConvParams.initialize(8, 4, 3, generator, padding=1)
        with pytest.raises(ConfigurationError):
            expand_compress(torch.ones((1, 8, 2, 2), dtype=torch.float64), dec, comp)


class TestLateralMerge:
    def test_concat_puts_lateral_channels_first(self, generator):
        bottom = torch.randn((1, 512, 8, 8), generator=generator, dtype=torch.float64)
        top = torch.rand((1, 128, 8, 8), generator=generator, dtype=torch.float64)
        lateral = ConvParams.initialize(512, 128, 1, generator)
        merged = lateral_merge(bottom, top, lateral, MergeMode.CONCAT, output_channels=256)
        assert merged.shape == (1, 256, 8, 8)
        assert torch.equal(merged[:, :128], conv2d(bottom, lateral))
        assert torch.equal(merged[:, 128:], top)

    def test_spatial_mismatch(self, generator):
        lateral = ConvParams.initialize(4, 2, 1, generator)
        with pytest.raises(DimensionError):
            lateral_merge(
                torch.ones((1, 4, 8, 8), dtype=torch.float64),
                torch.ones((1, 2, 4, 4), dtype=torch.float64),
                lateral,
            )

    def test_output_channel_total_is_checked(self, generator):
        lateral = ConvParams.initialize(4, 2, 1, generator)
        with pytest.raises(ConfigurationError):
            lateral_merge(
                torch.ones((1, 4, 4, 4), dtype=torch.float64),
                torch.ones((1, 3, 4, 4), dtype=torch.float64),
                lateral,
                output_channels=4,
            )

    def test_add_mode_sums(self, generator):
        bottom = torch.randn((1, 4, 4, 4), generator=generator, dtype=torch.float64)
        top = torch.randn((1, 2, 4, 4), generator=generator, dtype=torch.float64)
        lateral = ConvParams.initialize(4, 2, 1, generator)
        merged = lateral_merge(bottom, top, lateral, MergeMode.ADD)
        assert torch.allclose(merged, conv2d(bottom, lateral) + top)

    def test_none_mode_ignores_top_down(self, generator):
        bottom = torch.randn((1, 4, 4, 4), generator=generator, dtype=torch.float64)
        lateral = ConvParams.initialize(4, 2, 1, generator)
        merged = lateral_merge(bottom, torch.ones((1, 2, 4, 4), dtype=torch.float64), lateral, MergeMode.NONE)
        assert torch.equal(merged, conv2d(bottom, lateral))


class TestBuildPyramid:
    def test_resnet_width_pyramid_shapes(self, generator):
        config = FusionConfig(
            output_channels=256,
            p5_channels=256,
            topdown_channel_schedule=[128, 64, 32],
            post_merge_smoothing=False,
        )
        inputs = random_inputs(generator, channels=(256, 512, 1024, 2048), top=8)
        params = FusionParams.initialize(config, [256, 512, 1024, 2048], generator)
        outputs = build_pyramid(inputs, params, config)
        shapes = [tuple(level.shape) for level in outputs.levels()]
        assert shapes == [
            (1, 256, 64, 64),
            (1, 256, 32, 32),
            (1, 256, 16, 16),
            (1, 256, 8, 8),
            (1, 256, 4, 4),
        ]

    @pytest.mark.parametrize("seed", range(10))
    def test_random_schedules_keep_channel_total(self, seed):
        g = make_generator(seed)
        schedule = sorted(torch.randperm(15, generator=g)[:3].add(1).tolist(), reverse=True)
        config = FusionConfig(output_channels=16, p5_channels=16, topdown_channel_schedule=schedule)
        inputs = random_inputs(g)
        params = FusionParams.initialize(config, [4, 6, 8, 8], g)
        outputs = build_pyramid(inputs, params, config)
        assert all(level.shape[1] == 16 for level in outputs.levels())

    def test_merged_maps_follow_the_schedule(self, generator):
        config = FusionConfig(output_channels=8, p5_channels=8, topdown_channel_schedule=[6, 4, 2])
        inputs = random_inputs(generator)
        params = FusionParams.initialize(config, [4, 6, 8, 8], generator)
        _, trace = build_pyramid_forward(inputs, params, config)
        for step, expected in enumerate([6, 4, 2]):
            assert trace.steps[step].expand.output.shape[1] == expected
            assert trace.steps[step].merged.shape[1] == 8

    def test_p6_subsamples_p5(self, generator):
        config = FusionConfig(output_channels=8, p5_channels=8, topdown_channel_schedule=[6, 4, 2])
        inputs = random_inputs(generator)
        params = FusionParams.initialize(config, [4, 6, 8, 8], generator)
        outputs = build_pyramid(inputs, params, config)
        assert torch.equal(outputs.p6, outputs.p5[:, :, ::2, ::2])

    def test_is_deterministic(self, generator):
        config = FusionConfig(output_channels=8, p5_channels=8, topdown_channel_schedule=[6, 4, 2])
        inputs = random_inputs(generator)
        params = FusionParams.initialize(config, [4, 6, 8, 8], generator)
        first = build_pyramid(inputs, params, config).levels()
        second = build_pyramid(inputs, params, config).levels()
        assert all(torch.equal(a, b) for a, b in zip(first, second))

    @pytest.mark.parametrize("mode", [MergeMode.ADD, MergeMode.NONE])
    def test_other_merge_modes_keep_shapes(self, mode, generator):
        config = FusionConfig(output_channels=8, p5_channels=8, merge_mode=mode)
        inputs = random_inputs(generator)
        params = FusionParams.initialize(config, [4, 6, 8, 8], generator)
        outputs = build_pyramid(inputs, params, config)
        assert [tuple(p.shape[1:]) for p in outputs.levels()] == [
            (8, 16, 16), (8, 8, 8), (8, 4, 4), (8, 2, 2), (8, 1, 1)
        ]

    def test_level_that_does_not_halve(self, generator):
        config = FusionConfig(output_channels=8, p5_channels=8, topdown_channel_schedule=[6, 4, 2])
        inputs = random_inputs(generator)
        inputs.c3 = torch.zeros((1, 6, 7, 7), dtype=torch.float64)
        params = FusionParams.initialize(config, [4, 6, 8, 8], generator)
        with pytest.raises(ConfigurationError, match="C3"):
            build_pyramid(inputs, params, config)

    def test_params_built_for_other_channels(self, generator):
        config = FusionConfig(output_channels=8, p5_channels=8, topdown_channel_schedule=[6, 4, 2])
        params = FusionParams.initialize(config, [4, 6, 8, 16], generator)
        with pytest.raises(ConfigurationError, match="P5"):
            build_pyramid(random_inputs(generator), params, config)


class TestFusionConfig:
    @pytest.mark.parametrize(
        "schedule",
        [[4, 8, 2], [16, 8, 4], [8, 8, 4], [8, 4], [8, 4, 0]],
    )
    def test_bad_schedules(self, schedule):
        with pytest.raises(ValidationError):
            FusionConfig(output_channels=16, p5_channels=16, topdown_channel_schedule=schedule)

    def test_p5_width_must_match(self):
        with pytest.raises(ValidationError):
            FusionConfig(output_channels=16, p5_channels=8, topdown_channel_schedule=[8, 4, 2])

    def test_channel_split(self):
        config = FusionConfig(output_channels=256, p5_channels=256, topdown_channel_schedule=[128, 64, 32])
        assert [config.lateral_channels(s) for s in range(3)] == [128, 192, 224]
        assert [config.topdown_channels(s) for s in range(3)] == [128, 64, 32]
