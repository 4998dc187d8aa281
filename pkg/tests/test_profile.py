import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docparsenet.data import synth_generate
from docparsenet.model import ModelConfig, build, forward
from docparsenet.ops import ConvParams, LinearParams
from docparsenet.profiling import (
    FLOPS_HEADER,
    OP_FLOPS,
    EpochTimer,
    conv_flops,
    cost_report,
    count_flops,
    count_params,
    linear_flops,
    time_epoch,
)
from docparsenet.tensor import Tensor, backward, sum_all
from docparsenet.text_embed import EmbeddingProvider
from docparsenet.train import TrainConfig, train

import oracles
from conftest import tiny_config


class TestUnitCounts:
    def test_linear_768_to_5(self):
        assert sum(t.data.size for t in LinearParams.init(768, 5, np.random.default_rng(0)).parameters().values()) == 3845

    def test_conv_16_to_32(self):
        p = ConvParams.init(16, 32, 3, np.random.default_rng(0))
        assert sum(t.data.size for t in p.parameters().values()) == 4640

    def test_pointwise_flops(self):
        p = ConvParams.init(320, 5, 1, np.random.default_rng(0), padding=0)
        assert conv_flops(p, 8, 8) == 204_800

    def test_linear_flops(self):
        assert linear_flops(LinearParams.init(4, 6, np.random.default_rng(0)), 10) == 2 * 4 * 6 * 10


class TestParams:
    def test_default_matches_closed_form(self, default_model):
        assert count_params(default_model) == oracles.closed_form_params(default_model.cfg)

    @settings(max_examples=15, deadline=None)
    @given(
        st.lists(st.integers(1, 24), min_size=6, max_size=6),
        st.sets(st.integers(1, 6)),
        st.integers(1, 3),
        st.sampled_from([1, 2]),
    )
    def test_closed_form_across_configs(self, widths, mlp, ratio, heads):
        widths[-1] *= heads
        cfg = ModelConfig(channels=widths, mlp_stages=mlp, mlp_ratio=ratio, heads=heads, embed_dim=16, crop=(32, 32))
        assert count_params(build(cfg)) == oracles.closed_form_params(cfg)

    def test_invariant_under_forward_backward(self, tiny_model):
        before = count_params(tiny_model)
        img = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 32, 32)))
        backward(sum_all(forward(tiny_model, img, Tensor(np.ones((1, 1, 768))), "train", seed=0)))
        assert count_params(tiny_model) == before


class TestReport:
    def test_totals_equal_row_sums(self, default_model):
        r = cost_report(default_model)
        assert r.total_params == sum(x.params for x in r.rows) == count_params(default_model)
        assert r.total_flops == sum(x.flops for x in r.rows)

    def test_every_layer_once(self, default_model):
        r = cost_report(default_model)
        names = [x.name for x in r.rows]
        assert len(names) == len(set(names))
        layer_names = set(default_model.layers())
        assert layer_names <= set(names)
        assert {x.name for x in r.rows if x.params} == layer_names

    def test_spot_checks(self, default_model):
        rows = {x.name: x for x in cost_report(default_model).rows}
        assert rows["enc1.conv"].flops == oracles.conv_flops(3, 16, 3, 256, 256)
        assert rows["dec1.conv"].flops == oracles.conv_flops(32 + 16, 16, 3, 256, 256)
        assert rows["head"].flops == oracles.conv_flops(16, 5, 1, 256, 256)
        assert rows["enc4.block.dw"].flops == oracles.conv_flops(256, 256, 3, 32, 32, groups=256)
        assert rows["fusion.attn.query"].flops == 2 * 320 * 320 * 64
        assert rows["enc2.mish"].flops == OP_FLOPS["mish"] * 32 * 128 * 128

    @pytest.mark.parametrize("batch", [2, 3, 8])
    def test_linear_in_batch(self, default_model, batch):
        assert count_flops(default_model, batch=batch) == batch * count_flops(default_model)

    def test_conv_rows_scale_by_four(self, default_model):
        small = {x.name: x.flops for x in cost_report(default_model, (128, 128)).rows}
        large = {x.name: x.flops for x in cost_report(default_model, (256, 256)).rows}
        for name in ("enc1.conv", "enc3.pointwise", "dec2.conv", "head"):
            assert large[name] == 4 * small[name]

    def test_table_format(self, default_model):
        text = cost_report(default_model).table()
        assert text.splitlines()[0] == FLOPS_HEADER
        assert "params (M):              3.61" in text

    def test_machine_lines(self, tiny_model):
        r = cost_report(tiny_model)
        lines = r.lines()
        assert len(lines) == len(r.rows) + 1
        fields = dict(kv.split("=") for kv in lines[-1].split()[1:])
        assert int(fields["flops"]) == r.total_flops and int(fields["params"]) == r.total_params

    def test_peak_estimate_positive(self, default_model):
        assert cost_report(default_model).peak_bytes > 4 * count_params(default_model) * 4


class TestTiming:
    def test_timer(self):
        t = EpochTimer()
        with pytest.raises(RuntimeError):
            t.stop()
        t.start()
        assert t.stop() > 0
        assert time_epoch(t) == t.history[0]

    def test_no_epoch(self):
        with pytest.raises(RuntimeError):
            time_epoch(EpochTimer())

    def test_epoch_stability_and_scaling(self):
        pages = synth_generate(16, (64, 64), seed=0)
        provider = EmbeddingProvider("hash")
        cfg = TrainConfig(epochs=3, batch_size=4, eval_every=10)

        def epochs(n):
            return train(build(tiny_config(dtype="float32", crop=(64, 64))), cfg, pages[:n], [], provider).timer.history

        base = epochs(8)
        assert all(s > 0 for s in base)
        assert abs(base[1] - base[0]) / max(base[0], base[1]) < 0.5
        double = epochs(16)
        assert 0.6 * 2 <= double[1] / base[1] <= 1.4 * 2
