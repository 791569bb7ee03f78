"""End-to-end model, ablation switchboard, metrics, training loop, checkpoints and sweeps."""

import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_model_config, tiny_train_config
from oracles import metrics_by_hand
from solar_vlm.data import SiteMetadata
from solar_vlm.graph import build_graph
from solar_vlm.model import AblationFlags, SolarVLM
from solar_vlm.training import (
    ABLATION_SETTINGS,
    SWEEP_GRIDS,
    MetricReport,
    NumericalDivergence,
    TraceWriter,
    build_model,
    evaluate,
    load_checkpoint,
    prepare_data,
    regression_metrics,
    run_ablation,
    run_experiment,
    run_sweep,
    save_checkpoint,
    train,
    validate_sweep_value,
)


def random_inputs(cfg, batch, m, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, m, cfg.seq_len, cfg.num_features, generator=g)
    text = torch.randn(batch, m, cfg.d_text, generator=g)
    images = torch.randn(batch, m, cfg.num_images, cfg.d_v, generator=g)
    return x, text, images


def sites(m):
    return [SiteMetadata(i, 39.0 + 0.2 * i, 114.0 + 0.3 * (i % 3)) for i in range(m)]


class TestModel:
    def test_output_shapes(self, model_cfg):
        model = SolarVLM(model_cfg, build_graph(sites(3), 2), horizon=5)
        out = model(*random_inputs(model_cfg, 2, 3), diagnostics=True)
        assert out.p_final.shape == (2, 3, 5)
        assert out.prediction.theta.shape == (2, 3)
        assert {"patch_attention", "gat_alpha", "cross_site_attention", "text_gamma", "theta"} <= set(out.diagnostics)

    def test_missing_embeddings(self, model_cfg):
        model = SolarVLM(model_cfg, build_graph(sites(3), 2), horizon=5)
        x, _, images = random_inputs(model_cfg, 1, 3)
        with pytest.raises(ValueError, match="text"):
            model(x, None, images)

    def test_zeroed_modalities_and_beta_reproduce_temporal_path(self, model_cfg):
        torch.manual_seed(0)
        full = SolarVLM(model_cfg, build_graph(sites(4), 2), horizon=6)
        with torch.no_grad():
            full.cross_site.beta.zero_()
        full.eval()
        x, text, images = random_inputs(model_cfg, 2, 4)
        reference = full.forward_temporal(x).p_final
        assert torch.equal(full(x, text, images).p_final, reference)
        for flags in (AblationFlags(no_text=True, no_visual=True), AblationFlags(no_cross_site=True)):
            tied = SolarVLM(model_cfg, build_graph(sites(4), 2), horizon=6, flags=flags)
            tied.load_state_dict(full.state_dict())
            tied.eval()
            assert torch.equal(tied(x, text, images).p_final, reference)

    def test_no_graph_matches_full_at_one_site(self, model_cfg):
        # at M=1 every attention row is the single weight 1; bypassing the GAT's
        # node-wise map leaves the full model equal to the no_graph variant
        torch.manual_seed(0)
        graph = build_graph(sites(1), 0)
        full = SolarVLM(model_cfg, graph, horizon=4)
        no_graph = SolarVLM(model_cfg, graph, horizon=4, flags=AblationFlags(no_graph=True))
        no_graph.load_state_dict(full.state_dict())
        with torch.no_grad():
            full.cross_site.beta.zero_()
            no_graph.cross_site.beta.zero_()
        full.eval(), no_graph.eval()
        x, text, images = random_inputs(model_cfg, 2, 1)
        diag = full(x, text, images, diagnostics=True).diagnostics
        assert all(torch.all(a == 1) for a in diag["gat_alpha"])
        assert torch.all(diag["cross_site_attention"] == 1)
        full.graph_learner.forward = lambda h, diagnostics=None: h
        assert torch.equal(full(x, text, images).p_final, no_graph(x, text, images).p_final)

    def test_ts_only_uses_temporal_head(self, model_cfg):
        model = SolarVLM(model_cfg, build_graph(sites(3), 2), horizon=5, flags=AblationFlags(ts_only=True))
        x, _, _ = random_inputs(model_cfg, 2, 3)
        out = model(x)
        assert torch.equal(out.p_final, model.head.temp_head(out.h_temp))

    def test_flag_needs(self):
        assert AblationFlags().needs_text and AblationFlags().needs_images
        assert not AblationFlags(ts_only=True, no_text=False).needs_text
        assert not AblationFlags(no_cross_site=True).needs_images
        assert AblationFlags(no_text=True).needs_images


class TestMetrics:
    def test_hand_case(self):
        mse, mae, r2 = regression_metrics([0, 1, 1], [0, 1, 2])
        assert (mse, mae, r2) == pytest.approx((1 / 3, 1 / 3, 0.5))

    def test_perfect_and_mean(self):
        y = np.array([0.3, -1.0, 2.5, 4.0])
        assert regression_metrics(y, y) == (0.0, 0.0, 1.0)
        assert regression_metrics(np.full(4, y.mean()), y)[2] == 0.0

    def test_zero_variance(self):
        with pytest.warns(RuntimeWarning):
            assert regression_metrics([1, 2], [3, 3])[2] is None

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-100, 100)), st.integers(0, 2**32 - 1))
    def test_against_hand_oracle(self, y, seed):
        pred = y + np.random.default_rng(seed).normal(size=y.shape)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mse, mae, r2 = regression_metrics(pred, y)
        ref = metrics_by_hand(pred.tolist(), y.tolist())
        assert mse == pytest.approx(ref[0], rel=1e-9)
        assert mae == pytest.approx(ref[1], rel=1e-9)
        assert mae <= math.sqrt(mse) + 1e-12
        # R^2 is ill-conditioned when the target is numerically constant
        if r2 is not None and ref[2] is not None and np.std(y) > 1e-6:
            assert r2 == pytest.approx(ref[2], rel=1e-6, abs=1e-9)
            assert r2 <= 1.0

    def test_per_site(self):
        pred = np.zeros((4, 2, 3))
        true = np.ones((4, 2, 3))
        true[:, 1] = 2
        rep = MetricReport.from_predictions(pred, true)
        assert np.array(rep.per_site)[:, 0].tolist() == [1.0, 4.0]


@pytest.fixture(scope="module")
def prepared(small_dataset):
    cfg, tcfg = tiny_model_config(), tiny_train_config()
    return cfg, tcfg, prepare_data(small_dataset, cfg, tcfg, AblationFlags())


class TestPrepare:
    def test_batch_shapes(self, prepared):
        cfg, tcfg, data = prepared
        x, y, text, images = data.batch("train", np.arange(3))
        assert x.shape == (3, 3, cfg.seq_len, cfg.num_features)
        assert y.shape == (3, 3, tcfg.horizon)
        assert text.shape == (3, 3, cfg.d_text)
        assert images.shape == (3, 3, cfg.num_images, cfg.d_v)

    def test_target_follows_window(self, prepared):
        cfg, tcfg, data = prepared
        x, y, _, _ = data.batch("val", np.array([0]))
        s = data.starts["val"][0]
        assert torch.equal(y[0], data.x[:, s + cfg.seq_len : s + cfg.seq_len + tcfg.horizon, data.power_index])
        assert torch.equal(x[0], data.x[:, s : s + cfg.seq_len])

    def test_splits_do_not_leak(self, prepared, small_dataset):
        cfg, tcfg, data = prepared
        from solar_vlm.data import chronological_split

        b = chronological_split(small_dataset.num_steps, tcfg.split_ratios)
        for name in ("train", "val", "test"):
            a, z = getattr(b, name)
            assert data.starts[name].min() >= a
            assert data.starts[name].max() + cfg.seq_len + tcfg.horizon <= z

    def test_ts_only_makes_no_provider_calls(self, small_dataset):
        data = prepare_data(small_dataset, tiny_model_config(), tiny_train_config(), AblationFlags(ts_only=True))
        assert data.providers[0].calls == 0 and data.providers[1].calls == 0
        assert data.images is None and not data.text


class TestTrain:
    def test_lr_zero_keeps_parameters(self, prepared, small_dataset):
        cfg, _, data = prepared
        tcfg = tiny_train_config(learning_rate=0.0, epochs=3, shuffle=False)
        model = build_model(cfg, small_dataset.sites, tcfg.horizon, AblationFlags(), 0)
        before = {k: v.clone() for k, v in model.named_parameters()}
        result = train(model, data, tcfg)
        for k, v in result.model.named_parameters():
            assert torch.equal(v, before[k]), k
        vals = [h["val_mse"] for h in result.history]
        assert max(vals) - min(vals) < 1e-9

    def test_seed_repeat(self, small_dataset):
        cfg, tcfg = tiny_model_config(), tiny_train_config(epochs=2)
        a = run_experiment(small_dataset, cfg, tcfg)
        b = run_experiment(small_dataset, cfg, tcfg)
        assert a.result.history[-1]["train_loss"] == pytest.approx(b.result.history[-1]["train_loss"], abs=1e-6)
        assert a.report.mse == b.report.mse

    def test_embeddings_stay_frozen(self, prepared, small_dataset):
        cfg, tcfg, data = prepared
        text = {k: v.clone() for k, v in data.text.items()}
        images = data.images.clone()
        model = build_model(cfg, small_dataset.sites, tcfg.horizon, AblationFlags(), 0)
        train(model, data, replace(tcfg, max_steps=2))
        assert torch.equal(images, data.images)
        assert all(torch.equal(text[k], data.text[k]) for k in text)
        assert not data.images.requires_grad

    def test_divergence_reports_batch(self, prepared, small_dataset):
        cfg, tcfg, data = prepared
        model = build_model(cfg, small_dataset.sites, tcfg.horizon, AblationFlags(), 0)
        with torch.no_grad():
            model.head.temp_head[2].bias.fill_(float("nan"))
        with pytest.raises(NumericalDivergence) as exc:
            train(model, data, tcfg)
        assert exc.value.batch_index == 0 and exc.value.epoch == 1

    def test_best_checkpoint_restored(self, prepared, small_dataset):
        cfg, _, data = prepared
        tcfg = tiny_train_config(epochs=3)
        model = build_model(cfg, small_dataset.sites, tcfg.horizon, AblationFlags(), 0)
        result = train(model, data, tcfg)
        best = min(h["val_mse"] for h in result.history)
        report = evaluate(result.model, data, "val")
        assert report.mse == pytest.approx(best, rel=1e-5)

    def test_trace_file(self, prepared, small_dataset, tmp_path):
        cfg, tcfg, data = prepared
        model = build_model(cfg, small_dataset.sites, tcfg.horizon, AblationFlags(), 0)
        trace = TraceWriter(tmp_path / "trace.jsonl")
        train(model, data, replace(tcfg, max_steps=2), trace)
        trace.close()
        import json

        rows = [json.loads(line) for line in (tmp_path / "trace.jsonl").read_text().splitlines()]
        assert rows and {"theta", "cross_site_attention", "gat_alpha"} <= set(rows[0])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, prepared, small_dataset, tmp_path):
        cfg, tcfg, data = prepared
        model = build_model(cfg, small_dataset.sites, tcfg.horizon, AblationFlags(), 0)
        result = train(model, data, replace(tcfg, max_steps=3))
        before = evaluate(result.model, data, "test")
        save_checkpoint(tmp_path / "m.pt", result.model, tcfg, small_dataset.sites, data.stats)
        loaded, payload = load_checkpoint(tmp_path / "m.pt")
        after = evaluate(loaded, data, "test")
        assert (after.mse, after.mae, after.r2) == (before.mse, before.mae, before.r2)
        assert payload["horizon"] == tcfg.horizon

    def test_horizon_mismatch(self, prepared, small_dataset):
        cfg, tcfg, data = prepared
        model = build_model(cfg, small_dataset.sites, tcfg.horizon + 1, AblationFlags(), 0)
        with pytest.raises(ValueError, match="horizon"):
            evaluate(model, data, "test")


class TestAblationAndSweep:
    def test_six_settings(self):
        names = [n for n, _ in ABLATION_SETTINGS]
        assert names == [
            "Full",
            "Time-Series Encoder Only",
            "Without Text Encoder",
            "Without Visual Encoder",
            "Without Graph Learner",
            "Without Cross-Site Attention",
        ]

    def test_run_ablation(self, small_dataset):
        rows, reports = run_ablation(small_dataset, tiny_model_config(), tiny_train_config(max_steps=2))
        assert [r["setting"] for r in rows] == [n for n, _ in ABLATION_SETTINGS]
        calls = {r["setting"]: r["provider_calls"] for r in rows}
        assert calls["Time-Series Encoder Only"] == 0
        assert calls["Full"] > 0
        assert all(np.isfinite(r["mse"]) for r in rows)

    def test_grids(self):
        assert SWEEP_GRIDS["history_length"] == [12, 24, 48, 96, 192, 288, 384]
        assert SWEEP_GRIDS["patch_length"] == [4, 8, 10, 12, 16, 18, 20, 24]
        assert SWEEP_GRIDS["num_images"] == [2, 4, 6, 8, 10, 12, 14, 16]
        assert SWEEP_GRIDS["knn_k"] == [1, 2, 3, 4, 5, 6, 7]

    def test_single_value_sweep(self, small_dataset):
        rows = run_sweep(small_dataset, tiny_model_config(), tiny_train_config(max_steps=1), "knn_k", [1])
        assert len(rows) == 1 and rows[0]["status"] == "ok"

    def test_invalid_values_recorded_and_sorted(self, small_dataset):
        rows = run_sweep(small_dataset, tiny_model_config(), tiny_train_config(max_steps=1), "knn_k", [5, 1, 2])
        assert [r["value"] for r in rows] == [1, 2, 5]
        assert rows[-1]["status"] == "skipped" and "stations" in rows[-1]["reason"]

    def test_validation(self, small_dataset):
        cfg, tcfg = tiny_model_config(), tiny_train_config()
        assert validate_sweep_value("patch_length", 64, small_dataset, cfg, tcfg) is not None
        assert validate_sweep_value("patch_length", 8, small_dataset, cfg, tcfg) is None
        assert validate_sweep_value("knn_k", 0, small_dataset, cfg, tcfg) is not None
        with pytest.raises(ValueError):
            run_sweep(small_dataset, cfg, tcfg, "depth")
