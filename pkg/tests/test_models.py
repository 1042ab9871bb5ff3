import numpy as np
import pytest

from fusionscreen import complexes, models
from fusionscreen.models import (
    FusionConfig,
    FusionModel,
    GraphHeadConfig,
    VoxelHeadConfig,
    batch_graphs,
    featurize,
    graph_head_forward,
    late_fusion_predict,
    table_coherent_fusion_config,
    table_mid_fusion_config,
    train,
    train_head,
    voxel_head_forward,
)
from fusionscreen.optim import OptimizerConfig


class TestConfigs:
    def test_message_steps_bounded(self):
        for bad in (1, 9):
            with pytest.raises(ValueError):
                GraphHeadConfig(k_cov=bad)
            with pytest.raises(ValueError):
                GraphHeadConfig(k_noncov=bad)

    def test_dense_width_reduction_rule(self):
        cfg = GraphHeadConfig(gather_width_noncov=128)
        assert cfg.dense_widths == (85, 42)
        cfg = GraphHeadConfig(gather_width_noncov=24)
        assert cfg.dense_widths == (16, 8)

    def test_voxel_flat_width(self):
        cfg = VoxelHeadConfig(grid_extent=16, conv_filters_2=64)
        assert cfg.flat_width == 64 * 4 ** 3

    def test_unknown_fusion_mode_rejected(self):
        with pytest.raises(ValueError):
            FusionConfig(mode="early")

    def test_fusion_layer_count_bounded(self):
        for bad in (2, 6):
            with pytest.raises(ValueError):
                FusionConfig(mode="coherent", n_fusion_layers=bad)

    def test_late_mode_skips_layer_bound(self):
        FusionConfig(mode="late", n_fusion_layers=2)

    def test_published_mid_fusion_end_state(self):
        cfg = table_mid_fusion_config()
        assert cfg.mode == "mid"
        assert cfg.n_fusion_layers == 5
        assert cfg.model_specific_layers
        assert cfg.activation == "selu"
        assert cfg.batch_size == 1
        assert cfg.optimizer.learning_rate == pytest.approx(4.03e-4)

    def test_published_coherent_fusion_end_state(self):
        cfg = table_coherent_fusion_config()
        assert cfg.mode == "coherent"
        assert cfg.n_fusion_layers == 4
        assert not cfg.model_specific_layers
        assert cfg.batch_size == 48
        assert cfg.pre_trained
        assert cfg.dropout_early == pytest.approx(0.386)
        assert cfg.optimizer.learning_rate == pytest.approx(1.08e-4)

    def test_published_head_defaults(self):
        g = GraphHeadConfig()
        assert (g.k_noncov, g.k_cov) == (3, 6)
        assert (g.gather_width_cov, g.gather_width_noncov) == (24, 128)
        assert (g.cov_thresh, g.noncov_thresh) == (2.24, 5.22)
        v = VoxelHeadConfig()
        assert (v.conv_filters_1, v.conv_filters_2) == (32, 64)
        assert v.dense_nodes == 128
        assert (v.residual_1, v.residual_2) == (False, True)
        assert (v.kernel_1, v.kernel_2) == (5, 3)
        assert (v.dropout_early, v.dropout_mid) == (0.25, 0.125)


class TestLateFusion:
    def test_exact_arithmetic_mean(self, rng):
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert np.array_equal(late_fusion_predict(a, b), (a + b) / 2.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            late_fusion_predict(np.array([1.0, np.nan]), np.ones(2))

    def test_late_model_predicts_mean_of_heads(self, toy_voxel_cfg,
                                               toy_graph_cfg, toy_items):
        fusion = FusionConfig(mode="late")
        m = FusionModel(toy_voxel_cfg, toy_graph_cfg, fusion, seed=1)
        items = [(it.grid, it.graph) for it in toy_items[:4]]
        preds, errors = m.predict_batch(items)
        assert not errors
        pv, _ = voxel_head_forward(m.voxel_params, toy_voxel_cfg,
                                   [it.grid for it in toy_items[:4]])
        pg, _ = graph_head_forward(m.graph_params, toy_graph_cfg,
                                   [it.graph for it in toy_items[:4]])
        assert np.allclose(preds, (pv + pg) / 2.0)


class TestForward:
    def test_deterministic_eval_forward(self, toy_model, toy_items):
        items = [(it.grid, it.graph) for it in toy_items[:3]]
        a, _ = toy_model.predict_batch(items)
        b, _ = toy_model.predict_batch(items)
        assert a == b

    def test_batch_partition_invariance(self, toy_model, toy_items):
        items = [(it.grid, it.graph) for it in toy_items[:6]]
        whole, _ = toy_model.predict_batch(items)
        singles = [toy_model.predict_batch([it])[0][0] for it in items]
        assert np.allclose(whole, singles, atol=1e-10)

    def test_graph_head_node_permutation_invariance(self, toy_graph_cfg, rng):
        c = complexes.generate_complex(
            3, complexes.GenParams(box_size=8.0, c_elem=1))
        graph = complexes.build_graph(c, c_elem=1, box_size=8.0)
        params = models.init_graph_params(toy_graph_cfg, rng)
        base, _ = graph_head_forward(params, toy_graph_cfg, graph)
        perm = np.random.default_rng(0).permutation(graph.n_nodes)
        inv = np.argsort(perm)
        permuted = complexes.ComplexGraph(
            node_features=graph.node_features[perm],
            covalent_edges=inv[graph.covalent_edges.reshape(-1)].reshape(-1, 2)
            if len(graph.covalent_edges) else graph.covalent_edges,
            noncovalent_edges=inv[graph.noncovalent_edges.reshape(-1)]
            .reshape(-1, 2)
            if len(graph.noncovalent_edges) else graph.noncovalent_edges,
            covalent_dists=graph.covalent_dists,
            noncovalent_dists=graph.noncovalent_dists,
        )
        got, _ = graph_head_forward(params, toy_graph_cfg, permuted)
        assert np.allclose(got, base, atol=1e-10)

    def test_predict_batch_isolates_malformed_items(self, toy_model,
                                                    toy_items):
        good = (toy_items[0].grid, toy_items[0].graph)
        preds, errors = toy_model.predict_batch(
            [good, "not an item", good])
        assert preds[0] is not None and preds[2] is not None
        assert preds[1] is None
        assert errors == [(1, "item is not a (VoxelGrid, ComplexGraph) pair")]
        assert preds[0] == preds[2]

    def test_predict_batch_rejects_wrong_grid_shape(self, toy_model,
                                                    toy_items):
        bad_grid = complexes.VoxelGrid(np.zeros((2, 4, 4, 4)))
        preds, errors = toy_model.predict_batch(
            [(bad_grid, toy_items[0].graph)])
        assert preds == [None]
        assert "shape" in errors[0][1]

    def test_head_forward_shapes(self, toy_voxel_cfg, toy_graph_cfg,
                                 toy_items, rng):
        vp = models.init_voxel_params(toy_voxel_cfg, rng)
        preds, lat = voxel_head_forward(vp, toy_voxel_cfg,
                                        [it.grid for it in toy_items[:3]])
        assert preds.shape == (3,)
        assert lat.shape == (3, toy_voxel_cfg.latent_width)
        gp = models.init_graph_params(toy_graph_cfg, rng)
        preds, lat = graph_head_forward(gp, toy_graph_cfg,
                                        [it.graph for it in toy_items[:3]])
        assert preds.shape == (3,)
        assert lat.shape == (3, toy_graph_cfg.latent_width)

    def test_build_tape_rejects_late_mode(self, toy_voxel_cfg, toy_graph_cfg,
                                          toy_items):
        m = FusionModel(toy_voxel_cfg, toy_graph_cfg,
                        FusionConfig(mode="late"))
        vox = np.stack([toy_items[0].grid.occupancy])
        gb = batch_graphs([toy_items[0].graph])
        with pytest.raises(models.GraphError):
            m.build_tape(vox, gb)


class TestPersistence:
    def test_save_load_roundtrip_bitwise(self, toy_model, toy_items,
                                         tmp_path):
        path = tmp_path / "m.npz"
        toy_model.save(path)
        loaded = FusionModel.load(path)
        for k, v in toy_model.all_params().items():
            assert np.array_equal(loaded.all_params()[k], v)
        items = [(it.grid, it.graph) for it in toy_items[:3]]
        assert toy_model.predict_batch(items)[0] == \
            loaded.predict_batch(items)[0]

    def test_loaded_configs_match(self, toy_model, tmp_path):
        path = tmp_path / "m.npz"
        toy_model.save(path)
        loaded = FusionModel.load(path)
        assert loaded.voxel_cfg == toy_model.voxel_cfg
        assert loaded.graph_cfg == toy_model.graph_cfg
        assert loaded.fusion_cfg.mode == toy_model.fusion_cfg.mode


class TestTraining:
    def opt(self):
        return OptimizerConfig("adam", 3e-3)

    def test_coherent_training_decreases_loss(self, toy_model, toy_items):
        cfg = FusionConfig(mode="coherent", n_fusion_layers=3,
                           fusion_dense_nodes=6, activation="relu",
                           optimizer=self.opt(), batch_size=8, epochs=4)
        _, history = train(toy_model, toy_items[:12], toy_items[12:], cfg,
                           seed=0)
        assert len(history) == 4
        assert history[-1]["train_mse"] < history[0]["train_mse"]

    def test_training_restores_best_validation_params(self, toy_voxel_cfg,
                                                      toy_graph_cfg,
                                                      toy_items):
        cfg = FusionConfig(mode="coherent", n_fusion_layers=3,
                           fusion_dense_nodes=6, optimizer=self.opt(),
                           batch_size=8, epochs=3)
        m = FusionModel(toy_voxel_cfg, toy_graph_cfg, cfg, seed=2)
        m, history = train(m, toy_items[:12], toy_items[12:], cfg, seed=0)
        best = min(h["val_mse"] for h in history)
        final = models._eval_mse(m, toy_items[12:])
        assert final == pytest.approx(best, rel=1e-9)

    def test_late_mode_training_rejected(self, toy_voxel_cfg, toy_graph_cfg,
                                         toy_items):
        m = FusionModel(toy_voxel_cfg, toy_graph_cfg,
                        FusionConfig(mode="late"))
        with pytest.raises(ValueError):
            train(m, toy_items[:8], toy_items[8:],
                  FusionConfig(mode="late"))

    def test_mid_mode_requires_pretrained_heads(self, toy_voxel_cfg,
                                                toy_graph_cfg, toy_items):
        cfg = FusionConfig(mode="mid", n_fusion_layers=3,
                           fusion_dense_nodes=6, optimizer=self.opt(),
                           batch_size=8, epochs=1)
        m = FusionModel(toy_voxel_cfg, toy_graph_cfg, cfg)
        with pytest.raises(ValueError, match="trained head"):
            train(m, toy_items[:8], toy_items[8:], cfg)

    def test_train_head_runs_both_kinds(self, toy_voxel_cfg, toy_graph_cfg,
                                        toy_items, rng):
        for kind, cfg, init in (
                ("voxel", toy_voxel_cfg, models.init_voxel_params),
                ("graph", toy_graph_cfg, models.init_graph_params)):
            params, history = train_head(
                kind, init(cfg, rng), cfg, toy_items[:12], toy_items[12:],
                epochs=2, batch_size=8, optimizer_cfg=self.opt(), seed=0)
            assert len(history) == 2
            assert all(np.all(np.isfinite(v)) for v in params.values())

    def test_train_head_rejects_unknown_kind(self, toy_voxel_cfg, toy_items):
        with pytest.raises(ValueError):
            train_head("fusion", {}, toy_voxel_cfg, toy_items, toy_items,
                       epochs=1, batch_size=4, optimizer_cfg=self.opt())


def test_featurize_respects_configs(toy_voxel_cfg, toy_graph_cfg,
                                    toy_gen_params):
    cxs = [complexes.generate_complex(i, toy_gen_params) for i in range(2)]
    items = featurize(cxs, toy_voxel_cfg, toy_graph_cfg, box_size=8.0)
    assert items[0].grid.occupancy.shape == (2, 8, 8, 8)
    assert items[0].graph.node_features.shape[1] == \
        toy_graph_cfg.feature_width
    assert items[0].label == cxs[0].label_pk


def test_batch_graphs_block_structure(toy_graph_cfg, toy_gen_params):
    cxs = [complexes.generate_complex(i, toy_gen_params) for i in range(3)]
    graphs = [complexes.build_graph(c, c_elem=1, box_size=8.0) for c in cxs]
    gb = batch_graphs(graphs)
    total = sum(g.n_nodes for g in graphs)
    assert gb.features.shape[0] == total
    assert gb.pool.shape == (3, total)
    # pooling rows are uniform means over each graph's nodes
    assert np.allclose(np.asarray(gb.pool.sum(axis=1)).ravel(), 1.0)
