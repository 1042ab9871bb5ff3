import numpy as np
import pytest

from fusionscreen import complexes, models


@pytest.fixture
def toy_voxel_cfg():
    return models.VoxelHeadConfig(grid_extent=8, in_channels=2,
                                  conv_filters_1=2, conv_filters_2=2,
                                  dense_nodes=8, kernel_1=3,
                                  dropout_early=0.0, dropout_mid=0.0)


@pytest.fixture
def toy_graph_cfg():
    return models.GraphHeadConfig(c_elem=1, k_cov=2, k_noncov=2,
                                  gather_width_cov=4, gather_width_noncov=4)


@pytest.fixture
def toy_fusion_cfg():
    return models.FusionConfig(mode="coherent", n_fusion_layers=3,
                               fusion_dense_nodes=6,
                               dropout_early=0.0, dropout_mid=0.0,
                               dropout_late=0.0)


@pytest.fixture
def toy_gen_params():
    return complexes.GenParams(box_size=8.0, c_elem=1, n_protein=(8, 12),
                               n_ligand=(3, 5), noise_sigma=0.05)


@pytest.fixture
def toy_items(toy_voxel_cfg, toy_graph_cfg, toy_gen_params):
    cxs = [complexes.generate_complex(i, toy_gen_params) for i in range(16)]
    return models.featurize(cxs, toy_voxel_cfg, toy_graph_cfg, box_size=8.0)


@pytest.fixture
def toy_model(toy_voxel_cfg, toy_graph_cfg, toy_fusion_cfg):
    return models.FusionModel(toy_voxel_cfg, toy_graph_cfg, toy_fusion_cfg,
                              seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
