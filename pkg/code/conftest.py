import numpy as np
import pytest

from geom import PointCloud, normalize
from setmixer_model import (Aggregator, HeadConfig, MixerParams, ModelConfig,
                            SaLayerConfig)
from sorting import aps_plan


def make_tiny_config(aggregator="set_mixer", plan=None, num_classes=3,
                     center_mode="spatial_center", legacy_centering=False,
                     norm="layer_norm"):
    """Two SA levels small enough for exhaustive gradient checks."""
    plan = plan or aps_plan()
    layers = []
    for m_sets, k, c in ((8, 4, 4), (1, 8, 6)):
        mixer = None
        if aggregator in ("set_mixer", "mixer_no_sort"):
            n_sort = plan.n_sort if aggregator == "set_mixer" else 1
            mixer = MixerParams.build(k, c, n_sort, d=2, norm=norm, dropout_rate=0.2)
        layers.append(SaLayerConfig(
            m_sets=m_sets, k=k, t_channels=(c,),
            aggregator=Aggregator(aggregator, mixer,
                                  plan if aggregator == "set_mixer" else None),
            center_mode=center_mode, legacy_centering=legacy_centering))
    head = HeadConfig(widths=(8,), dropout=(0.5,), num_classes=num_classes)
    return ModelConfig(sa_layers=tuple(layers), head=head)


@pytest.fixture
def tiny_config():
    return make_tiny_config


@pytest.fixture
def random_cloud():
    def build(n=32, seed=0, label=None):
        rng = np.random.default_rng(seed)
        return normalize(PointCloud(rng.normal(size=(n, 3)), label=label))
    return build
