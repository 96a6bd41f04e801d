import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from errors import BadCountError, ShapeMismatchError
from geom import PointCloud, normalize
from setmixer_model import (Aggregator, HeadConfig, MixerLayer,
                            MixerParams, ModelConfig, SaLayer, SaLayerConfig,
                            SetMixerClassifier, build_config, canonical_config,
                            count_parameters, desk_config, gradcheck_model,
                            loss_and_gradients, mixer_aggregate, model_forward,
                            pool_aggregate, sa_forward)
from sorting import aps_plan, parse_plan, plan_orders
from tensor_nn import (DropoutSpec, NormKind, Parameter, Tape, batch_norm_forward,
                       fc_forward, gradcheck, layer_norm_forward, make_rng)


def mixer_oracle(ordered, mixer):
    """Straight-line mixer: norm, point-dimension MLP, flatten, channel reduction."""
    h = ordered
    if mixer.norm.kind == NormKind.LAYER_NORM:
        h = layer_norm_forward(h, mixer.norm.gain.value, mixer.norm.shift.value)
    h = h.T
    for layer in mixer.m:
        h = np.maximum(h @ layer.weight.value.T + layer.bias.value, 0.0)
    flat = h.T.reshape(-1)
    return flat @ mixer.r.weight.value.T + mixer.r.bias.value


def shared_mapping_oracle(layer, x):
    for fc, bn in layer.t_layers:
        x = batch_norm_forward(fc_forward(fc, x), bn.gain.value, bn.shift.value,
                               bn.running_mean, bn.running_var)
        x = np.maximum(x, 0.0)
    return x


def pool_layer(k, channels=(8,), kind="max_pool"):
    cfg = SaLayerConfig(m_sets=1, k=k, t_channels=channels, aggregator=Aggregator(kind))
    return SaLayer("sa1", cfg, 0, 3, make_rng(0))


def mixer_sa_layer(m_sets=4, k=8, c=5, plan="aps"):
    sort_plan = parse_plan(plan)
    mixer = MixerParams.build(k, c, sort_plan.n_sort, d=2)
    cfg = SaLayerConfig(m_sets=m_sets, k=k, t_channels=(6, c),
                        aggregator=Aggregator("set_mixer", mixer, sort_plan))
    return SaLayer("sa1", cfg, 0, 3, make_rng(1))


def test_mixer_params_validate_shapes():
    params = MixerParams.build(16, 8, 3, d=2)
    assert params.d == 2
    assert params.r_layer == {"in": 48, "out": 16, "activation": "none"}
    with pytest.raises(ShapeMismatchError):
        MixerParams(k=4, c_in=2, n_sort=1,
                    m_layers=({"in": 4, "out": 4, "activation": "relu"},
                              {"in": 3, "out": 4, "activation": "relu"},
                              {"in": 4, "out": 2, "activation": "relu"}),
                    r_layer={"in": 4, "out": 4, "activation": "none"})
    with pytest.raises(ShapeMismatchError):
        MixerParams(k=4, c_in=2, n_sort=1, m_layers=MixerParams.build(4, 2, 1, d=2).m_layers,
                    r_layer={"in": 4, "out": 3, "activation": "none"})
    with pytest.raises(ValueError):
        MixerParams.build(4, 2, 1, norm=NormKind.BATCH_NORM)


def test_mixer_identity_plumbing():
    params = MixerParams.build(2, 1, 1, d=2, norm=NormKind.NONE, dropout_rate=0.0)
    mixer = MixerLayer("mix", params, make_rng(0))
    for layer in mixer.m + [mixer.r]:
        layer.weight.value = np.eye(2)
    ordered = np.array([[0.25], [1.5]])
    assert_array_equal(mixer_aggregate(ordered, mixer), [0.25, 1.5])


def test_mixer_matches_straight_line_oracle():
    rng = np.random.default_rng(2)
    params = MixerParams.build(8, 4, 3, d=3)
    mixer = MixerLayer("mix", params, make_rng(3))
    mixer.norm.gain.value = rng.normal(size=12)
    mixer.norm.shift.value = rng.normal(size=12)
    for layer in mixer.m + [mixer.r]:
        layer.bias.value = rng.normal(size=layer.out_dim) * 0.1
    ordered = rng.normal(size=(8, 12))
    out = mixer_aggregate(ordered, mixer)
    assert out.shape == (8,)
    assert_allclose(out, mixer_oracle(ordered, mixer), atol=1e-12)


def test_mixer_matches_oracle_on_random_instances():
    rng = np.random.default_rng(20)
    for trial in range(1000):
        k, c, n_sort, d = (int(rng.integers(1, 9)), int(rng.integers(1, 5)),
                           int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        norm = NormKind.LAYER_NORM if trial % 2 == 0 else NormKind.NONE
        mixer = MixerLayer("mix", MixerParams.build(k, c, n_sort, d=d, norm=norm),
                           make_rng(trial))
        if norm == NormKind.LAYER_NORM:
            mixer.norm.gain.value = rng.normal(size=n_sort * c)
            mixer.norm.shift.value = rng.normal(size=n_sort * c)
        for layer in mixer.m + [mixer.r]:
            layer.bias.value = rng.normal(size=layer.out_dim) * 0.1
        ordered = rng.normal(scale=rng.uniform(0.1, 3.0), size=(k, n_sort * c))
        out = mixer_aggregate(ordered, mixer)
        assert out.shape == (2 * c,)
        assert_allclose(out, mixer_oracle(ordered, mixer), atol=1e-12)


def test_mixer_rejects_wrong_shape():
    mixer = MixerLayer("mix", MixerParams.build(4, 2, 1), make_rng(0))
    with pytest.raises(ShapeMismatchError):
        mixer_aggregate(np.zeros((5, 2)), mixer)


def test_mixer_gradients_pass_gradcheck():
    rng = np.random.default_rng(4)
    mixer = MixerLayer("mix", MixerParams.build(6, 3, 2, d=2), make_rng(5))
    ordered = Parameter("ordered", rng.normal(size=(3, 6, 6)))
    weights = rng.normal(size=(3, 6))

    def loss_fn(tape):
        out = mixer.forward(tape, tape.param(ordered), DropoutSpec(0.2, False))
        return tape.weighted_sum(out, weights)

    report = gradcheck(loss_fn, mixer.parameters() + [ordered])
    assert report.max_rel_error < 1e-4


def test_pool_aggregate():
    feats = np.array([[1.0, 5.0], [3.0, 2.0]])
    assert_array_equal(pool_aggregate(feats, "max_pool"), [3.0, 5.0])
    assert_array_equal(pool_aggregate(feats, "mean_pool"), [2.0, 3.5])
    with pytest.raises(ValueError):
        pool_aggregate(feats, "set_mixer")


def test_pool_aggregate_matches_loop_oracle():
    feats = np.random.default_rng(6).normal(size=(7, 4))
    maxima = [max(feats[r, c] for r in range(7)) for c in range(4)]
    means = [sum(feats[r, c] for r in range(7)) / 7 for c in range(4)]
    assert_array_equal(pool_aggregate(feats, "max_pool"), maxima)
    assert_allclose(pool_aggregate(feats, "mean_pool"), means, atol=1e-12)


def test_single_set_max_pool_is_global_max():
    points = np.random.default_rng(7).normal(size=(20, 3))
    layer = pool_layer(20)
    centers, feats = sa_forward(points, None, layer)
    assert feats.shape == (1, 8)
    assert_allclose(feats[0], shared_mapping_oracle(layer, points).max(axis=0), atol=1e-12)
    assert_allclose(centers[0], points.mean(axis=0), atol=1e-12)


def test_max_pool_ignores_duplicated_points():
    points = np.random.default_rng(8).normal(size=(16, 3))
    _, once = sa_forward(points, None, pool_layer(16))
    _, twice = sa_forward(np.vstack([points, points]), None, pool_layer(32))
    assert_allclose(once, twice, atol=1e-12)


@given(st.integers(min_value=0, max_value=10_000), st.sampled_from(["aps", "pcs", "eds"]))
@settings(max_examples=15, deadline=None)
def test_sa_layer_ignores_point_order(seed, plan):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(24, 3))
    layer = mixer_sa_layer(plan=plan)
    perm = rng.permutation(24)
    centers, feats = sa_forward(points, None, layer)
    centers_perm, feats_perm = sa_forward(points[perm], None, layer)
    assert feats.shape == (4, 10)
    assert_allclose(centers_perm, centers, atol=1e-12)
    assert_allclose(feats_perm, feats, atol=1e-12)


def test_desk_and_canonical_presets():
    desk = desk_config()
    assert [l.out_channels for l in desk.sa_layers] == [32, 64, 128]
    assert desk.head.num_classes == 8
    assert count_parameters(SetMixerClassifier(desk)) < 100_000

    canonical = canonical_config()
    assert [l.out_channels for l in canonical.sa_layers] == [128, 256, 1024]
    assert canonical.global_channels == 1024
    assert canonical.in_channels(1) == 128
    for layer in canonical.sa_layers:
        mixer = layer.aggregator.mixer
        assert mixer.r_layer["out"] == 2 * mixer.c_in
        assert mixer.n_sort == 3


def test_canonical_model_shape_contract():
    cloud = normalize(PointCloud(np.random.default_rng(9).normal(size=(1024, 3))))
    logits = model_forward(cloud, SetMixerClassifier(canonical_config()))
    assert logits.shape == (40,)
    assert np.all(np.isfinite(logits))


def test_build_config_switches():
    cfg = build_config("desk", aggregator="max_pool")
    assert [l.out_channels for l in cfg.sa_layers] == [16, 32, 64]
    assert cfg.sa_layers[0].aggregator.mixer is None

    cfg = build_config("desk", plan="aps+pcs+eds", center_mode="query_point",
                       layer_norm=False, dropout=0.5, legacy_centering=True,
                       num_classes=5)
    mixer = cfg.sa_layers[1].aggregator.mixer
    assert mixer.n_sort == 7
    assert mixer.norm == NormKind.NONE
    assert mixer.dropout_rate == 0.5
    assert cfg.in_channels(1) == 32 + 3
    assert cfg.head.num_classes == 5

    cfg = build_config("desk", aggregator="mixer_no_sort")
    assert cfg.sa_layers[0].aggregator.plan is None
    assert cfg.sa_layers[0].aggregator.mixer.n_sort == 1
    with pytest.raises(ValueError):
        build_config("huge")


def test_config_json_round_trip_keeps_hash():
    cfg = build_config("desk", plan="pcs", center_mode="query_point")
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.config_hash == cfg.config_hash
    assert build_config("desk").config_hash != cfg.config_hash


def test_config_validation():
    mixer = MixerParams.build(4, 4, 2)
    with pytest.raises(ShapeMismatchError):
        Aggregator("set_mixer", mixer, aps_plan())
    with pytest.raises(ValueError):
        Aggregator("set_mixer", None, aps_plan())
    with pytest.raises(ShapeMismatchError):
        SaLayerConfig(m_sets=4, k=8, t_channels=(4,),
                      aggregator=Aggregator("mixer_no_sort", MixerParams.build(4, 4, 1)))
    small = SaLayerConfig(m_sets=4, k=4, t_channels=(4,), aggregator=Aggregator("max_pool"))
    big = SaLayerConfig(m_sets=1, k=8, t_channels=(4,), aggregator=Aggregator("max_pool"))
    with pytest.raises(BadCountError):
        ModelConfig(sa_layers=(small, big), head=HeadConfig((4,), (0.5,), 2))


def test_model_ignores_point_order(tiny_config, random_cloud):
    for cfg in (tiny_config(), tiny_config(plan=parse_plan("pcs+eds")),
                tiny_config(aggregator="max_pool"),
                tiny_config(center_mode="query_point", legacy_centering=True)):
        model = SetMixerClassifier(cfg, seed=3)
        cloud = random_cloud(48, seed=4)
        perm = np.random.default_rng(5).permutation(48)
        shuffled = PointCloud(cloud.coords[perm])
        assert_allclose(model.logits([shuffled]), model.logits([cloud]), atol=1e-9)


def test_desk_model_ignores_point_order():
    model = SetMixerClassifier(desk_config(), seed=6)
    rng = np.random.default_rng(30)
    clouds, shuffled = [], []
    for _ in range(200):
        cloud = normalize(PointCloud(rng.normal(size=(96, 3))))
        clouds.append(cloud)
        shuffled.append(PointCloud(cloud.coords[rng.permutation(96)]))
    for offset in range(0, 200, 25):
        assert_allclose(model.logits(shuffled[offset:offset + 25]),
                        model.logits(clouds[offset:offset + 25]), rtol=0, atol=1e-9)


def test_desk_gradients_on_sampled_entries():
    model = SetMixerClassifier(desk_config(), seed=8)
    rng = np.random.default_rng(31)
    clouds = [normalize(PointCloud(rng.normal(size=(64, 3)))) for _ in range(2)]
    report = gradcheck_model(model, clouds, [1, 6], max_entries=3, seed=2)
    assert report.max_rel_error < 1e-4, report


@pytest.mark.slow
def test_desk_gradients_on_every_entry():
    model = SetMixerClassifier(desk_config(), seed=8)
    rng = np.random.default_rng(32)
    clouds = [normalize(PointCloud(rng.normal(size=(64, 3)))) for _ in range(2)]
    report = gradcheck_model(model, clouds, [0, 5], max_entries=None)
    assert report.checked == model.num_parameters
    assert report.max_rel_error < 1e-4, report


def test_forward_result_levels(tiny_config, random_cloud):
    model = SetMixerClassifier(tiny_config(), seed=0)
    result = model.forward(Tape(), [random_cloud(32, 0), random_cloud(32, 1)])
    assert result.logits.shape == (2, 3)
    assert [f.shape for f in result.level_features] == [(2, 8, 8), (2, 1, 12)]
    assert result.global_feature.shape == (2, 12)


def test_batch_needs_equal_point_counts(tiny_config, random_cloud):
    model = SetMixerClassifier(tiny_config())
    with pytest.raises(ShapeMismatchError):
        model.logits([random_cloud(32, 0), random_cloud(40, 1)])


def test_untrained_desk_loss_is_near_uniform():
    model = SetMixerClassifier(desk_config(), seed=11)
    rng = np.random.default_rng(12)
    clouds = [normalize(PointCloud(rng.normal(size=(128, 3)))) for _ in range(12)]
    labels = rng.integers(0, 8, size=12)
    tape = Tape()
    loss = tape.softmax_xent(model.forward(tape, clouds).logits, labels)
    assert abs(float(loss.value) - math.log(8)) < 0.1 * math.log(8)


def test_same_seed_same_weights(tiny_config):
    a = SetMixerClassifier(tiny_config(), seed=7)
    b = SetMixerClassifier(tiny_config(), seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.name == q.name
        assert_array_equal(p.value, q.value)
    assert len({p.name for p in a.parameters()}) == len(a.parameters())


@pytest.mark.parametrize("options", [
    {},
    {"aggregator": "max_pool"},
    {"aggregator": "mean_pool"},
    {"aggregator": "mixer_no_sort"},
    {"legacy_centering": True, "center_mode": "query_point"},
])
def test_model_gradients_match_finite_differences(tiny_config, random_cloud, options):
    model = SetMixerClassifier(tiny_config(**options), seed=2)
    clouds = [random_cloud(32, seed=10), random_cloud(32, seed=11)]
    report = gradcheck_model(model, clouds, [0, 2], max_entries=6, seed=1)
    assert report.max_rel_error < 1e-4, report


def test_sort_keys_use_spatial_center_in_both_center_modes(tiny_config, random_cloud):
    plan = parse_plan("pcs+eds")
    cloud = random_cloud(48, seed=7)
    spatial = SetMixerClassifier(tiny_config(plan=plan), seed=1).plan(cloud).levels[0]
    query = SetMixerClassifier(tiny_config(plan=plan, center_mode="query_point"),
                               seed=1).plan(cloud).levels[0]
    g = query.group
    assert_array_equal(query.orders, spatial.orders)
    assert_array_equal(query.orders, plan_orders(query.member_coords, plan, g.spatial_centers))
    around_query = plan_orders(query.member_coords, plan, g.centers)
    assert not np.array_equal(query.orders, around_query)
    assert_array_equal(query.centers_out, g.centers)
    assert_array_equal(spatial.centers_out, g.spatial_centers)


def test_training_pass_updates_norm_statistics(tiny_config, random_cloud):
    model = SetMixerClassifier(tiny_config(), seed=0)
    clouds = [random_cloud(32, seed=s) for s in range(3)]
    plans = [model.plan(c) for c in clouds]
    loss, logits, tape = loss_and_gradients(model, clouds, [0, 1, 2], plans, make_rng(0))
    assert np.isfinite(loss)
    assert logits.shape == (3, 3)
    assert all(p.grad is not None for p in model.parameters())
    before = {k: v.copy() for k, v in model.buffers().items()}
    tape.commit_norm_updates()
    after = model.buffers()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_frozen_plan_reuses_groupings(tiny_config, random_cloud):
    model = SetMixerClassifier(tiny_config())
    cloud = random_cloud(32, seed=3)
    plan = model.plan(cloud)
    moved = cloud.with_coords(cloud.coords * 0.9)
    frozen = model.plan(moved, frozen=plan)
    for a, b in zip(plan.levels, frozen.levels):
        assert_array_equal(a.group.indices, b.group.indices)
    with pytest.raises(BadCountError):
        model.plan(random_cloud(40, seed=3), frozen=plan)
