"""Module-wise aggregation and gradient-divergence metric tests."""

import numpy as np
import pytest

from eclm.aggregation import (
    DeviceUpdate,
    aggregate,
    divergence_metric,
    update_from_submodel,
)
from eclm.derivation import ImportanceVector
from eclm.errors import DataError, StalenessError
from eclm.modular import (
    ModelShape,
    SubModelSpec,
    make_model_selector,
    materialize_submodel,
    model_arrays,
    modularize,
    selector_arrays,
)
from eclm.rng import stream


def setup(l=1, n=4, k=2, seed=0):
    shape = ModelShape(
        input_dim=5, num_classes=3, front_dims=(6,), num_module_layers=l,
        layer_width=6, layer_hidden=6, modules_per_layer=n,
    )
    model = modularize(shape, seed)
    selector = make_model_selector(shape, (6,), k, seed)
    return model, selector


def importance_for(model, weights_by_layer):
    return ImportanceVector([np.asarray(w, dtype=np.float64) for w in weights_by_layer])


def full_spec(model):
    return SubModelSpec(
        layers=tuple(tuple(ml.module_indices()) for ml in model.module_layers)
    )


def make_update(model, selector, device_id, spec=None, importance=None, samples=10,
                perturb=0.0, perturb_seed=0):
    spec = spec or full_spec(model)
    sub = materialize_submodel(model, spec)
    sel = selector.copy()
    if perturb:
        rng = stream(perturb_seed, "perturb", device_id)
        for _, arr in model_arrays(sub) + selector_arrays(sel):
            arr += perturb * rng.normal(size=arr.shape)
    imp = importance or ImportanceVector(
        [np.full(ml.n_modules, 1.0 / ml.n_modules) for ml in model.module_layers]
    )
    return update_from_submodel(sub, sel, imp, samples, device_id)


def test_single_update_idempotent_bit_exact():
    model, selector = setup()
    update = make_update(model, selector, device_id=0)
    new_model, new_selector, report = aggregate(model, selector, [update])
    for (name, a), (_, b) in zip(model_arrays(new_model), model_arrays(model)):
        assert np.array_equal(a, b), name
    for (name, a), (_, b) in zip(selector_arrays(new_selector), selector_arrays(selector)):
        assert np.array_equal(a, b), name
    assert new_model.version == model.version + 1


def test_single_contributor_module_copied_exactly():
    model, selector = setup()
    spec = SubModelSpec(layers=((1,),))
    update = make_update(model, selector, 3, spec=spec, perturb=0.05)
    new_model, _, report = aggregate(model, selector, [update])
    got = new_model.get_module(0, 1).layers[0].w.data
    want = update.arrays["mod.0.1.0.w"]
    assert np.array_equal(got, want)
    assert report.contributors["mod.0.1"] == 1


def test_equal_importance_two_contributors_mean():
    model, selector = setup()
    u1 = make_update(model, selector, 0, perturb=0.1, perturb_seed=1)
    u2 = make_update(model, selector, 1, perturb=0.1, perturb_seed=2)
    new_model, _, _ = aggregate(model, selector, [u1, u2])
    name = "mod.0.0.0.w"
    expected = (u1.arrays[name] + u2.arrays[name]) / 2
    np.testing.assert_allclose(
        new_model.get_module(0, 0).layers[0].w.data, expected, atol=1e-15
    )


def test_importance_weighted_mean_direct_formula():
    model, selector = setup()
    imp1 = importance_for(model, [[0.1, 0.3, 0.3, 0.3]])
    imp2 = importance_for(model, [[0.3, 0.3, 0.3, 0.1]])
    u1 = make_update(model, selector, 0, importance=imp1, perturb=0.1, perturb_seed=3)
    u2 = make_update(model, selector, 1, importance=imp2, perturb=0.1, perturb_seed=4)
    new_model, _, report = aggregate(model, selector, [u1, u2])
    name = "mod.0.0.0.w"
    expected = (0.1 * u1.arrays[name] + 0.3 * u2.arrays[name]) / 0.4
    np.testing.assert_allclose(
        new_model.get_module(0, 0).layers[0].w.data, expected, atol=1e-12
    )
    np.testing.assert_allclose(report.weights["mod.0.0"], [0.25, 0.75], atol=1e-12)


def test_module_in_no_update_unchanged():
    model, selector = setup()
    spec = SubModelSpec(layers=((0, 1),))
    u = make_update(model, selector, 0, spec=spec, perturb=0.2)
    before = model.get_module(0, 2).layers[0].w.data.copy()
    new_model, _, report = aggregate(model, selector, [u])
    assert np.array_equal(new_model.get_module(0, 2).layers[0].w.data, before)
    assert "mod.0.2" in report.untouched


def test_fedavg_reduction_full_specs_uniform():
    model, selector = setup()
    ups = [
        make_update(model, selector, d, perturb=0.1, perturb_seed=10 + d, samples=20)
        for d in range(3)
    ]
    new_model, new_selector, _ = aggregate(model, selector, ups)
    for name, arr in model_arrays(new_model) + selector_arrays(new_selector):
        expected = sum(u.arrays[name] for u in ups) / 3
        np.testing.assert_allclose(arr, expected, atol=1e-12, err_msg=name)


def test_convexity_of_aggregated_parameters():
    rng = stream(0, "convex")
    for trial in range(100):
        model, selector = setup(seed=int(rng.integers(1000)))
        ups = [
            make_update(model, selector, d, perturb=0.3, perturb_seed=int(rng.integers(10_000)))
            for d in range(3)
        ]
        new_model, _, _ = aggregate(model, selector, ups)
        name = "mod.0.1.0.w"
        stacked = np.stack([u.arrays[name] for u in ups])
        agg = new_model.get_module(0, 1).layers[0].w.data
        assert np.all(agg >= stacked.min(axis=0) - 1e-12)
        assert np.all(agg <= stacked.max(axis=0) + 1e-12)


def test_order_invariance_bit_exact():
    model, selector = setup()
    ups = [
        make_update(model, selector, d, perturb=0.1, perturb_seed=20 + d, samples=5 + d)
        for d in range(4)
    ]
    m1, s1, _ = aggregate(model, selector, list(ups))
    m2, s2, _ = aggregate(model, selector, list(reversed(ups)))
    for (name, a), (_, b) in zip(model_arrays(m1), model_arrays(m2)):
        assert np.array_equal(a, b), name
    for (name, a), (_, b) in zip(selector_arrays(s1), selector_arrays(s2)):
        assert np.array_equal(a, b), name


def test_stale_update_rejected_and_logged():
    model, selector = setup()
    fresh = make_update(model, selector, 0)
    stale = make_update(model, selector, 1)
    stale.version = model.version - 1
    _, _, report = aggregate(model, selector, [fresh, stale])
    assert report.rejected_stale == [1]
    with pytest.raises(StalenessError):
        aggregate(model, selector, [stale])
    with pytest.raises(DataError):
        aggregate(model, selector, [])


def test_divergence_zero_for_identical_deltas():
    model, selector = setup()
    ups = []
    for d in range(3):
        u = make_update(model, selector, d)
        for arr in u.arrays.values():
            arr += 0.25  # same delta everywhere
        ups.append(u)
    div = divergence_metric(model, selector, ups)
    assert div["overall"] == pytest.approx(0.0, abs=1e-18)


def test_divergence_two_point_variance():
    model, selector = setup()
    u1 = make_update(model, selector, 0)
    u2 = make_update(model, selector, 1)
    d = 0.75
    u1.arrays["head.b"] = u1.arrays["head.b"] + d
    u2.arrays["head.b"] = u2.arrays["head.b"] - d
    div = divergence_metric(model, selector, [u1, u2])
    assert div["per_group"]["head"] > 0
    # deltas +d and -d on each coordinate -> population variance d^2
    head_b_coords = model.head.b.data.size
    head_w_coords = model.head.w.data.size
    expected = d * d * head_b_coords / (head_b_coords + head_w_coords)
    assert div["per_group"]["head"] == pytest.approx(expected, rel=1e-12)


def test_divergence_matches_direct_variance():
    model, selector = setup()
    rng = stream(5, "divvar")
    ups = [make_update(model, selector, d, perturb=0.2, perturb_seed=30 + d) for d in range(4)]
    div = divergence_metric(model, selector, ups)
    base = dict(model_arrays(model))
    name = "front.0.w"
    deltas = np.stack([u.arrays[name] - base[name] for u in ups])
    manual_w = deltas.var(axis=0)
    name_b = "front.0.b"
    deltas_b = np.stack([u.arrays[name_b] - base[name_b] for u in ups])
    manual = (manual_w.sum() + deltas_b.var(axis=0).sum()) / (
        manual_w.size + deltas_b.var(axis=0).size
    )
    assert div["per_group"]["front"] == pytest.approx(manual, rel=1e-12)


def test_divergence_undefined_without_overlap():
    model, selector = setup()
    u1 = make_update(model, selector, 0, spec=SubModelSpec(layers=((0,),)))
    div = divergence_metric(model, selector, [u1])
    assert div["overall"] is None
