from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from keeplora.adapter import InitVariant, init_from_gradient
from keeplora.metrics import (
    AccuracyGrid,
    IncompleteGridError,
    adapter_output_norm,
    backward_forgetting,
    compute_metrics,
    interference_heatmap,
    spectra_analysis,
)
from keeplora.model import Layer, LinearModel, ModelSpec, accuracy, build_model
from keeplora.subspace import UnifiedSubspace, extract_principal
from keeplora.tasks import gen_gaussian_tasks, gen_planted_spectrum_model

import table7

grids = st.integers(1, 7).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(0, 1)))


def test_constant_grid():
    rep = compute_metrics(AccuracyGrid(np.full((4, 4), 0.5)))
    assert rep.transfer == rep.average == rep.last == 0.5
    assert all(m.average == 0.5 and m.last == 0.5 for m in rep.per_task)


def test_caltech_and_aircraft_columns():
    rep = compute_metrics(AccuracyGrid(table7.GRID))
    caltech, aircraft = rep.per_task[1], rep.per_task[0]
    assert caltech.transfer == pytest.approx(84.6, abs=1e-12)
    assert abs(caltech.average - 95.7) <= 0.05 and caltech.last == 96.8
    assert abs(aircraft.average - 55.6) <= 0.05 and aircraft.last == 53.2
    assert aircraft.transfer is None


def test_single_task_grid():
    rep = compute_metrics(AccuracyGrid([[0.7]]))
    assert rep.transfer is None and rep.last == 0.7 and rep.per_task[0].transfer is None


def test_incomplete_grid_lists_cells():
    a = np.full((3, 3), 0.5)
    a[1, 2] = np.nan
    with pytest.raises(IncompleteGridError, match=r"stage 2, task 3"):
        compute_metrics(AccuracyGrid(a))
    with pytest.raises(IncompleteGridError):
        compute_metrics(AccuracyGrid(np.full((2, 3), 0.5)))
    with pytest.raises(ValueError):
        AccuracyGrid(np.ones(3))


@given(grids)
def test_metrics_match_one_line_oracle(a):
    rep = compute_metrics(AccuracyGrid(a))
    n = a.shape[0]
    t_ref = [sum(a[i, t] for i in range(t)) / t for t in range(1, n)]
    assert all(abs(m.average - sum(a[:, t]) / n) <= 1e-12 for t, m in enumerate(rep.per_task))
    assert all(m.last == a[-1, t] for t, m in enumerate(rep.per_task))
    if n > 1:
        assert abs(rep.transfer - sum(t_ref) / len(t_ref)) <= 1e-12
        assert all(abs(m.transfer - r) <= 1e-12 for m, r in zip(rep.per_task[1:], t_ref))
    assert 0 <= rep.average <= 1 and 0 <= rep.last <= 1


@given(grids)
def test_duplicate_final_stage(a):
    n = a.shape[0]
    rep = compute_metrics(AccuracyGrid(a))
    longer = compute_metrics(AccuracyGrid(np.vstack([a, a[-1:]])))
    assert longer.last == rep.last
    for t in range(n):
        expect = (n * rep.per_task[t].average + a[-1, t]) / (n + 1)
        assert abs(longer.per_task[t].average - expect) <= 1e-12
        assert longer.per_task[t].transfer == rep.per_task[t].transfer


def test_backward_forgetting():
    a = np.array([[0.9, 0.1, 0.2], [0.7, 0.8, 0.3], [0.6, 0.5, 0.9]])
    assert backward_forgetting(AccuracyGrid(a)) == pytest.approx(((0.9 - 0.6) + (0.8 - 0.5)) / 2)
    assert backward_forgetting(AccuracyGrid([[0.3]])) == 0.0


def adapted_stage(rng, model, variant, layer=0, u=None, train=True):
    w = model.layers[layer].weight
    ad = init_from_gradient(rng.standard_normal(w.shape), u, 2, 4.0, variant, rng=rng, w=w)
    if train:
        ad.B = ad.B + rng.standard_normal(ad.B.shape)
    return SimpleNamespace(model=model, adapters={layer: ad})


def test_untrained_b_zero_adapters_give_zero_heatmap():
    rng = np.random.default_rng(0)
    stream = gen_gaussian_tasks(0, 3, 12, 2, 10, 0.0)
    model = build_model(ModelSpec(hidden=(8, 8)), 12, stream.total_classes)
    cks = [adapted_stage(rng, model, InitVariant.vanilla_lora, train=False) for _ in range(3)]
    hm = interference_heatmap(cks, stream)
    assert not hm.norms.any() and hm.norms.shape == (3, 3)


def test_keeplora_adapter_silent_on_principal_inputs():
    rng = np.random.default_rng(1)
    model = build_model(ModelSpec(hidden=(16, 8), spectral_decay=0.8), 12, 4)
    u = UnifiedSubspace(extract_principal(model.layers[0].weight, 0.85))
    ck = adapted_stage(rng, model, InitVariant.keeplora, u=u)
    x = (u.Wp.basis @ rng.standard_normal((u.Wp.k, 30))).T
    assert np.max(np.abs(ck.adapters[0].output(x))) <= 1e-10
    assert adapter_output_norm(ck, x) <= 1e-10


def test_heatmap_invariant_to_sample_order():
    rng = np.random.default_rng(2)
    stream = gen_gaussian_tasks(1, 2, 12, 2, 10, 0.0)
    model = build_model(ModelSpec(hidden=(8, 8)), 12, stream.total_classes)
    cks = [adapted_stage(rng, model, InitVariant.grad_only) for _ in range(2)]
    hm = interference_heatmap(cks, stream)
    perm = [t.__class__(t.name, t.train, t.test.subset(rng.permutation(len(t.test))), t.classes)
            for t in stream]
    hm2 = interference_heatmap(cks, stream.__class__(tuple(perm), stream.master_seed))
    np.testing.assert_allclose(hm2.raw, hm.raw, rtol=1e-12)
    assert hm.norms.max() == 1.0 and np.all(hm.norms >= 0)
    np.testing.assert_allclose(hm.column_means, hm.norms.mean(axis=1))


def test_heatmap_missing_checkpoint():
    stream = gen_gaussian_tasks(1, 2, 12, 2, 10, 0.0)
    with pytest.raises(ValueError):
        interference_heatmap([], stream)
    with pytest.raises(ValueError):
        interference_heatmap([None], stream)


def test_spectra_full_rank_matches_model():
    w, general, specific = gen_planted_spectrum_model(0, 16, 3, 3)
    rows = spectra_analysis(w, [general, specific], [min(w.shape)])
    m = LinearModel([Layer(w, np.zeros(w.shape[1]))])
    assert rows[0].accuracy == accuracy(m, general.test, (0, 6))
    assert rows[1].accuracy == accuracy(m, specific.test, (6, 6))
    with pytest.raises(ValueError):
        spectra_analysis(w, [general], [0])
    with pytest.raises(ValueError):
        spectra_analysis(w, [general], [min(w.shape) + 1])


def test_spectra_general_flat_specific_degrades():
    g, s = 4, 4
    w, general, specific = gen_planted_spectrum_model(3, 24, g, s)
    rows = spectra_analysis(w, [general, specific], list(range(1, 2 * (g + s) + 1)))
    acc = {(r.k, r.task): r.accuracy for r in rows}
    full = min(w.shape)
    for k in range(g, full + 1):
        assert acc[(k, "general")] == acc[(full, "general")]
    spec = [acc[(k, "specific")] for k in range(g, g + s + 1)]
    assert all(b >= a for a, b in zip(spec, spec[1:]))
    assert spec[0] < spec[-1]


def test_spectra_on_model_layer():
    stream = gen_gaussian_tasks(0, 2, 10, 2, 10, 0.0)
    model = build_model(ModelSpec(hidden=(6, 6)), 10, stream.total_classes)
    heads = [stream.head(i) for i in range(2)]
    rows = spectra_analysis(model.layers[0].weight, list(stream), [6], model=model, heads=heads)
    assert [r.accuracy for r in rows] == [accuracy(model, t.test, h) for t, h in zip(stream, heads)]
