import numpy as np
import pytest

from countervox.diffusion import (
    GaussianOracleDenoiser,
    LatentOracleDenoiser,
    ddim_invert,
    make_schedule,
)
from countervox.grid import FIRST_ROI, roi_label, roi_voxel_count
from countervox.phantom import (
    PhantomSpec,
    make_gt_graph,
    render_phantom,
    sample_cohort,
)
from countervox.pipeline import (
    CounterfactualRequest,
    batch_generate,
    encode_control,
    generate_counterfactual,
    metadata_stats_from_cohort,
    metadata_vector,
)


@pytest.fixture(scope="module")
def setup():
    spec = PhantomSpec(dims=(32, 32, 32), seed=3)
    gt = make_gt_graph(6, base_mm3=280.0, age_weight=-1.5, sex_weight=15.0,
                       diagnosis_weights=[-50, -50, -50, -50, -50, 0.0],
                       noise_scale=6.0)
    cohort = sample_cohort(spec, gt, 3, seed=2)
    rec = cohort[0]
    volume, labels, probs = render_phantom(spec, rec)
    sched = make_schedule("linear", 1000)
    denoiser = GaussianOracleDenoiser(sched, 0.4, 0.3)
    decoder = LatentOracleDenoiser(sched, 1e-6)
    return spec, gt, cohort, rec, volume, labels, probs, sched, denoiser, decoder


def test_null_intervention_near_identity(setup):
    _, gt, _, rec, volume, labels, probs, sched, den, dec = setup
    req = CounterfactualRequest(volume, labels, rec.metadata, {}, probs=probs,
                                seed=1, subject_id=rec.id)
    res = generate_counterfactual(req, gt, den, sched, decoder=dec,
                                  encode_factor=1, substeps=50)
    rms = float(np.sqrt(np.mean((res.volume.values - volume.values) ** 2)))
    assert rms < 5e-3
    assert np.array_equal(res.labels.labels, labels.labels)  # exact identity
    assert all(p.budget == 0 for p in res.plans)
    assert res.recon_rms is not None and res.recon_rms < 1e-3


def test_diagnosis_intervention_shifts_roi_counts(setup):
    _, gt, _, rec, volume, labels, probs, sched, den, dec = setup
    assert rec.metadata["diagnosis"] == 0.0
    req = CounterfactualRequest(volume, labels, rec.metadata, {"diagnosis": 1.0},
                                probs=probs, seed=1, subject_id=rec.id)
    res = generate_counterfactual(req, gt, den, sched, decoder=None,
                                  encode_factor=2, substeps=50)
    for k in range(1, 6):
        delta = roi_voxel_count(res.labels, roi_label(k)) - roi_voxel_count(labels, roi_label(k))
        assert abs(delta + 50) <= 1  # gt effect is -50 mm^3 = -50 voxels
    delta6 = roi_voxel_count(res.labels, roi_label(6)) - roi_voxel_count(labels, roi_label(6))
    assert abs(delta6) <= 1
    # counterfactual assignment recorded for downstream consumers
    assert res.counterfactual["diagnosis"] == 1.0
    assert res.counterfactual["roi_1"] == pytest.approx(res.observation["roi_1"] - 50.0)


def test_pipeline_deterministic(setup):
    _, gt, _, rec, volume, labels, probs, sched, den, dec = setup
    req = CounterfactualRequest(volume, labels, rec.metadata, {"diagnosis": 1.0},
                                probs=probs, seed=9, subject_id=rec.id)
    a = generate_counterfactual(req, gt, den, sched, decoder=dec, encode_factor=2)
    b = generate_counterfactual(req, gt, den, sched, decoder=dec, encode_factor=2)
    assert np.array_equal(a.volume.values, b.volume.values)
    assert np.array_equal(a.labels.labels, b.labels.labels)
    assert a.counterfactual == b.counterfactual


def test_probs_derived_when_missing(setup):
    _, gt, _, rec, volume, labels, probs, sched, den, _ = setup
    req_with = CounterfactualRequest(volume, labels, rec.metadata, {"diagnosis": 1.0},
                                     probs=probs, seed=1)
    req_without = CounterfactualRequest(volume, labels, rec.metadata, {"diagnosis": 1.0},
                                        probs=None, seed=1)
    a = generate_counterfactual(req_with, gt, den, sched, encode_factor=2)
    b = generate_counterfactual(req_without, gt, den, sched, encode_factor=2)
    assert np.array_equal(a.labels.labels, b.labels.labels)


def test_intervention_on_non_root_rejected(setup):
    _, gt, _, rec, volume, labels, probs, _, _, _ = setup
    req = CounterfactualRequest(volume, labels, rec.metadata, {"roi_1": 100.0}, probs=probs)
    sched = make_schedule("linear", 100)
    den = GaussianOracleDenoiser(sched, 0.0, 1.0)
    with pytest.raises(ValueError):
        generate_counterfactual(req, gt, den, sched, encode_factor=2)


def test_graph_must_cover_all_rois(setup):
    _, _, _, rec, volume, labels, probs, sched, den, _ = setup
    small_gt = make_gt_graph(3, base_mm3=280.0)
    req = CounterfactualRequest(volume, labels, rec.metadata, {}, probs=probs)
    with pytest.raises(ValueError):
        generate_counterfactual(req, small_gt, den, sched, encode_factor=2)


def test_tau_validation(setup):
    _, _, _, rec, volume, labels, probs, _, _, _ = setup
    with pytest.raises(ValueError):
        CounterfactualRequest(volume, labels, rec.metadata, {}, probs=probs, tau=0.0)
    with pytest.raises(ValueError):
        CounterfactualRequest(volume, labels, rec.metadata, {}, probs=probs, tau=1.2)


def test_cached_inversion_reused(setup):
    _, gt, _, rec, volume, labels, probs, sched, den, _ = setup
    from countervox.diffusion import Conditioning, encode_volume
    import math

    req = CounterfactualRequest(volume, labels, rec.metadata, {"diagnosis": 1.0},
                                probs=probs, seed=1, subject_id=rec.id)
    direct = generate_counterfactual(req, gt, den, sched, encode_factor=2)

    roots = sorted(gt.roots)
    z = encode_volume(volume, 2).values
    n_inv = math.ceil(req.tau * 50)
    orig_cond = Conditioning(
        metadata=metadata_vector(rec.metadata, roots),
        control=encode_control(labels, 2),
    )
    inv = ddim_invert(den, orig_cond, sched, 50, z,
                      guidance_w=req.guidance_w, steps=n_inv)
    cached = generate_counterfactual(req, gt, den, sched, encode_factor=2,
                                     cached_inversion=inv[-1])
    assert np.array_equal(direct.volume.values, cached.volume.values)


def test_batch_empty():
    sched = make_schedule("linear", 10)
    den = GaussianOracleDenoiser(sched, 0.0, 1.0)
    gt = make_gt_graph(1)
    assert batch_generate([], gt, den, sched) == []


def test_batch_matches_single_calls(setup):
    _, gt, cohort, _, _, _, _, sched, den, _ = setup
    spec = PhantomSpec(dims=(32, 32, 32), seed=3)
    reqs = []
    for rec in cohort[:2]:
        volume, labels, probs = render_phantom(spec, rec)
        reqs.append(CounterfactualRequest(volume, labels, rec.metadata, {"diagnosis": 1.0},
                                          probs=probs, seed=4, subject_id=rec.id))
    batch = batch_generate(reqs, gt, den, sched, encode_factor=2)
    singles = [generate_counterfactual(r, gt, den, sched, encode_factor=2) for r in reqs]
    assert [r.subject_id for r in batch] == [r.subject_id for r in singles]
    for a, b in zip(batch, singles):
        assert np.array_equal(a.volume.values, b.volume.values)
        assert np.array_equal(a.labels.labels, b.labels.labels)


def test_batch_captures_errors_without_aborting(setup):
    _, gt, _, rec, volume, labels, probs, sched, den, _ = setup
    good = CounterfactualRequest(volume, labels, rec.metadata, {"diagnosis": 1.0},
                                 probs=probs, seed=1, subject_id="good")
    bad = CounterfactualRequest(volume, labels, rec.metadata, {"bogus": 1.0},
                                probs=probs, seed=1, subject_id="bad")
    results = batch_generate([good, bad, good], gt, den, sched, encode_factor=2)
    assert [r.error is None for r in results] == [True, False, True]
    assert "bogus" in results[1].error
    assert results[1].volume is None


def test_exhausted_edits_surfaced_not_fatal(setup):
    spec, _, _, rec, volume, labels, probs, sched, den, _ = setup
    # an absurd growth request exhausts the sector capacity but must not raise
    huge = make_gt_graph(6, base_mm3=280.0, diagnosis_weights=4000.0, noise_scale=6.0)
    req = CounterfactualRequest(volume, labels, rec.metadata, {"diagnosis": 1.0},
                                probs=probs, seed=1)
    res = generate_counterfactual(req, huge, den, sched, encode_factor=2)
    assert res.error is None
    assert res.exhausted_rois  # at least one plan ran out of boundary
    assert all(p.achieved <= p.budget for p in res.plans)


def test_metadata_vector_zscoring():
    meta = {"age": 50.0, "sex": 1.0}
    stats = {"age": (40.0, 10.0), "sex": (0.5, 0.5)}
    vec = metadata_vector(meta, ["age", "sex"], stats)
    assert vec.tolist() == [1.0, 1.0]
    raw = metadata_vector(meta, ["sex", "age"])
    assert raw.tolist() == [1.0, 50.0]


def test_metadata_stats_from_cohort(setup):
    _, _, cohort, _, _, _, _, _, _, _ = setup
    stats = metadata_stats_from_cohort(cohort)
    assert set(stats) == {"age", "sex", "diagnosis"}
    ages = np.array([r.metadata["age"] for r in cohort])
    assert stats["age"][0] == pytest.approx(ages.mean())


def test_encode_control_block_fractions(setup):
    _, _, _, _, _, labels, _, _, _, _ = setup
    ctrl = encode_control(labels, 2)
    n_labels = FIRST_ROI + labels.num_rois
    assert ctrl.shape == (n_labels, 16, 16, 16)
    # per-block label fractions sum to one
    assert np.allclose(ctrl.sum(axis=0), 1.0, atol=1e-12)
    # and average to exact voxel proportions
    for c in range(n_labels):
        frac = np.count_nonzero(labels.labels == c) / labels.labels.size
        assert ctrl[c].mean() == pytest.approx(frac, abs=1e-12)
