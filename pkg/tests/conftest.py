import pytest

from countervox.phantom import PhantomSpec, make_gt_graph, render_phantom, sample_cohort


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(dims=(32, 32, 32), seed=3)


@pytest.fixture(scope="session")
def small_gt():
    return make_gt_graph(
        6,
        base_mm3=280.0,
        age_weight=-1.5,
        sex_weight=15.0,
        diagnosis_weights=-40.0,
        noise_scale=6.0,
    )


@pytest.fixture(scope="session")
def rendered_subject(small_spec, small_gt):
    record = sample_cohort(small_spec, small_gt, 1, seed=2)[0]
    volume, labels, probs = render_phantom(small_spec, record)
    return record, volume, labels, probs
