import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adprog.cohort import (Cohort, CohortError, CohortParseError, NormalizationError, NormalizationSpec,
                           SubjectSequence, compute_delay_tensor, fit_and_apply_normalizer, load_cohort_csv,
                           plan_random_removal, stratified_folds, synthesize_cohort, write_cohort_csv)

HEADER = "subject_id,time_years,label,mri_a,cog_b\n"


def write(tmp_path, text, name="c.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def closed_form_delay(times, mask):
    T, D = mask.shape
    out = np.empty((T, D))
    for d in range(D):
        for t in range(T):
            if t == 0:
                out[t, d] = 1.0
                continue
            prev = [u for u in range(t) if mask[u, d]]
            out[t, d] = times[t] - times[prev[-1]] if prev else times[t] - times[0] + 1.0
    return out


def make_subject(sid, T, D=2, label=0, seed=0):
    r = np.random.default_rng(seed)
    return SubjectSequence(sid, np.arange(T, dtype=float), r.normal(size=(T, D)), np.ones((T, D), bool),
                           np.full(T, label), np.ones(T, bool))


# --- loading ------------------------------------------------------------------

def test_load_full_rows(tmp_path):
    path = write(tmp_path, HEADER + "A,0,CN,1,2\nA,1,MCI,3,4\n")
    c = load_cohort_csv(path, min_visits=1)
    s = c.subjects[0]
    assert s.mask.all() and s.label_mask.all()
    assert c.feature_kinds == ["MRI", "Cog"]
    assert list(s.labels) == [0, 1]


def test_load_blank_cell_is_missing(tmp_path):
    path = write(tmp_path, HEADER + "A,0,CN,1,\nA,1,,3,4\n")
    s = load_cohort_csv(path, min_visits=1).subjects[0]
    assert not s.mask[0, 1] and s.values[0, 1] == 0.0
    assert list(s.label_mask) == [True, False]


def test_load_excludes_short_subjects(tmp_path):
    path = write(tmp_path, HEADER + "A,0,CN,1,2\nA,1,CN,1,2\n" + "".join(f"B,{t},CN,1,2\n" for t in range(3)))
    c = load_cohort_csv(path, min_visits=3)
    assert c.ids() == ["B"] and c.n_excluded == 1


def test_load_sorts_visits(tmp_path):
    path = write(tmp_path, HEADER + "A,2,AD,5,6\nA,0,CN,1,2\nA,1,MCI,3,4\n")
    s = load_cohort_csv(path).subjects[0]
    assert list(s.times) == [0, 1, 2]
    assert list(s.values[:, 0]) == [1, 3, 5]


def test_load_icv_column(tmp_path):
    path = write(tmp_path, "subject_id,time_years,label,icv,mri_a\nA,0,CN,2.0,1\nA,1,CN,2.0,3\n")
    assert load_cohort_csv(path, min_visits=1).subjects[0].icv == 2.0


@pytest.mark.parametrize("body,line", [
    ("A,0,CN,1\n", 2),
    ("A,x,CN,1,2\n", 2),
    ("A,0,CN,1,2\nA,1,XX,1,2\n", 3),
    ("A,0,CN,1,2\nA,1,CN,oops,2\n", 3),
])
def test_load_parse_errors_carry_line(tmp_path, body, line):
    with pytest.raises(CohortParseError) as exc:
        load_cohort_csv(write(tmp_path, HEADER + body), min_visits=1)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_load_bad_header(tmp_path):
    with pytest.raises(CohortParseError):
        load_cohort_csv(write(tmp_path, "id,time,label,mri_a\n"))
    with pytest.raises(CohortParseError):
        load_cohort_csv(write(tmp_path, "subject_id,time_years,label,weird\n"))


def test_load_duplicate_visit(tmp_path):
    with pytest.raises(CohortError, match="duplicate"):
        load_cohort_csv(write(tmp_path, HEADER + "A,0,CN,1,2\nA,0,CN,1,2\n"), min_visits=1)


def test_csv_round_trip(tmp_path):
    c = synthesize_cohort(9, 4, 2, 1, 0.3, seed=5)
    path = str(tmp_path / "c.csv")
    write_cohort_csv(c, path)
    back = load_cohort_csv(path, min_visits=1)
    for a, b in zip(c, back):
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.labels, b.labels)


def test_subject_validation():
    with pytest.raises(CohortError):
        SubjectSequence("A", [0.0, 0.0], np.zeros((2, 1)), np.ones((2, 1)), [0, 0], [1, 1])
    with pytest.raises(CohortError):
        SubjectSequence("A", [0.0], np.zeros((2, 1)), np.ones((2, 1)), [0], [1])
    with pytest.raises(CohortError):
        Cohort([], ["x"], ["PET"])


# --- normalization ------------------------------------------------------------

def test_normalize_endpoints():
    subj = SubjectSequence("A", [0.0, 1.0], np.array([[10.0, 3.0], [20.0, 7.0]]), np.ones((2, 2), bool),
                           [0, 0], [1, 1])
    c = Cohort([subj], ["mri_a", "cog_b"], ["MRI", "Cog"])
    out, spec = fit_and_apply_normalizer(c)
    np.testing.assert_array_equal(out.subjects[0].values[:, 0], [-1.0, 1.0])
    assert out.subjects[0].values[1, 1] == 1.0
    assert out.subjects[0].values[0, 1] == 0.0


def test_normalize_round_trip_and_missing_untouched():
    c = synthesize_cohort(30, 5, 3, 2, 0.25, seed=1)
    fwd, spec = fit_and_apply_normalizer(c)
    back, _ = fit_and_apply_normalizer(fwd, "inverse", spec)
    for a, b, f in zip(c, back, fwd):
        np.testing.assert_allclose(b.values[a.mask], a.values[a.mask], rtol=0, atol=1e-9)
        assert np.all(f.values[~a.mask] == 0.0)
    for f in fwd:
        v = f.values[f.mask]
        assert v.min() >= -1 - 1e-12 and v.max() <= 1 + 1e-12


def test_normalize_icv_division():
    subj = [SubjectSequence(s, [0.0, 1.0], np.array([[v, 1.0], [2 * v, 2.0]]), np.ones((2, 2), bool),
                            [0, 0], [1, 1], icv=icv) for s, v, icv in (("A", 10.0, 10.0), ("B", 40.0, 20.0))]
    c = Cohort(subj, ["mri_a", "cog_b"], ["MRI", "Cog"])
    fwd, spec = fit_and_apply_normalizer(c)
    assert spec.use_icv
    np.testing.assert_allclose(spec.mins, [1.0, 1.0])
    np.testing.assert_allclose(spec.maxs, [4.0, 2.0])
    back, _ = fit_and_apply_normalizer(fwd, "inverse", spec)
    np.testing.assert_allclose(back.subjects[1].values, subj[1].values, atol=1e-12)
    again = NormalizationSpec.from_dict(spec.to_dict())
    np.testing.assert_array_equal(again.maxs, spec.maxs)


def test_normalize_degenerate_feature_named():
    subj = SubjectSequence("A", [0.0, 1.0], np.array([[5.0, 1.0], [5.0, 2.0]]), np.ones((2, 2), bool), [0, 0],
                           [1, 1])
    with pytest.raises(NormalizationError, match="mri_flat"):
        fit_and_apply_normalizer(Cohort([subj], ["mri_flat", "cog_b"], ["MRI", "Cog"]))


def test_inverse_needs_spec():
    with pytest.raises(NormalizationError):
        fit_and_apply_normalizer(synthesize_cohort(3, 3, 1, 1, 0.0), "inverse")


# --- delays -------------------------------------------------------------------

@pytest.mark.parametrize("times,row,expected", [
    ([0, 1, 2], [1, 0, 1], [1, 1, 2]),
    ([0, 1, 2, 3], [1, 0, 0, 0], [1, 1, 2, 3]),
    ([0, 1, 2, 3], [1, 1, 1, 1], [1, 1, 1, 1]),
])
def test_delay_examples(times, row, expected):
    d = compute_delay_tensor(times, np.array(row, bool)[:, None])
    np.testing.assert_array_equal(d[:, 0], expected)


def test_delay_time_scale():
    d = compute_delay_tensor([0.0, 0.5, 1.0], np.array([[1], [0], [1]], bool), time_scale=12.0)
    np.testing.assert_allclose(d[:, 0], [1.0, 6.0, 12.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(1, 4), st.integers(0, 2**31))
def test_delay_closed_form(T, D, seed):
    r = np.random.default_rng(seed)
    times = np.cumsum(r.uniform(0.2, 2.0, size=T))
    mask = r.random((T, D)) < 0.5
    d = compute_delay_tensor(times, mask)
    np.testing.assert_allclose(d, closed_form_delay(times, mask), rtol=0, atol=1e-12)
    if T > 1:
        assert d[1:].min() >= np.diff(times).min() - 1e-12


# --- removal ------------------------------------------------------------------

def test_removal_zero_is_identity():
    c = synthesize_cohort(10, 4, 2, 1, 0.3, seed=2)
    assert all(k.all() for k in plan_random_removal(c, 0.0, 1).values())


def test_removal_exact_count():
    subj = make_subject("A", 10, D=10)
    plan = plan_random_removal(Cohort([subj], [f"mri_{i}" for i in range(10)], ["MRI"] * 10), 0.1, 3)
    assert (~plan["A"]).sum() == 10


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.95), st.integers(0, 10**6))
def test_removal_subset_of_observed(p, seed):
    c = synthesize_cohort(6, 4, 2, 2, 0.4, seed=seed % 7)
    plan = plan_random_removal(c, p, seed)
    n_obs = sum(int(s.mask.sum()) for s in c)
    removed = sum(int((s.mask & ~plan[s.subject_id]).sum()) for s in c)
    assert removed == int(np.floor(p * n_obs + 0.5))
    for s in c:
        assert not np.any(~plan[s.subject_id] & ~s.mask)
    again = plan_random_removal(c, p, seed)
    assert all(np.array_equal(plan[k], again[k]) for k in plan)


def test_removal_rejects_p_one():
    with pytest.raises(ValueError):
        plan_random_removal(synthesize_cohort(3, 3, 1, 1, 0.0), 1.0, 0)


# --- folds --------------------------------------------------------------------

def balanced_cohort(per_class=100):
    subjects = [make_subject(f"{c}{i:03d}", 3, label=c, seed=i) for c in range(3) for i in range(per_class)]
    return Cohort(subjects, ["mri_a", "cog_b"], ["MRI", "Cog"])


def test_folds_per_class_counts():
    c = balanced_cohort()
    folds = stratified_folds(c, 5, 0.1, 0.1, seed=0)
    assert len(folds) == 5
    label = {s.subject_id: s.baseline_label for s in c}
    for f in folds:
        for cls in range(3):
            assert sum(label[i] == cls for i in f.val) == 10
            assert sum(label[i] == cls for i in f.test) == 10
    tests = [set(f.test) for f in folds]
    for a in range(5):
        for b in range(a + 1, 5):
            assert not tests[a] & tests[b]


@pytest.mark.filterwarnings("ignore:class .* fewer than k")
@settings(max_examples=30, deadline=None)
@given(st.integers(5, 40), st.integers(2, 6), st.integers(0, 1000))
def test_folds_partition(n, k, seed):
    c = synthesize_cohort(n, 3, 1, 1, 0.0, seed=seed)
    folds = stratified_folds(c, k, 0.1, 0.1, seed)
    label = {s.subject_id: s.baseline_label for s in c}
    for f in folds:
        sets = set(f.train), set(f.val), set(f.test)
        assert sum(map(len, sets)) == len(c)
        assert set.union(*sets) == set(c.ids())
        for cls in range(3):
            n_cls = sum(v == cls for v in label.values())
            n_test = sum(label[i] == cls for i in f.test)
            assert abs(n_test - 0.1 * n_cls) <= 1
    again = stratified_folds(c, k, 0.1, 0.1, seed)
    assert [(f.train, f.val, f.test) for f in folds] == [(f.train, f.val, f.test) for f in again]


def test_folds_unlabeled_baseline_goes_to_train():
    c = balanced_cohort(10)
    s = c.subjects[0]
    c.subjects[0] = SubjectSequence(s.subject_id, s.times, s.values, s.mask, s.labels, [0, 1, 1])
    for f in stratified_folds(c, 2, 0.2, 0.2):
        assert s.subject_id in f.train


def test_folds_warn_on_small_class():
    c = Cohort([make_subject("a", 3, label=0), make_subject("b", 3, label=1), make_subject("c", 3, label=1)],
               ["mri_a", "cog_b"], ["MRI", "Cog"])
    with pytest.warns(UserWarning):
        stratified_folds(c, 3)


def test_folds_argument_errors():
    c = balanced_cohort(5)
    with pytest.raises(ValueError):
        stratified_folds(c, 1)
    with pytest.raises(ValueError):
        stratified_folds(c, 5, 0.5, 0.5)


# --- synthetic ----------------------------------------------------------------

def test_synth_no_missing():
    assert all(s.mask.all() for s in synthesize_cohort(10, 5, 3, 2, 0.0, seed=1))


def test_synth_deterministic():
    a, b = synthesize_cohort(20, 5, 3, 2, 0.3, seed=4), synthesize_cohort(20, 5, 3, 2, 0.3, seed=4)
    for x, y in zip(a, b):
        assert x.values.tobytes() == y.values.tobytes()
        assert np.array_equal(x.mask, y.mask) and np.array_equal(x.labels, y.labels)


def test_synth_missing_rate():
    c = synthesize_cohort(200, 11, 6, 3, 0.3, seed=0)
    rate = 1.0 - np.mean([s.mask.mean() for s in c])
    assert abs(rate - 0.3) <= 0.01


def test_synth_structure():
    c = synthesize_cohort(90, 11, 4, 2, 0.0, seed=8)
    assert c.feature_kinds == ["MRI"] * 4 + ["Cog"] * 2
    for s in c:
        assert np.all(np.diff(s.labels) >= 0)
        assert np.array_equal(s.truth, s.values)
    counts = np.bincount([s.baseline_label for s in c], minlength=3)
    assert np.all(counts > 0)
    ad = [s for s in c if s.labels[-1] == 2 and s.labels[0] < 2]
    assert ad, "expected some converters"
    for s in ad:
        assert s.truth[-1, 0] > s.truth[0, 0]
        assert np.all(s.truth[-1, 1:4] < s.truth[0, 1:4])


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        synthesize_cohort(0, 3, 1, 1, 0.0)
    with pytest.raises(ValueError):
        synthesize_cohort(3, 3, 1, 1, 1.0)
