import numpy as np
import pytest

from fairsite.datagen import GeneratorConfig, generate_dataset
from fairsite.records import DatasetManifest, RankingInstance, SiteRecord, TrialRecord, validate_site

TINY_DIMS = dict(n_t=6, n_t_prime=4, n_s=12, n_c=5, n_d=7, n_p=6, n_h=3, M=5, K=2)


def tiny_manifest(**overrides) -> DatasetManifest:
    return DatasetManifest(**{**TINY_DIMS, **overrides})


def make_site(site_id, enrollment=0, race=(1, 0, 0, 0, 0, 0), mask=(True, True, True, True), dims=None,
              rng=None, history_rows=2):
    """A fully populated site; modalities hidden by ``mask`` keep their content."""
    dims = dims or tiny_manifest()
    rng = rng or np.random.default_rng(abs(hash(site_id)) % (2**32))
    site = SiteRecord(
        site_id=site_id,
        static=rng.standard_normal(dims.n_s),
        diagnoses=rng.integers(0, dims.n_d, dims.n_c),
        prescriptions=rng.integers(0, dims.n_p, dims.n_c),
        enrollment_history=np.hstack([rng.standard_normal((history_rows, dims.n_t_prime)),
                                      rng.integers(0, 20, (history_rows, 1))]),
        mask=mask,
        enrollment=enrollment,
        race=np.asarray(race, dtype=float),
    )
    return validate_site(site, dims)


def make_trial(trial_id="T0", dims=None, rng=None):
    dims = dims or tiny_manifest()
    rng = rng or np.random.default_rng(0)
    features = rng.standard_normal(dims.n_t)
    return TrialRecord(trial_id, features, features[: dims.n_t_prime])


def make_instance(enrollments, races=None, K=2, masks=None, dims=None, trial_id="T0", seed=0):
    """Instance whose sites carry the given labels; other content is seeded noise."""
    M = len(enrollments)
    dims = dims or tiny_manifest(M=M, K=K)
    rng = np.random.default_rng(seed)
    races = races if races is not None else [(1, 0, 0, 0, 0, 0)] * M
    masks = masks if masks is not None else [(True,) * 4] * M
    sites = [make_site(f"S{i}", int(e), r, m, dims, rng) for i, (e, r, m) in enumerate(zip(enrollments, races, masks))]
    return RankingInstance(make_trial(trial_id, dims, rng), sites, K)


@pytest.fixture(scope="session")
def small_dataset():
    config = GeneratorConfig(pool_size=60, n_trials=20, copies_per_trial=3, seed=5)
    return generate_dataset(config)


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE_TITLES = {
    1: "entropy constants",
    2: "policy distribution exactness",
    3: "combination estimator unbiasedness",
    4: "MCAT mask invariance",
    5: "gradient fidelity",
    6: "scorer permutation equivariance",
    7: "desk-scale learning beats random",
    8: "lambda trade-off direction",
    9: "CLI reproducibility",
    10: "nDCG worked example",
}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): implements acceptance criterion n")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    entry = item.config._acceptance.setdefault(marker.args[0], {"passed": True, "details": []})
    if not report.passed:
        entry["passed"] = False
    if report.when == "call":
        entry["details"].extend(str(v) for k, v in item.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._acceptance
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        entry = results[n]
        status = "PASS" if entry["passed"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"[{status}] criterion {n:>2} {ACCEPTANCE_TITLES.get(n, '')}: {detail}".rstrip(": "))


@pytest.fixture
def report_detail(record_property):
    """Attach a one-line measurement to the acceptance summary."""
    return lambda text: record_property("acceptance", text)
