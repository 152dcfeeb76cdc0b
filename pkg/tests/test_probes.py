import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from bracketlab import probes
from bracketlab.errors import ConfigurationError
from bracketlab.textcorpus import FeatureTable


def make_table(n=40, seed=0, with_rare=False):
    rng = np.random.default_rng(seed)
    booleans = {"starts_with_space": rng.integers(0, 2, n).astype(np.int64)}
    if with_rare:
        rare = np.zeros(n, dtype=np.int64)
        rare[0] = 1
        booleans["rare"] = rare
    return FeatureTable(
        token_ids=np.arange(2, n + 2),
        tokens=[f"w{i}" for i in range(n)],
        frequency=rng.integers(1, 500, n).astype(np.int64),
        booleans=booleans,
    )


class TestSplit:
    def test_eighty_twenty_for_ten(self):
        train, test = probes.split(10, seed=0)
        assert len(train) == 8 and len(test) == 2
        assert sorted(np.concatenate([train, test]).tolist()) == list(range(10))

    def test_too_small_rejected(self):
        with pytest.raises(ConfigurationError):
            probes.split(9)

    def test_deterministic(self):
        a = probes.split(50, seed=3)
        b = probes.split(50, seed=3)
        assert (a[0] == b[0]).all() and (a[1] == b[1]).all()
        c = probes.split(50, seed=4)
        assert not (a[0] == c[0]).all()

    def test_stratified_class_ratio_within_one(self):
        labels = np.array([1] * 13 + [0] * 37)
        train, test = probes.split(50, seed=0, labels=labels)
        global_pos = 13
        train_pos = int(labels[train].sum())
        assert abs(train_pos - round(0.8 * global_pos)) <= 1
        assert len(train) + len(test) == 50
        assert set(train.tolist()).isdisjoint(test.tolist())


class TestRidge:
    def test_exact_linear_target_r2_one(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 16))
        w = rng.normal(size=16)
        y = X @ w + 3.0
        fit = probes.fit_ridge(X, y, lam=1e-8, seed=0)
        assert fit.metric == "r2"
        assert fit.value >= 0.999

    def test_permuted_target_near_zero_r2(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(2000, 64))
        y = rng.permutation(X @ rng.normal(size=64))
        fit = probes.fit_ridge(X, y, lam=1.0, seed=0)
        assert fit.value <= 0.05

    def test_standardization_uses_train_statistics_only(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(100, 4)) * 100 + 50
        y = X @ np.ones(4)
        train, test = probes.split(100, seed=0)
        fit = probes.fit_ridge(X, y, lam=1e-6, indices=(train, test))
        assert fit.value > 0.99

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigurationError):
            probes.fit_ridge(np.ones((20, 2)), np.ones(20), lam=-1.0)


class TestLogistic:
    def test_separable_auc_one(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 8))
        y = (X[:, 0] > 0).astype(float)
        fit = probes.fit_logistic(X, y, seed=0)
        assert fit.metric == "roc_auc"
        assert fit.value == 1.0

    def test_random_labels_near_half(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(2000, 32))
        y = rng.integers(0, 2, 2000).astype(float)
        fit = probes.fit_logistic(X, y, seed=0)
        assert 0.45 <= fit.value <= 0.55

    def test_single_class_returns_none(self):
        X = np.random.default_rng(0).normal(size=(40, 4))
        assert probes.fit_logistic(X, np.ones(40), seed=0) is None

    def test_auc_negation_sums_to_one(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(300, 8))
        y = (X @ rng.normal(size=8) + rng.normal(size=300) > 0).astype(float)
        train, test = probes.split(300, seed=1, labels=y)
        fit = probes.fit_logistic(X, y, indices=(train, test))
        Xte = (X[test] - X[train].mean(0)) / np.where(X[train].std(0) > 0, X[train].std(0), 1)
        scores = Xte @ fit.weights + fit.bias
        auc_pos = roc_auc_score(y[test], scores)
        auc_neg = roc_auc_score(y[test], -scores)
        assert auc_pos + auc_neg == pytest.approx(1.0, abs=1e-12)

    def test_no_test_leakage(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(100, 6))
        y = (X[:, 0] > 0).astype(float)
        train, test = probes.split(100, seed=2, labels=y)
        fit_a = probes.fit_logistic(X, y, indices=(train, test))
        y_altered = y.copy()
        y_altered[test] = rng.integers(0, 2, len(test))
        fit_b = probes.fit_logistic(X, y_altered, indices=(train, test))
        assert np.array_equal(fit_a.weights, fit_b.weights)
        assert fit_a.bias == fit_b.bias

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(120, 8))
        y = (X[:, 1] > 0.3).astype(float)
        a = probes.fit_logistic(X, y, seed=7)
        b = probes.fit_logistic(X, y, seed=7)
        assert np.array_equal(a.weights, b.weights)
        assert a.value == b.value


class TestSuite:
    def embeddings(self, table, seed=0):
        rng = np.random.default_rng(seed)
        n = int(table.token_ids.max()) + 1
        E = rng.normal(size=(n, 12))
        # plant signal: frequency along one axis, space flag along another
        E[table.token_ids, 0] = np.log1p(table.frequency)
        E[table.token_ids, 1] = table.booleans["starts_with_space"] * 2.0
        return E

    def test_rows_metrics_and_average_last(self):
        table = make_table(60)
        results = probes.probe_suite(self.embeddings(table), table, seed=0)
        assert results[0].feature == "frequency"
        assert results[0].metric == "r2"
        assert results[-1].feature == "average"
        scored = [r for r in results[:-1] if not r.note]
        assert results[-1].value == pytest.approx(np.mean([r.value for r in scored]))
        by_name = {r.feature: r for r in results}
        assert by_name["starts_with_space"].metric == "roc_auc"
        assert by_name["starts_with_space"].value > 0.9

    def test_single_class_feature_noted_and_excluded_from_average(self):
        table = make_table(60, with_rare=False)
        table.booleans["constant"] = np.zeros(60, dtype=np.int64)
        results = probes.probe_suite(self.embeddings(table), table, seed=0)
        noted = [r for r in results if r.feature == "constant"]
        assert noted and "skipped" in noted[0].note
        avg = [r for r in results if r.feature == "average"][0]
        scored = [r for r in results if not r.note and r.feature != "average"]
        assert avg.value == pytest.approx(np.mean([r.value for r in scored]))

    def test_embedding_table_mismatch_rejected(self):
        table = make_table(30)
        small = np.zeros((10, 4))
        with pytest.raises(ConfigurationError):
            probes.probe_suite(small, table, seed=0)

    def test_deterministic_given_seed(self):
        table = make_table(50)
        E = self.embeddings(table)
        a = probes.probe_suite(E, table, seed=5)
        b = probes.probe_suite(E, table, seed=5)
        assert [(r.feature, r.value) for r in a] == [(r.feature, r.value) for r in b]

    def test_csv_and_render(self, tmp_path):
        table = make_table(40)
        results = probes.probe_suite(self.embeddings(table), table, seed=0)
        path = probes.save_results_csv(results, tmp_path / "p.csv")
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "feature,metric,value,n_train,n_test,note"
        assert lines[-1].startswith("average,")
        text = probes.render_results(results)
        assert "frequency" in text and "average" in text
