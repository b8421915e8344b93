"""Acceptance criteria, one test per criterion, each printing PASS/FAIL.

Criterion 1 (the full-size benchmark reproduction) trains five seeds of the
dynamic model on the 10000-sample corpus and carries the bulk of the runtime;
mark it out with `-m "not slow"` during development.
"""

import json
import time
from itertools import product
from pathlib import Path

import numpy as np
import pytest

from featgroups.autodiff import Tensor, gradcheck, stack
from featgroups.clustering import (
    ClusterState,
    ema_centroids,
    ema_gaussian,
    fcm_objective,
    fuzzy_memberships,
    gmm_em_step,
    gmm_log_likelihood,
    hard_membership,
    init_kmeanspp,
    kmeans_assign_and_update,
    kmeans_sse,
    reg_loss,
    score_points,
    soft_membership,
    unify_tensor,
)
from featgroups.cli import main as cli_main
from featgroups.metrics import ari, auroc, nmi, silhouette
from featgroups.model import GroupedStepwiseModel, ModelConfig, supervised_loss
from featgroups.synthdata import GpSpec, generate_dataset, static_kmeans_baseline
from featgroups.trainer import ExperimentConfig, train

from test_clustering import brute_force_best_partition
from test_metrics import pair_count_ari, pairwise_auroc, partitions_up_to_k


def report(criterion: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance] criterion {criterion}: {status} {detail}")
    assert passed, f"criterion {criterion} failed: {detail}"


@pytest.fixture(scope="module")
def corpus():
    return generate_dataset(GpSpec(samples=10000, seed=0))


@pytest.mark.slow
class TestCriterion1TableReproduction:
    def test_dynamic_beats_static_and_recovers(self, corpus):
        start = time.monotonic()
        seeds = [0, 1, 2, 3, 4]
        static_means = {}
        for mode in ("flat", "time_mean", "sample_mean", "full_mean"):
            values = [
                ari(corpus.truth_labels, static_kmeans_baseline(corpus, mode, 3, s).argmax(axis=1))
                for s in seeds
            ]
            static_means[mode] = float(np.mean(values))
        dynamic_ari = []
        dynamic_nmi = []
        for seed in seeds:
            config = ExperimentConfig(seed=seed)  # App C.2: lr 0.002, patience 10, batch 5000
            assert config.lr == 0.002 and config.patience == 10 and config.batch_size == 5000
            result = train(config, corpus)
            dynamic_ari.append(result.metrics["ari"])
            dynamic_nmi.append(result.metrics["nmi"])
        elapsed = time.monotonic() - start
        best_static = max(static_means.values())
        mean_ari = float(np.mean(dynamic_ari))
        mean_nmi = float(np.mean(dynamic_nmi))
        exact = sum(1 for a in dynamic_ari if a >= 0.999)
        detail = (
            f"dynamic ARI {mean_ari:.3f} (per-seed {[round(a, 2) for a in dynamic_ari]}) "
            f"vs best static {best_static:.3f}; NMI {mean_nmi:.3f}; exact {exact}/5; {elapsed:.0f}s"
        )
        report(
            "1 (Table 1 reproduction)",
            mean_ari > best_static and mean_nmi >= 0.45 and exact >= 1 and elapsed < 1800,
            detail,
        )


class TestCriterion2References:
    def test_oracle_and_random(self, corpus):
        oracle_config = ExperimentConfig(
            seed=0, epochs=2, grouping="fixed", fixed_groups=corpus.truth_labels.tolist()
        )
        oracle = train(oracle_config, corpus)
        random_aris = []
        for seed in range(5):
            assignment = np.random.default_rng([seed, 99]).integers(0, 3, size=6)
            config = ExperimentConfig(
                seed=seed, epochs=2, grouping="fixed", fixed_groups=assignment.tolist()
            )
            random_aris.append(train(config, corpus).metrics["ari"])
        mean_random = float(np.mean(random_aris))
        detail = f"oracle ari={oracle.metrics['ari']} nmi={oracle.metrics['nmi']}; random mean ari {mean_random:.3f}"
        report(
            "2 (oracle and random references)",
            oracle.metrics["ari"] == 1.0 and oracle.metrics["nmi"] == 1.0 and abs(mean_random) < 0.3,
            detail,
        )


class TestCriterion3SilhouetteReported:
    def test_benchmark_csv_reports_silhouette(self, tmp_path):
        config = {
            "schema": "featgroups-config-v1",
            "dataset": {"samples": 80, "length": 5, "seed": 0},
            "train": {"epochs": 2, "batch_size": 40, "hidden": 3, "seq_width": 4},
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        out = tmp_path / "bench"
        assert cli_main(["benchmark", "--config", str(path), "--out", str(out), "--seeds", "0,1"]) == 0
        lines = (out / "benchmark.csv").read_text().strip().splitlines()
        rows = {line.split(",")[0]: line.split(",") for line in lines[2:]}
        oracle_sil = rows["oracle"][6]
        computed = oracle_sil not in ("", "nan") and np.isfinite(float(oracle_sil))
        report(
            "3 (silhouette reported, not ranked)",
            computed and all(r[-1] == "OK" for r in rows.values()),
            f"oracle silhouette {oracle_sil}",
        )


class TestCriterion4Gradients:
    def test_gradchecks(self):
        model = GroupedStepwiseModel(
            ModelConfig(feature_cards=[1, 1, 1, 1], hidden=3, groups=2, seq_width=4),
            np.random.default_rng(0),
        )
        # data seed chosen clear of ReLU kinks, where central differences are
        # invalid for any implementation
        rng = np.random.default_rng(3)
        for p in model.parameters():
            p.data = p.data * 2.0
        x = rng.normal(size=(4, 5, 4)) * 1.5
        y = rng.integers(0, 2, size=4).astype(float)
        member = np.zeros((4, 2))
        member[[0, 1, 2, 3], [0, 1, 0, 1]] = 1.0
        centroids = rng.normal(size=(2, 6))
        soft_basis = rng.uniform(0.1, 1.0, size=(4, 2))

        def model_loss():
            return supervised_loss(model.forward(x, member), y)

        def hard_reg():
            u = stack([unify_tensor(w, "bias_sum_linear") for w in model.feature_weights])
            value, _ = reg_loss(u, member, centroids, "hard")
            return value

        def soft_reg():
            u = stack([unify_tensor(w, "bias_sum_linear") for w in model.feature_weights])
            value, _ = reg_loss(u, soft_basis, centroids, "soft")
            return value

        errors = {
            "model": gradcheck(model_loss, model.parameters(), eps=1e-5),
            "hard reg": gradcheck(hard_reg, model.feature_weights, eps=1e-5),
            "soft reg": gradcheck(soft_reg, model.feature_weights, eps=1e-5),
        }
        centroid_tensor = Tensor(centroids, requires_grad=True)
        u = stack([unify_tensor(w, "bias_sum_linear") for w in model.feature_weights])
        value, _ = reg_loss(u, member, centroid_tensor.data, "hard")
        value.backward()
        zero_centroid_grad = centroid_tensor.grad is None
        detail = ", ".join(f"{k} {v:.2e}" for k, v in errors.items())
        report(
            "4 (gradient correctness)",
            all(v < 1e-4 for v in errors.values()) and zero_centroid_grad,
            detail + f"; centroid grad absent: {zero_centroid_grad}",
        )


class TestCriterion5ClusteringOracles:
    def test_monotonicity_and_enumeration(self):
        rng = np.random.default_rng(3)
        points = rng.normal(size=(24, 3))

        state = init_kmeanspp(points, 3, np.random.default_rng(0))
        sse_ok = True
        prev = kmeans_sse(points, state.centroids)
        for _ in range(12):
            _, mu = kmeans_assign_and_update(points, state)
            state = ClusterState(kind="kmeans", centroids=mu)
            sse = kmeans_sse(points, mu)
            sse_ok &= sse <= prev + 1e-9
            prev = sse

        fcm_state = ClusterState(kind="fuzzy", centroids=points[:3].copy(), fuzzifier=2.0)
        fcm_ok = True
        prev = fcm_objective(points, fcm_state)
        for _ in range(12):
            _, mu = fuzzy_memberships(points, fcm_state)
            fcm_state = ClusterState(kind="fuzzy", centroids=mu, fuzzifier=2.0)
            value = fcm_objective(points, fcm_state)
            fcm_ok &= value <= prev + 1e-9
            prev = value

        gmm_state = init_kmeanspp(points, 3, np.random.default_rng(1), kind="gmm")
        em_ok = True
        prev = gmm_log_likelihood(points, gmm_state)
        for _ in range(12):
            _, mu, cov, w = gmm_em_step(points, gmm_state)
            gmm_state = ClusterState(kind="gmm", centroids=mu, covariances=cov, weights=w)
            ll = gmm_log_likelihood(points, gmm_state)
            em_ok &= ll >= prev - 1e-9
            prev = ll

        line = np.array([[0.0], [1.0], [10.0], [11.0]])
        state = ClusterState(kind="kmeans", centroids=np.array([[0.0], [10.0]]))
        for _ in range(20):
            _, mu = kmeans_assign_and_update(line, state)
            if np.allclose(mu, state.centroids):
                break
            state = ClusterState(kind="kmeans", centroids=mu)
        _, best_sse = brute_force_best_partition(line, 2)
        line_ok = kmeans_sse(line, state.centroids) == pytest.approx(best_sse)

        report(
            "5 (clustering oracles)",
            sse_ok and fcm_ok and em_ok and line_ok,
            f"lloyd {sse_ok}, fcm {fcm_ok}, em {em_ok}, 4-point enumeration {line_ok}",
        )


class TestCriterion6EmaAlgebra:
    def test_unit_cases(self):
        checks = []
        new = (np.array([2.0, -1.0]), np.diag([0.5, 1.5]))
        old = (np.array([0.0, 3.0]), np.diag([2.0, 1.0]))
        for rule in ("moment_matching", "product_of_experts", "wasserstein"):
            mu, cov = ema_gaussian(old, new, 0.0, rule)
            checks.append(np.allclose(mu, new[0], atol=1e-12) and np.allclose(cov, new[1], atol=1e-12))
        checks.append(np.allclose(ema_centroids(np.array([1.0]), np.array([1.0]), 0.7), 1.0, atol=1e-12))
        mu_eq = np.array([1.0, 2.0])
        _, cov = ema_gaussian((mu_eq, np.diag([1.0, 3.0])), (mu_eq, np.diag([2.0, 5.0])), 0.4)
        checks.append(np.allclose(cov, 0.4 * np.diag([1.0, 3.0]) + 0.6 * np.diag([2.0, 5.0]), atol=1e-12))
        mu, cov = ema_gaussian((np.array([0.0]), np.eye(1)), (np.array([2.0]), np.eye(1)), 0.5)
        checks.append(abs(mu[0] - 1.0) < 1e-12 and abs(cov[0, 0] - 2.0) < 1e-12)
        comp = (np.array([0.5, -0.5]), np.array([[2.0, 0.3], [0.3, 1.0]]))
        agree = [ema_gaussian(comp, comp, 0.3, rule) for rule in
                 ("moment_matching", "product_of_experts", "wasserstein")]
        checks.append(
            all(
                np.allclose(mu, comp[0], atol=1e-12) and np.allclose(cov, comp[1], atol=1e-9)
                for mu, cov in agree
            )
        )
        report("6 (EMA algebra)", all(checks), f"{sum(checks)}/{len(checks)} identities")


class TestCriterion7SoftHardConsistency:
    def test_thousand_matrices(self):
        rng = np.random.default_rng(4)
        checked = failures = 0
        while checked < 1000:
            f, k = int(rng.integers(4, 12)), int(rng.integers(2, 5))
            scores = rng.uniform(0.01, 1.0, size=(f, k))
            scores[np.arange(f), rng.integers(0, k, size=f)] += 1.0
            if len(np.unique(scores.argmax(axis=1))) < k:
                continue  # argmax must cover every cluster, else the
                # non-empty repair adds memberships argmax lacks
            if not np.array_equal(soft_membership(scores, 0.999), hard_membership(scores)):
                failures += 1
            checked += 1
        report("7 (soft/hard consistency)", failures == 0, f"{failures} mismatches in {checked}")


class TestCriterion8MetricOracles:
    def test_ari_nmi_exhaustive_and_auroc_brute_force(self):
        parts = partitions_up_to_k(6, 3)
        ari_ok = all(
            abs(ari(t, p) - pair_count_ari(t, p)) < 1e-12 for t, p in product(parts, parts)
        )
        from test_metrics import looped_nmi

        nontrivial = [p for p in parts if len(set(p)) > 1]
        nmi_ok = all(
            abs(nmi(t, p) - looped_nmi(t, p)) < 1e-12 for t, p in product(nontrivial, nontrivial)
        )
        rng = np.random.default_rng(5)
        auroc_ok = True
        for _ in range(500):
            n = int(rng.integers(4, 40))
            scores = np.round(rng.uniform(size=n), 1)
            labels = rng.integers(0, 2, size=n)
            if labels.all() or not labels.any():
                labels[0] = 1 - labels[0]
            auroc_ok &= abs(auroc(scores, labels) - pairwise_auroc(scores, labels)) < 1e-10
        report(
            "8 (metric oracles)",
            ari_ok and nmi_ok and auroc_ok,
            f"ari {ari_ok}, nmi {nmi_ok}, auroc {auroc_ok}",
        )


class TestCriterion9Determinism:
    def test_cmd_train_byte_identical(self, tmp_path):
        config = {
            "schema": "featgroups-config-v1",
            "dataset": {"samples": 70, "length": 5, "seed": 1},
            "train": {"epochs": 3, "batch_size": 35, "hidden": 3, "seq_width": 4},
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        out = tmp_path / "run"
        assert cli_main(["generate", "--config", str(path), "--out", str(out)]) == 0
        blobs = []
        for _ in range(2):
            assert cli_main(["train", "--config", str(path), "--out", str(out)]) == 0
            blobs.append(
                {
                    name: Path(out, name).read_bytes()
                    for name in ("results.json", "history.jsonl", "checkpoint.bin")
                }
            )
        identical = all(blobs[0][name] == blobs[1][name] for name in blobs[0])
        report("9 (determinism)", identical, "results.json, history.jsonl, checkpoint.bin")


class TestCriterion10ScopeBoundary:
    def test_classifier_metrics_exercised_on_synthetic_only(self, tmp_path):
        # ICU tables are out of scope by design; the AUPRC/AUROC code paths
        # are exercised through the synthetic dataset's evaluation report
        config = {
            "schema": "featgroups-config-v1",
            "dataset": {"samples": 80, "length": 5, "seed": 2},
            "train": {"epochs": 2, "batch_size": 40, "hidden": 3, "seq_width": 4},
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        out = tmp_path / "run"
        assert cli_main(["generate", "--config", str(path), "--out", str(out)]) == 0
        assert cli_main(["train", "--config", str(path), "--out", str(out)]) == 0
        results = json.loads(Path(out, "results.json").read_text())
        metrics = results["metrics"]
        exercised = all(
            isinstance(metrics[k], float) and np.isfinite(metrics[k]) for k in ("auprc", "auroc")
        )
        report("10 (ICU scope boundary)", exercised, f"auprc={metrics['auprc']:.3f} auroc={metrics['auroc']:.3f}")
