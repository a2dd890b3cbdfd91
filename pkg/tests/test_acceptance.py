"""Acceptance criteria: fast property checks plus the multi-seed digit benchmarks.

Every criterion prints one ``ACCEPTANCE PASS|FAIL`` line in the terminal
summary.  Benchmark runs are read from (or written to) ``$ILA_DA_RESULTS``,
default ``results/acceptance`` next to this package; completed runs with a
matching config fingerprint are reused.
"""
import json
import os
import statistics
import time
from pathlib import Path

import pytest

import conftest
import test_affinity as t_aff
import test_data as t_data
import test_losses as t_loss
import test_nets as t_nets
import test_similarity as t_sim
import test_trainer as t_train
from ila_da.core import ExperimentConfig, validate_config
from ila_da.data import dataset_available
from ila_da.trainer import RunReport, run_experiment

SEEDS = (0, 1, 2)
RESULTS = Path(os.environ.get("ILA_DA_RESULTS", Path(__file__).resolve().parents[1] / "results" / "acceptance"))


def record(name: str, ok: bool, detail: str = "") -> None:
    conftest.ACCEPTANCE_LINES.append(f"ACCEPTANCE {'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))


_property_seconds = [0.0]


def check(name: str, fn, *args) -> None:
    start = time.perf_counter()
    try:
        fn(*args)
    except BaseException as exc:  # pytest.fail / assertion / hypothesis falsification
        record(name, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    finally:
        _property_seconds[0] += time.perf_counter() - start
    record(name, True)


# ---------------------------------------------------------------------------
# property criteria (no training)
# ---------------------------------------------------------------------------

def _phi_laws():
    t_sim.test_phi_identical_vectors()
    t_sim.test_phi_hand_values()
    t_sim.test_phi_symmetric_and_bounded()
    t_sim.test_phi_decreases_with_distance()
    t_sim.test_pairwise_oracle_equivalence()
    for seed in range(10):
        t_sim.test_phi_gradient_matches_finite_differences(seed)
    for seed in range(12):
        t_loss.test_msc_gradient_matches_finite_differences(seed)
        try:
            t_loss.test_triplet_gradient_matches_finite_differences(seed)
        except pytest.skip.Exception:
            pass


def _msc_laws():
    t_loss.test_msc_matches_oracle_and_is_nonnegative()
    t_loss.test_msc_permutation_invariance()
    t_loss.test_msc_monotone_in_each_pair()
    t_loss.test_zeroed_columns_get_no_gradient(t_loss.msc_loss)
    t_loss.test_msc_symmetric_pair()
    t_loss.test_msc_hand_value()


def _affinity_laws():
    t_aff.test_knn_matches_exhaustive_oracle()
    t_aff.test_filter_paper_batch()
    t_aff.test_filtered_column_law()
    t_aff.test_ratio_scale_invariance()
    for seed in range(8):
        t_aff.test_filtering_improves_pseudo_label_precision(seed)


def _sampler_laws():
    t_data.test_balanced_paper_batch()
    t_data.test_balanced_random_labels_flat_histogram()
    t_data.test_balanced_coverage_and_determinism()
    t_data.test_target_deterministic()


def _idx_and_reversal(tmp_path_factory):
    t_data.test_idx_fixture_exact(tmp_path_factory.mktemp("idx"))
    t_data.test_idx_roundtrip(tmp_path_factory)
    t_nets.test_reverse_forward_is_bitwise_identity()
    t_nets.test_reverse_square_at_three()
    for coeff in (0.25, 1.0, 2.5):
        t_nets.test_reverse_matches_scaled_finite_difference(coeff)


def _no_leakage():
    source = conftest.make_digits(30, seed=1, name="src")
    target = conftest.make_digits(24, seed=2, name="tgt", shift=0.1)
    t_train.test_labels_never_reach_the_training_path((source, target))


def test_property_similarity_and_gradients():
    check("phi range/symmetry/identity laws and finite-difference gradient checks", _phi_laws)


def test_property_msc_loss():
    check("MSC loss: nonnegativity, permutation invariance, monotonicity, zero-gradient columns, hand values",
          _msc_laws)


def test_property_affinity_pipeline():
    check("affinity: kNN exhaustive oracle, floor(mu*n_t) law incl. 128->96, Gamma scale invariance, "
          "filtered precision >= unfiltered", _affinity_laws)


def test_property_sampler():
    check("sampler: exact per-class counts and seed determinism", _sampler_laws)


def test_property_idx_and_reversal(tmp_path_factory):
    check("IDX bit-exact round-trip and gradient-reversal -lambda law", _idx_and_reversal, tmp_path_factory)


def test_property_no_leakage():
    check("no target-label leakage through the training path", _no_leakage)


def test_property_suite_under_five_minutes():
    total = _property_seconds[0]
    record("property criteria complete in < 5 min", total < 300.0, f"{total:.1f}s")
    assert total < 300.0


# ---------------------------------------------------------------------------
# benchmark criteria (multi-seed training on the digit datasets)
# ---------------------------------------------------------------------------

def _require(cfg: ExperimentConfig) -> None:
    missing = [name for name in cfg.domains if not dataset_available(name)]
    if missing:
        raise RuntimeError(f"BLOCKED: dataset unavailable ({', '.join(missing)}); run `ila-da fetch` first")


def _accuracies(group: str, cfg: ExperimentConfig) -> list[float]:
    """Final target accuracy (%) of ``cfg`` over SEEDS, running whatever is missing."""
    from ila_da.cli import _run_dir

    _require(cfg)
    out = []
    for seed in SEEDS:
        run_cfg = validate_config(cfg.replace(seed=seed))
        run_dir = _run_dir(RESULTS / group, run_cfg)
        report_path = run_dir / "report.json"
        report = RunReport.load(report_path) if report_path.is_file() else None
        if report is None or report.status != "completed" or report.config_fingerprint != run_cfg.fingerprint():
            report = run_experiment(run_cfg, run_dir, resume=report is not None)
        out.append(100.0 * report.final_accuracy)
    return out


def _mean(values):
    return statistics.fmean(values)


def benchmark(name, fn):
    try:
        ok, detail = fn()
    except Exception as exc:
        record(name, False, str(exc))
        pytest.fail(f"{name}: {exc}", pytrace=False)
    record(name, ok, detail)
    assert ok, f"{name}: {detail}"


M2U = ExperimentConfig(task="m2u")


def test_m2u_ila_dann():
    def run():
        ila = _mean(_accuracies("m2u", M2U))
        dann = _mean(_accuracies("m2u", M2U.replace(instance_loss="none")))
        return ila >= 90.0 and ila - dann >= 1.0, f"ILA+DANN {ila:.2f}% (>= 90.0), uplift {ila - dann:+.2f} (>= +1.0)"
    benchmark("M->U ILA+DANN mean >= 90.0% and >= +1.0 over DANN", run)


def test_m2u_ila_cdan():
    def run():
        acc = _mean(_accuracies("m2u", M2U.replace(method="cdan")))
        return acc >= 92.5, f"{acc:.2f}%"
    benchmark("M->U ILA+CDAN mean >= 92.5%", run)


def test_u2m_ila_dann():
    def run():
        acc = _mean(_accuracies("u2m", ExperimentConfig(task="u2m")))
        return acc >= 95.5, f"{acc:.2f}%"
    benchmark("U->M ILA+DANN mean >= 95.5%", run)


def test_s2m_ila_dann():
    def run():
        acc = _mean(_accuracies("s2m", ExperimentConfig(task="s2m")))
        return acc >= 88.0, f"{acc:.2f}%"
    benchmark("S->M ILA+DANN mean >= 88.0%", run)


def test_m2u_source_only():
    def run():
        acc = _mean(_accuracies("m2u", M2U.replace(lambda_adv=0.0, instance_loss="none")))
        return 70.0 <= acc <= 85.0, f"{acc:.2f}%"
    benchmark("M->U source-only mean within [70, 85]%", run)


def test_m2u_msc_beats_triplet():
    def run():
        msc = _mean(_accuracies("m2u", M2U))
        tri = _mean(_accuracies("m2u", M2U.replace(instance_loss="triplet")))
        return msc - tri >= 0.5, f"MSC {msc:.2f}% vs triplet {tri:.2f}%"
    benchmark("M->U MSC >= triplet + 0.5", run)


def test_m2u_knn_beats_classifier_pseudo_labels():
    def run():
        knn = _mean(_accuracies("m2u", M2U))
        clf = _mean(_accuracies("m2u", M2U.replace(pseudo_mode="classifier")))
        return knn - clf >= 0.5, f"kNN {knn:.2f}% vs classifier {clf:.2f}%"
    benchmark("M->U kNN pseudo-labels >= classifier pseudo-labels + 0.5", run)


MU_GRID = (0.33, 0.5, 0.67, 0.75, 1.0)
K_GRID = (1, 3, 5, 7)


def test_mu_sweep_interior_optimum():
    def run():
        means = {mu: _mean(_accuracies("m2u-mu", M2U.replace(mu=mu))) for mu in MU_GRID}
        best = max(means, key=means.get)
        return 0.0 < best < 1.0, "best mu " + str(best) + " in " + ", ".join(f"{m}: {a:.2f}" for m, a in means.items())
    benchmark("M->U mu sweep best mu strictly inside (0, 1)", run)


def test_k_sweep_beats_single_neighbor():
    def run():
        means = {k: _mean(_accuracies("m2u-k", M2U.replace(k=k))) for k in K_GRID}
        best_multi = max(means[k] for k in K_GRID if k > 1)
        return best_multi > means[1], ", ".join(f"k={k}: {a:.2f}" for k, a in means.items())
    benchmark("M->U k sweep: some k > 1 beats k = 1", run)


def test_m2u_filtered_affinity_closer_to_truth():
    def run():
        from ila_da.cli import _run_dir

        _accuracies("m2u", M2U)
        rows = []
        for seed in SEEDS:
            run_dir = _run_dir(RESULTS / "m2u", validate_config(M2U.replace(seed=seed)))
            summary = json.loads((run_dir / "affinity" / "summary.json").read_text())
            rows.append((summary["agreement_filtered"], summary["agreement_unfiltered"]))
        ok = all(f >= u for f, u in rows)
        return ok, "; ".join(f"filtered {f:.4f} vs unfiltered {u:.4f}" for f, u in rows)
    benchmark("M->U epoch-40 export: filtered affinity agreement >= unfiltered", run)
