"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python3 tests/test_acceptance.py``).
"""

import csv
import os
import sys
import time

import numpy as np
import pytest

import oracles
from fusionattn import cli
from fusionattn.data import fold_splits, load_manifest, make_folds, model_dims, synth_generate
from fusionattn.gradcheck import run_checks
from fusionattn.layers import BiGRU, MultiHeadAttention, TimeConv
from fusionattn.models import PAPER_DIMS, ModalityDims, build_model, config_for, parameter_count, parameter_shapes
from fusionattn.results import read_results
from fusionattn.stats import t_test_two_tailed, unweighted_accuracy, weighted_accuracy
from fusionattn.tensor import Tensor
from fusionattn.training import TrainConfig, config_label, train_one
from test_stats import SAMPLE_PAIRS

MODS = ("audio", "vision", "text")


@pytest.fixture
def report(capsys):
    def emit(cid, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  [{cid}] {title}: {detail}"
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return emit


def _perturb(module, rng, scale=0.3):
    for p in module.parameters():
        p.data += rng.normal(scale=scale, size=p.shape)


# ---------------------------------------------------------------------------


def test_c1_gradient_correctness(report):
    t0 = time.perf_counter()
    results = run_checks(tolerance=1e-5)
    elapsed = time.perf_counter() - t0
    layers = {"time_conv", "bigru", "mha", "temporal_average", "classifier_head", "cross_entropy", "model:self", "model:cross"}
    covered = layers <= {r.name for r in results}
    worst = max(results, key=lambda r: r.rel_error)
    failed = [r.name for r in results if not r.passed]
    ok = covered and not failed and elapsed < 60.0
    report(
        "C1", "gradient check",
        ok,
        f"{len(results)} checks, worst {worst.name} rel_err={worst.rel_error:.2e} (< 1e-5), failed={failed}, {elapsed:.1f}s (< 60s)",
    )


def test_c2_oracle_equivalence(report):
    rng = np.random.default_rng(20)

    mha = MultiHeadAttention(4, 2, dropout=0.0, seed=1)
    _perturb(mha, rng)
    q, kv = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    got = mha(Tensor(q), Tensor(kv)).data
    want = oracles.mha_loop(q, kv, mha.w_q.data, mha.w_k.data, mha.w_v.data, mha.w_o.data, mha.b_o.data, 2)
    mha_err = float(np.abs(got - want).max())

    gru = BiGRU(3, 5, seed=2)
    _perturb(gru, rng)
    x = rng.standard_normal((7, 3))
    dirs = [tuple(getattr(d, k).data for k in ("w_ih", "w_hh", "b_ih", "b_hh")) for d in (gru.fwd, gru.bwd)]
    gru_err = float(np.abs(gru(Tensor(x)).data - oracles.bigru_scalar(x, *dirs)).max())

    # dyadic inputs keep every product and partial sum exact in float64, so any
    # summation order must reproduce the double loop bit for bit
    conv = TimeConv(6, 4, seed=3)
    conv.weight.data = rng.integers(-8, 9, size=(4, 6)) / 8.0
    conv.bias.data = rng.integers(-8, 9, size=(4, 1)) / 4.0
    xc = rng.integers(-16, 17, size=(6, 5)) / 16.0
    conv_exact = np.array_equal(conv(Tensor(xc)).data, oracles.conv_loop(xc, conv.weight.data, conv.bias.data))

    ok = mha_err <= 1e-10 and gru_err <= 1e-12 and conv_exact
    report("C2", "oracle equivalence", ok, f"mha max|d|={mha_err:.1e} (<= 1e-10), bigru max|d|={gru_err:.1e} (<= 1e-12), time_conv exact={conv_exact}")


def test_c3_architecture_invariants(report):
    cfg = config_for("cross", "tva", PAPER_DIMS)
    model = build_model(cfg)
    n_mha = len(model.attention_modules())
    # shape check on shorter sequences to keep it quick; widths use the full-size dims
    small = {"audio": ModalityDims(40, 12, 20), "vision": ModalityDims(32, 16, 25), "text": ModalityDims(9, 10, None)}
    scfg = config_for("cross", "tva", small, gru_hidden=60, heads=6)
    smodel = build_model(scfg)
    rng = np.random.default_rng(0)
    batch = {m: Tensor(rng.standard_normal((2, d.seq_len, d.width))) for m, d in small.items()}
    outs = smodel.branches[0].attended(batch, False, None)
    lengths_ok = len(outs) == 6 and all(
        o.shape == (2, scfg.encoded_len(t), 120) for (t, _), o in zip(scfg.cross_pairs(), outs)
    )
    widths = {}
    for code in ("tva", "tv", "ta", "va", "t", "v", "a"):
        widths[f"self:{code}"] = build_model(config_for("self", code, PAPER_DIMS)).classifier.in_width
        if len(code) > 1:
            widths[f"cross:{code}"] = build_model(config_for("cross", code, PAPER_DIMS)).classifier.in_width
    widths_ok = set(widths.values()) == {240}
    ok = n_mha == 6 and lengths_ok and widths_ok
    report("C3", "architecture invariants", ok, f"cross MHA modules={n_mha}, 6 pair outputs at target length={lengths_ok}, SP classifier widths={sorted(set(widths.values()))} over {len(widths)} configs")


def test_c4_metric_oracles(report):
    cm = np.array([[81, 9], [5, 5]])
    wa, uwa = weighted_accuracy(cm), unweighted_accuracy(cm)
    diffs = []
    for a, b in SAMPLE_PAIRS:
        res = t_test_two_tailed(a, b)
        t, df = oracles.welch_by_hand(a, b)
        diffs.append(abs(res.p - oracles.two_tailed_p_quadrature(t, df)))
    ok = wa == 0.86 and uwa == 0.70 and max(diffs) <= 1e-6
    report("C4", "metric oracles", ok, f"WA={wa!r} UWA={uwa!r}, max |p - quadrature| over 5 pairs={max(diffs):.1e} (<= 1e-6)")


# ---------------------------------------------------------------------------
# learning sanity: paper hyperparameters on the desk-scale synthetic schema


def _fit(manifest, family, fold_index, max_epochs=30):
    fold = make_folds(manifest, k=5, seed=0)[fold_index]
    splits = fold_splits(manifest, fold)
    cfg = config_for(family, "tva", model_dims(manifest.schema))
    return train_one(build_model(cfg, seed=fold_index), splits, TrainConfig(max_epochs=max_epochs, seed=fold_index), fold=fold_index)


@pytest.mark.slow
def test_c5_learning_separable(tmp_path, report):
    manifest = synth_generate(tmp_path / "sep5", 40, 5.0, seed=11)
    t0 = time.perf_counter()
    results = {family: _fit(manifest, family, 0) for family in ("self", "cross")}
    elapsed = time.perf_counter() - t0
    ok = all(r.test_uwa >= 0.95 and r.epochs <= 30 for r in results.values()) and elapsed < 300
    detail = ", ".join(f"{f} UWA={r.test_uwa:.3f} ({r.epochs} ep)" for f, r in results.items())
    report("C5a", "learning at separation 5", ok, f"{detail}; threshold 0.95, {elapsed:.0f}s (< 300s)")


@pytest.mark.slow
def test_c5_learning_chance(tmp_path, report):
    manifest = synth_generate(tmp_path / "sep0", 40, 0.0, seed=12)
    per_family = {}
    for family in ("self", "cross"):
        per_family[family] = [_fit(manifest, family, f).test_uwa for f in range(5)]
    means = {f: float(np.mean(v)) for f, v in per_family.items()}
    ok = all(0.09 <= m <= 0.20 for m in means.values())
    detail = "; ".join(f"{f} mean UWA over 5 folds={means[f]:.3f} (folds {', '.join(f'{u:.3f}' for u in v)})" for f, v in per_family.items())
    report("C5b", "chance level at separation 0", ok, f"{detail}; band [0.09, 0.20]")


# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c6_protocol_fidelity(tmp_path, report):
    data = tmp_path / "d"
    synth_generate(data, 5, 3.0, seed=4)
    argv = ["--data", str(data), "--models", "self,cross", "--modalities", "tva", "--folds", "5", "--repeats", "10",
            "--seed", "9", "--max-epochs", "1", "--gru-hidden", "4", "--heads", "2", "--classifier-hidden", "4"]
    assert cli.main(["run", *argv, "--out", str(tmp_path / "a"), "--no-checkpoints"]) == 0
    assert cli.main(["run", *argv, "--out", str(tmp_path / "b"), "--no-checkpoints"]) == 0
    rows = read_results(tmp_path / "a" / "results.csv", with_confusion=False)
    counts = {name: sum(r.config_name == name for r in rows) for name in {r.config_name for r in rows}}
    manifest = load_manifest(data / "manifest.csv")
    folds = make_folds(manifest, k=5, seed=9)
    tests = [set(f.test) for f in folds]
    all_ids = {r.id for r in manifest.records}
    partition = set().union(*tests) == all_ids and sum(map(len, tests)) == len(all_ids)
    identical = (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    ok = counts == {"self:tva": 50, "cross:tva": 50} and partition and identical
    report("C6", "protocol fidelity", ok, f"rows per config={counts}, test folds partition={partition}, rerun bit-identical={identical}")


def test_c7_ablation_consistency(report):
    problems = []
    checked = 0
    for family in ("self", "cross"):
        full = build_model(config_for(family, "tva", PAPER_DIMS))
        full_shapes = parameter_shapes(full)
        for kept in (("audio", "vision"), ("audio", "text"), ("vision", "text"), ("audio",), ("vision",), ("text",)):
            if family == "cross" and len(kept) < 2:
                continue
            removed_mods = [m for m in MODS if m not in kept]

            def removed(name):
                parts = name.split(".")
                if parts[1] == "encoders":
                    return parts[2] in removed_mods
                if parts[1] == "attention":
                    return any(m in removed_mods for m in parts[2].split("<-"))
                return False

            part = build_model(config_for(family, kept, PAPER_DIMS))
            expected = {k: v for k, v in full_shapes.items() if not removed(k)}
            expected_count = parameter_count(full) - sum(int(np.prod(v)) for k, v in full_shapes.items() if removed(k))
            checked += 1
            if parameter_shapes(part) != expected or parameter_count(part) != expected_count:
                problems.append(f"{family}:{''.join(m[0] for m in kept)}")
    report("C7", "ablation consistency", not problems, f"{checked} ablated models vs tri-modal inventories, mismatches={problems}")


@pytest.mark.slow
def test_c8_table2_structure(tmp_path, report):
    data = tmp_path / "d"
    synth_generate(data, 6, 5.0, seed=5)
    out = tmp_path / "r"
    code = cli.main(["run", "--data", str(data), "--models", "self-nosp,cross-nosp,cross+self", "--modalities", "tva",
                     "--folds", "2", "--repeats", "2", "--seed", "1", "--max-epochs", "3",
                     "--gru-hidden", "4", "--heads", "2", "--classifier-hidden", "4", "--out", str(out)])
    with open(out / "summary.csv") as fh:
        summary = {row["config"]: row for row in csv.DictReader(fh)}
    wanted = {config_label(config_for(f, "tva")) for f in ("self-nosp", "cross-nosp", "cross+self")}
    reported = set(summary) == wanted and all(summary[c]["n_runs"] == "4" for c in wanted)
    width = build_model(config_for("cross+self", "tva", PAPER_DIMS)).classifier.in_width
    ok = code == 0 and reported and width == 480
    report("C8", "table-2 variants", ok, f"exit={code}, summary rows={sorted(summary)}, cross+self classifier width={width}")


REAL_DATA_ENV = "FUSIONATTN_REAL_MANIFEST"


@pytest.mark.skipif(not os.environ.get(REAL_DATA_ENV), reason=f"stretch check; set {REAL_DATA_ENV} to a licensed-corpus manifest")
def test_c9_real_data_stretch(tmp_path, report):
    out = tmp_path / "real"
    code = cli.main(["run", "--data", os.environ[REAL_DATA_ENV], "--models", "self", "--modalities", "tva",
                     "--folds", "5", "--repeats", "10", "--out", str(out)])
    rows = read_results(out / "results.csv", with_confusion=False)
    wa = float(np.mean([r.test_wa for r in rows]))
    uwa = float(np.mean([r.test_uwa for r in rows]))
    ok = code == 0 and abs(wa - 0.587) <= 0.03 and abs(uwa - 0.642) <= 0.03
    report("C9", "real-data stretch", ok, f"self tri-modal WA={wa:.3f} (0.587 +/- 0.03), UWA={uwa:.3f} (0.642 +/- 0.03)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
