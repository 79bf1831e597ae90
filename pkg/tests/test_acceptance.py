"""Acceptance gate: one test per release criterion, each printing a
[PASS]/[FAIL] line with its measured numbers (visible under pytest -s).

Expected values are either trivial identities, worked by hand, or computed by
the independent brute-force oracles defined in this module.
"""

import hashlib
import json
import math
import os
import time
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from dimasr import cli, encoding, metrics, regressor
from dimasr.corpus import PairID, VAScore, parse_quadruplet_file, preprocess
from dimasr.encoding import EncoderSpec
from dimasr.ensemble import CandidatePool, Member, search
from dimasr.metrics import Prediction, rmse_va
from dimasr.trainer import TrainConfig, default_grid, train
from synth import make_instances, write_raw_dir


def report(criterion: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


class TestMetricOracle:
    def test_rmse_matches_brute_force(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        max_err = 0.0
        per_pair = 100   # 10 synthetic pairs x 100 instances = 1000
        for _ in range(10):
            preds = rng.uniform(1, 9, (per_pair, 2))
            golds = rng.uniform(1, 9, (per_pair, 2))
            total = 0.0
            for (vp, ap), (vg, ag) in zip(preds, golds):
                total += (vp - vg) ** 2 + (ap - ag) ** 2
            naive = math.sqrt(total / per_pair)
            max_err = max(max_err, abs(rmse_va(preds, golds) - naive))
        exact = (rmse_va([(6.0, 5.0)], [(5.0, 6.0)]) == math.sqrt(2.0)
                 and rmse_va([(6.0, 5.0), (3.0, 7.0)],
                             [(5.0, 5.0), (3.0, 5.0)]) == math.sqrt(2.5))
        elapsed = time.perf_counter() - t0
        report("metric oracle: brute-force agreement within 1e-9 and exact "
               "worked values, under 1 s",
               max_err < 1e-9 and exact and elapsed < 1.0,
               f"max |diff| {max_err:.2e}, {elapsed:.3f} s")


class TestBoundInvariants:
    def test_range_symmetry_monotonicity(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        z = rng.uniform(-50.0, 50.0, 100_000)
        out = regressor.bound(z)
        strict = bool(np.all(out > 1.0) and np.all(out < 9.0))
        sym_err = float(np.max(np.abs(regressor.bound(z)
                                      + regressor.bound(-z) - 10.0)))
        z_sorted = np.sort(z)
        monotone = bool(np.all(np.diff(regressor.bound(z_sorted)) >= 0.0))
        elapsed = time.perf_counter() - t0
        report("bound invariants: strict (1,9) range, symmetry within 1e-12, "
               "monotone on sorted samples, under 1 s",
               strict and sym_err < 1e-12 and monotone and elapsed < 1.0,
               f"sym err {sym_err:.2e}, {elapsed:.3f} s")


def _loss_of(theta, feats, gold, bounded, with_proj):
    d = feats.shape[1]
    idx = 0
    W = theta[idx:idx + 2 * d].reshape(2, d); idx += 2 * d
    b = theta[idx:idx + 2]; idx += 2
    A = theta[idx:].reshape(d, d) if with_proj else None
    params = regressor.HeadParams(W=W, b=b, dropout_rate=0.0, bounded=bounded)
    pred, _ = regressor.forward_cached(feats, params, A, train=False)
    return regressor.mse_loss(pred, gold)


class TestGradientCheck:
    def test_matches_central_differences(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(11)
        worst = 0.0
        for case in range(50):
            bounded = case % 2 == 0
            with_proj = case % 4 < 2
            d = int(rng.integers(2, 17))
            n = int(rng.integers(1, 7))
            feats = rng.normal(size=(n, d))
            gold = rng.uniform(1, 9, (n, 2))
            W = 0.5 * rng.normal(size=(2, d))
            b = 0.5 * rng.normal(size=2)
            A = np.eye(d) + 0.1 * rng.normal(size=(d, d)) if with_proj else None
            params = regressor.HeadParams(W=W, b=b, dropout_rate=0.0,
                                          bounded=bounded)
            _, cache = regressor.forward_cached(feats, params, A, train=False)
            grads = regressor.backward(cache, gold)
            parts = [grads["W"].ravel(), grads["b"]]
            theta = [W.ravel(), b]
            if with_proj:
                parts.append(grads["A"].ravel())
                theta.append(A.ravel())
            analytic = np.concatenate(parts)
            theta = np.concatenate(theta)

            h = 1e-5
            numeric = np.empty_like(theta)
            for i in range(theta.size):
                up = theta.copy(); up[i] += h
                dn = theta.copy(); dn[i] -= h
                numeric[i] = (_loss_of(up, feats, gold, bounded, with_proj)
                              - _loss_of(dn, feats, gold, bounded, with_proj)) / (2 * h)
            rel = (np.linalg.norm(analytic - numeric)
                   / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12))
            worst = max(worst, rel)
        elapsed = time.perf_counter() - t0
        report("gradient check: 50 random cases (d<=16), bounded and raw "
               "heads, relative error < 1e-4, under 5 s",
               worst < 1e-4 and elapsed < 5.0,
               f"worst rel err {worst:.2e}, {elapsed:.2f} s")


CRAFTED_RECORDS = [
    {"ID": "r1", "Text": "the duck was great but the noise",
     "Quadruplets": [
         {"Aspect": "NULL", "Category": "AMB#GEN", "Opinion": "implicit",
          "VA": "6.0#5.5"},
         {"Aspect": "duck", "Category": "FOOD#Q", "Opinion": "great",
          "VA": "7.5#6.0"},
         {"Aspect": "noise", "Category": "AMB#GEN", "Opinion": "loud",
          "VA": "2.0#7.0"}]},
    {"ID": "r2", "Text": "battery story",
     "Quadruplets": [
         {"Aspect": "battery", "Category": "LAP#B", "Opinion": "endless",
          "VA": "9.5#5.0"},
         {"Aspect": "battery", "Category": "LAP#B", "Opinion": "fine",
          "VA": "8.0#6.0"}]},
    {"ID": "r3", "Text": "screen bright then dim",
     "Quadruplets": [
         {"Aspect": "screen", "Category": "LAP#S", "Opinion": "bright",
          "VA": "7.0#6.0"},
         {"Aspect": "screen", "Category": "LAP#S", "Opinion": "dim",
          "VA": "3.0#4.0"}]},
    {"ID": "r4", "Text": "soup below scale",
     "Quadruplets": [
         {"Aspect": "soup", "Category": "FOOD#Q", "Opinion": "cold",
          "VA": "0.5#5.0"}]},
    {"ID": "r5", "Text": "nothing annotated", "Quadruplets": []},
]

HAND_ENUMERATED = [
    ("r1", "duck", VAScore(7.5, 6.0)),
    ("r1", "noise", VAScore(2.0, 7.0)),
    ("r2", "battery", VAScore(8.0, 6.0)),
    ("r3", "screen", VAScore(7.0, 6.0)),
]


class TestPreprocessingConformance:
    def test_crafted_file_hand_enumerated(self, tmp_path):
        path = tmp_path / "zho-res.json"
        path.write_text(json.dumps(CRAFTED_RECORDS), encoding="utf-8")
        records = parse_quadruplet_file(path, PairID.parse("zho-res"))
        instances, rep = preprocess(records)
        got = [(i.id, i.aspect, i.gold) for i in instances]
        counts_ok = (rep.records_in == 5 and rep.quadruplets_in == 8
                     and rep.null_aspect_drops == 1
                     and rep.out_of_range_drops == 2
                     and rep.duplicate_aspect_drops == 1
                     and rep.expanded_records == 1
                     and rep.instances_out == 4 and rep.reconciles())
        every_rule_fired = min(rep.null_aspect_drops, rep.out_of_range_drops,
                               rep.duplicate_aspect_drops,
                               rep.expanded_records) >= 1
        report("preprocessing conformance: crafted file yields the "
               "hand-enumerated instances and drop counts, every rule fires",
               got == HAND_ENUMERATED and counts_ok and every_rule_fired,
               f"{rep.as_dict()}")


def _brute_force_selection(members, gold_instances, min_size, max_size):
    """Scalar-loop exhaustive re-scoring, tie-break (size, id tuple)."""
    ordered = sorted(members, key=lambda m: m.id)
    pair = gold_instances[0].pair
    keyed = {m.id: {p.key: p.va for p in m.dev[pair]} for m in ordered}
    best = None
    n_scored = 0
    for k in range(min_size, max_size + 1):
        for subset in combinations(ordered, k):
            total = 0.0
            for inst in gold_instances:
                v = sum(keyed[m.id][inst.key].valence for m in subset) / k
                a = sum(keyed[m.id][inst.key].arousal for m in subset) / k
                total += (v - inst.gold.valence) ** 2 + (a - inst.gold.arousal) ** 2
            score = math.sqrt(total / len(gold_instances))
            cand = (score, k, tuple(m.id for m in subset))
            n_scored += 1
            if best is None or cand < best:
                best = cand
    return best, n_scored


def _shifted(instances, offsets):
    return [Prediction(id=i.id, aspect=i.aspect,
                       va=VAScore(i.gold.valence + dv, i.gold.arousal + da))
            for i, (dv, da) in zip(instances, offsets)]


class TestEnsembleOracle:
    def test_exhaustive_search_against_rescoring(self):
        rng = np.random.default_rng(31)
        pairs = [PairID.parse(f"l{i:02d}-dom") for i in range(10)]
        gold = {p: make_instances(str(p), 200, seed=i)
                for i, p in enumerate(pairs)}
        members = []
        for m in range(7):
            dev = {p: _shifted(gold[p], rng.normal(0, 0.9, (200, 2)))
                   for p in pairs}
            members.append(Member(id=f"M{m + 1}", dev=dev))
        pool = CandidatePool(members)
        t0 = time.perf_counter()
        selection = search(pool, gold, min_size=2, max_size=7)
        search_elapsed = time.perf_counter() - t0

        counts_ok = all(e.n_scored == 120 for e in selection.per_pair.values())
        agree = True
        for pair in pairs:
            best, n = _brute_force_selection(members, gold[pair], 2, 7)
            entry = selection.per_pair[pair]
            agree &= (entry.subset == best[2] and n == 120
                      and abs(entry.dev_rmse - best[0]) < 1e-12)

        # Crafted case: two members with exactly opposite errors must win.
        pair = pairs[0]
        delta = rng.normal(0, 1.0, (200, 2))
        crafted = [
            Member(id="A", dev={pair: _shifted(gold[pair], delta)}),
            Member(id="B", dev={pair: _shifted(gold[pair], -delta)}),
            Member(id="C", dev={pair: _shifted(
                gold[pair], rng.normal(0, 1.0, (200, 2)))}),
        ]
        crafted_sel = search(CandidatePool(crafted), {pair: gold[pair]})
        crafted_ok = (crafted_sel.per_pair[pair].subset == ("A", "B")
                      and crafted_sel.per_pair[pair].dev_rmse < 1e-12)
        report("ensemble oracle: 120 subsets per pair, equals independent "
               "re-scoring, opposite-error pair wins, search under 10 s",
               counts_ok and agree and crafted_ok and search_elapsed < 10.0,
               f"search {search_elapsed:.2f} s for 10 pairs x 200 instances")


class TestTrainingSanity:
    def test_loss_reduction_and_early_stopping(self):
        t0 = time.perf_counter()
        spec = EncoderSpec(max_len=32, hidden_size=16)
        instances = make_instances("zho-res", 20, seed=3)
        val = make_instances("zho-res", 5, seed=4)
        cfg = TrainConfig(batch_size=8, learning_rate=0.05, max_epochs=200,
                          bounded=True, seed=42, patience=500,
                          dropout_rate=0.0)
        head0 = regressor.init_head(spec.hidden_size, cfg.seed, 0.0, True)
        feats = encoding.instance_features(instances, spec)
        e0 = encoding.apply_projection(
            feats, encoding.init_projection(spec.hidden_size))
        initial = regressor.mse_loss(regressor.predict(e0, head0),
                                     metrics.va_array([i.gold for i in instances]))
        ckpt = train(instances, val, cfg, spec)
        final = ckpt.history[-1]["train_mse"]
        reduced = len(ckpt.history) == 200 and final < 0.10 * initial

        vals = [1.0, 0.9, 0.95, 0.97] + [0.5] * 6
        stub = train(instances, val,
                     TrainConfig(batch_size=8, learning_rate=0.05,
                                 max_epochs=10, bounded=True, seed=7,
                                 patience=2),
                     spec, val_metric_fn=lambda ep, model: vals[ep - 1])
        twin = train(instances, val,
                     TrainConfig(batch_size=8, learning_rate=0.05,
                                 max_epochs=2, bounded=True, seed=7,
                                 patience=9),
                     spec, val_metric_fn=lambda ep, model: vals[ep - 1])
        stopping_ok = (len(stub.history) == 4 and stub.epoch_of_best == 2
                       and stub.best_val_rmse == 0.9
                       and np.array_equal(stub.head.W, twin.head.W)
                       and np.array_equal(stub.head.b, twin.head.b)
                       and np.array_equal(stub.projection, twin.projection))
        elapsed = time.perf_counter() - t0
        report("training sanity: 200 epochs cut MSE below 10% of initial; "
               "scripted sequence stops after epoch 4 restoring epoch 2, "
               "under 30 s",
               reduced and stopping_ok and elapsed < 30.0,
               f"mse {initial:.3f} -> {final:.3f} "
               f"({final / initial:.1%}), {elapsed:.2f} s")


RUN_CONFIG = {
    "encoder": {"backend": "toy-deterministic", "template": "bert-style",
                "max_len": 32, "hidden_size": 16, "vocab_size": 50000,
                "seed": 0, "trainable_layer": True, "model_name": None},
    "seed": 42, "patience": 2, "validation_fraction": 0.1,
}


def _run_full_pipeline(raw: Path, work: Path) -> None:
    config = work / "run.json"
    config.parent.mkdir(parents=True, exist_ok=True)
    config.write_text(json.dumps(RUN_CONFIG), encoding="utf-8")
    steps = [
        ["preprocess", "--input", str(raw / "train"), "--out", str(work / "insts/train")],
        ["preprocess", "--input", str(raw / "dev"), "--out", str(work / "insts/dev")],
        ["preprocess", "--input", str(raw / "test"), "--out", str(work / "insts/test")],
        ["train", "--data", str(work / "insts/train"), "--out", str(work / "ckpts"),
         "--config", str(config), "--seed", "42"],
        ["predict", "--ckpts", str(work / "ckpts"),
         "--data", str(work / "insts/dev"), "--out", str(work / "preds/dev")],
        ["predict", "--ckpts", str(work / "ckpts"),
         "--data", str(work / "insts/test"), "--out", str(work / "preds/test")],
        ["ensemble", "--dev-preds", str(work / "preds/dev"),
         "--test-preds", str(work / "preds/test"),
         "--dev-gold", str(work / "insts/dev"), "--out", str(work / "ens")],
        ["submit", "--pred", str(work / "ens/test"), "--out", str(work / "submission")],
    ]
    for step in steps:
        assert cli.main(step) == 0, step


def _artifact_hashes(work: Path) -> dict[str, str]:
    out = {}
    for sub in ("insts", "ckpts", "preds", "ens", "submission"):
        for p in sorted((work / sub).rglob("*")):
            if p.is_file():
                out[str(p.relative_to(work))] = hashlib.sha256(
                    p.read_bytes()).hexdigest()
    return out


class TestPipelineDeterminism:
    def test_two_runs_bytewise_identical(self, tmp_path):
        raw = tmp_path / "raw"
        write_raw_dir(raw / "train", n_records=12, seed=42)
        write_raw_dir(raw / "dev", n_records=6, seed=7)
        write_raw_dir(raw / "test", n_records=6, seed=9, with_gold=False,
                      anomalies=False)
        t0 = time.perf_counter()
        _run_full_pipeline(raw, tmp_path / "run_a")
        _run_full_pipeline(raw, tmp_path / "run_b")
        a = _artifact_hashes(tmp_path / "run_a")
        b = _artifact_hashes(tmp_path / "run_b")
        differing = [k for k in a if a[k] != b.get(k)]
        elapsed = time.perf_counter() - t0
        report("determinism: two seed-42 pipeline runs produce byte-identical "
               "checkpoints, predictions, selections, submissions",
               a == b, f"{len(a)} artifacts compared, {elapsed:.1f} s"
               + (f"; first diff {differing[0]}" if differing else ""))


class TestCandidateShapes:
    def test_grid_flags_and_matrix_rendering(self):
        grid = default_grid()
        flags = [c.bounded for c in grid]
        grid_ok = (len(grid) == 7 and flags.count(True) == 5
                   and flags.count(False) == 2
                   and flags == [True, False, True, True, True, True, False])

        pairs = [PairID.parse(p) for p in ("aaa-res", "bbb-lap", "ccc-hot")]
        gold = {p: make_instances(str(p), 10, seed=i)
                for i, p in enumerate(pairs)}
        rng = np.random.default_rng(3)
        members = [Member(id=f"M{i + 1}",
                          dev={p: _shifted(gold[p], rng.normal(0, 1, (10, 2)))
                               for p in pairs})
                   for i in range(7)]
        selection = search(CandidatePool(members), gold)
        text = selection.render_membership_matrix()
        lines = text.splitlines()
        matrix_ok = (lines[0].split() == ["pair"] + [f"M{i}" for i in range(1, 8)]
                     + ["Number"]
                     and len(lines) == 1 + len(pairs)
                     and all(line.count("✓") == int(line.split()[-1])
                             for line in lines[1:]))
        report("candidate shapes: default grid is 7 configs with the 5+2 "
               "bounded/raw flag pattern; selections render as a per-pair "
               "membership matrix", grid_ok and matrix_ok)


@pytest.mark.skipif(
    not (os.environ.get("DIMASR_PRETRAINED_MODEL")
         and os.environ.get("DIMASR_OFFICIAL_DATA")),
    reason="optional full-scale path: set DIMASR_PRETRAINED_MODEL and "
           "DIMASR_OFFICIAL_DATA to run with a pretrained backend")
class TestOptionalFullScale:
    def test_pipeline_with_pretrained_backend(self, tmp_path):
        model = os.environ["DIMASR_PRETRAINED_MODEL"]
        raw = Path(os.environ["DIMASR_OFFICIAL_DATA"])
        from dimasr.hf_backend import PretrainedEncoder
        probe = PretrainedEncoder(EncoderSpec(
            backend="pretrained-multilingual", model_name=model,
            hidden_size=int(os.environ.get("DIMASR_HIDDEN_SIZE", "768"))))
        config = {
            "encoder": probe.spec.to_dict(),
            "seed": 42, "patience": 2, "validation_fraction": 0.1,
            "grid": [{"batch_size": 16, "learning_rate": 1e-5,
                      "max_epochs": 1, "bounded": True},
                     {"batch_size": 32, "learning_rate": 1e-5,
                      "max_epochs": 1, "bounded": False}],
        }
        work = tmp_path / "full"
        work.mkdir()
        (work / "run.json").write_text(json.dumps(config), encoding="utf-8")
        for split in ("train", "dev", "test"):
            assert cli.main(["preprocess", "--input", str(raw / split),
                             "--out", str(work / f"insts/{split}")]) == 0
        assert cli.main(["train", "--data", str(work / "insts/train"),
                         "--out", str(work / "ckpts"),
                         "--config", str(work / "run.json")]) == 0
        for split in ("dev", "test"):
            assert cli.main(["predict", "--ckpts", str(work / "ckpts"),
                             "--data", str(work / f"insts/{split}"),
                             "--out", str(work / f"preds/{split}")]) == 0
        assert cli.main(["ensemble", "--dev-preds", str(work / "preds/dev"),
                         "--test-preds", str(work / "preds/test"),
                         "--dev-gold", str(work / "insts/dev"),
                         "--out", str(work / "ens")]) == 0
        submissions = list((work / "ens/submission").glob("*.json"))
        report("optional full-scale: pretrained backend end-to-end run emits "
               "leaderboard-format submissions", len(submissions) > 0)
