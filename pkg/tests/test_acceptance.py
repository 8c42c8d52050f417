"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``; the lines are also
repeated in the terminal summary.
"""

import json
import random
import time

import numpy as np
import pytest
from conftest import criterion

from fp8probe.cli import main
from fp8probe.config import PipelineConfig
from fp8probe.dispatch import DispatchConfig, build_plan, select
from fp8probe.fp8 import E4M3, E5M2, decode, encode
from fp8probe.gemm import GemmDirection, ThroughputSample
from fp8probe.mods import BlockNormConfig, blocknorm_backward, blocknorm_forward, hardswish_backward, hardswish_forward, rmsnorm
from fp8probe.probe import BASELINE_ID, CandidateResult, ProbeReport, compare_distributions, geomean_mere
from fp8probe.sampling import Rng, sample_weight
from fp8probe.synth import LayerStream
from fp8probe.tracking import InputStats, WeightStats, input_covariance, input_update, weight_init, weight_update

# measured tensorwise learned/normal geomean ratio on the default heavy layers, seed 0
HEAVY_RATIO_PIN = 1.1883918300522265


def _rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_1_code_space_exact():
    with criterion(1, "FP8 code-space roundtrip and max_finite") as info:
        t0 = time.perf_counter()
        for fmt, top in ((E4M3, 448.0), (E5M2, 57344.0)):
            codes = np.arange(256, dtype=np.uint8)
            vals = decode(codes, fmt)
            back = encode(vals, fmt)
            nan = np.isnan(vals)
            assert np.array_equal(back[~nan], codes[~nan])
            assert np.all(np.isnan(decode(back[nan], fmt)))
            assert np.array_equal(np.signbit(decode(back[nan], fmt)), np.signbit(vals[nan]))
            finite = vals[np.isfinite(vals)]
            assert finite.max() == top and fmt.max_finite == top
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0
        info["runtime"] = f"{elapsed:.3f}s"


def test_2_welford_matches_two_pass():
    with criterion(2, "Welford vs 64-bit two-pass, 100 streams") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for i in range(100):
            k = int(rng.integers(1, 65))
            rows = 100_000 if i % 10 == 0 else int(rng.integers(2, 20_000))
            scales = 10.0 ** rng.uniform(-2, 2, k)
            data = rng.standard_normal((rows, k)) * scales + rng.uniform(-100, 100, k)
            cuts = np.sort(rng.choice(np.arange(1, rows), size=min(rows - 1, int(rng.integers(0, 60))), replace=False))
            s = InputStats.empty(k)
            for part in np.split(data, cuts):
                s = input_update(s, part)
            c = data - data.mean(axis=0)
            oracle = c.T @ c / (rows - 1)
            worst = max(worst, _rel_fro(input_covariance(s), oracle))
        elapsed = time.perf_counter() - t0
        info["worst_rel_fro"] = f"{worst:.2e}"
        assert worst < 1e-5
        assert elapsed < 30


def _sampler_vec_cov(seed, n):
    u = np.eye(8)
    u[:2, :2] = np.diag([1.0, 4.0])
    truth = WeightStats(np.zeros((8, 8)), u, np.eye(8), 0.95, 0.0)
    rng = Rng(seed)
    # column-major vec(W), whose covariance is V (x) U
    vecs = np.stack([sample_weight(truth, rng).astype(np.float64).T.ravel() for _ in range(n)])
    return vecs.T @ vecs / n, np.kron(np.eye(8), u)


def test_3_matrix_normal_sampler():
    with criterion(3, "matrix-normal sampler vec-covariance") as info:
        t0 = time.perf_counter()
        emp, want = _sampler_vec_cov(33, 50_000)
        err = _rel_fro(emp, want)
        info["rel_fro"] = f"{err:.4f}"
        assert err < 0.10
        again, _ = _sampler_vec_cov(33, 200)
        first, _ = _sampler_vec_cov(33, 200)
        assert np.array_equal(again, first)
        assert time.perf_counter() - t0 < 60


def test_4_weight_tracker_recovery():
    with criterion(4, "weight tracker recovers U at m = 0.9") as info:
        t0 = time.perf_counter()
        u = np.array([[1.0, 0.5, 0.0, 0.2],
                      [0.5, 2.0, 0.6, 0.0],
                      [0.0, 0.6, 3.0, -0.9],
                      [0.2, 0.0, -0.9, 4.0]])
        v = 0.3 ** np.abs(np.subtract.outer(np.arange(256), np.arange(256)))
        truth = WeightStats(np.zeros((4, 256)), u, v, 0.9, 0.0)
        rng = Rng(4)
        s = weight_init(sample_weight(truth, rng), momentum=0.9)
        for _ in range(499):
            s = weight_update(s, sample_weight(truth, rng))
        est = s.row_cov * 4 / np.trace(s.row_cov)
        ref = u * 4 / np.trace(u)
        # off-diagonal entries are measured relative to sqrt(U_ii U_jj) so zeros stay meaningful
        denom = np.sqrt(np.outer(np.diag(ref), np.diag(ref)))
        err = np.max(np.abs(est - ref) / denom)
        info["max_rel_err"] = f"{err:.4f}"
        assert err < 0.15
        assert time.perf_counter() - t0 < 30


def test_5_gradient_checks():
    with criterion(5, "blocknorm / hardswish backward vs central differences") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(5)
        h = 1e-5
        worst_bn = worst_hs = 0.0
        for _ in range(20):
            block = int(rng.choice([4, 8, 16]))
            cfg = BlockNormConfig(block)
            x = rng.standard_normal((int(rng.integers(1, 4)), block * int(rng.integers(1, 4)))) * rng.uniform(0.5, 3)
            g = rng.standard_normal(x.shape)
            fd = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                e = np.zeros_like(x)
                e[idx] = h
                fd[idx] = np.sum(g * (blocknorm_forward(x + e, cfg) - blocknorm_forward(x - e, cfg))) / (2 * h)
            worst_bn = max(worst_bn, np.max(np.abs(blocknorm_backward(x, g, cfg) - fd)))

            xs = rng.uniform(-6, 6, 64)
            xs = xs[(np.abs(xs - 3) > 1e-3) & (np.abs(xs + 3) > 1e-3)]
            gs = rng.standard_normal(xs.shape)
            fd = gs * (hardswish_forward(xs + h) - hardswish_forward(xs - h)) / (2 * h)
            worst_hs = max(worst_hs, np.max(np.abs(hardswish_backward(xs, gs) - fd)))
        info["blocknorm"] = f"{worst_bn:.1e}"
        info["hardswish"] = f"{worst_hs:.1e}"
        assert worst_bn < 1e-6 and worst_hs < 1e-6
        assert time.perf_counter() - t0 < 10


def test_6_blocknorm_degeneracy():
    with criterion(6, "BlockNorm block = N is RMSNorm; blocks independent"):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.choice([8, 64, 256, 512]))
            x = rng.standard_normal((int(rng.integers(1, 9)), n)) * 10.0 ** rng.uniform(-3, 3)
            want = rmsnorm(x)
            got = blocknorm_forward(x, BlockNormConfig(n))
            assert np.all(np.abs(got - want) <= np.spacing(np.abs(want)))

            cfg = BlockNormConfig(max(n // 4, 1))
            base = blocknorm_forward(x, cfg)
            bumped = x.copy()
            bumped[:, : cfg.block_size] += rng.standard_normal((x.shape[0], cfg.block_size)) * 100
            out = blocknorm_forward(bumped, cfg)
            assert np.array_equal(out[:, cfg.block_size:], base[:, cfg.block_size:])


def test_7_default_constants(tmp_path):
    with criterion(7, "default methodology constants from gen-config"):
        assert main(["gen-config", "--out", str(tmp_path / "c.json")]) == 0
        d = json.loads((tmp_path / "c.json").read_text())
        assert d["probe"]["samples"] == 50
        assert d["dispatch"]["mere_threshold"] == 0.2
        assert d["dispatch"]["min_speedup"] == 1.05
        assert d["schedule"]["activate_every"] == 100
        assert d["schedule"]["snapshot_every"] == 10_000
        cfg = PipelineConfig.load(tmp_path / "c.json")
        assert (cfg.probe.samples, cfg.dispatch.mere_threshold, cfg.dispatch.min_speedup) == (50, 0.2, 1.05)


def test_8_distribution_sensitivity():
    with criterion(8, "heavy learned vs normal tensorwise geomean MERE") as info:
        cfg = PipelineConfig()
        tensorwise = next(c for c in cfg.candidates if c.candidate_id == "e4m3-tensorwise")
        heavy = [lc for lc in cfg.layers if lc.distribution.kind == "heavy"]
        assert heavy
        rows = []
        for lc in heavy:
            spec = lc.spec
            stream = LayerStream(lc.distribution, spec.batch, spec.in_features, spec.out_features,
                                 Rng(0).spawn(spec.name))
            s = InputStats.empty(spec.in_features)
            w = weight_init(stream.weight(0))
            # 100 activations: the default cadence over 10,000 iterations
            for t in range(1, 101):
                s = input_update(s, stream.inputs(t))
                w = weight_update(w, stream.weight(t))
            rows += compare_distributions(spec, w, [tensorwise], cfg.probe.samples,
                                          Rng(0).spawn(spec.name).spawn("compare"), s)
        learned = geomean_mere([r.learned_mere for r in rows])
        normal = geomean_mere([r.normal_mere for r in rows])
        ratio = learned / normal
        info["learned"] = f"{learned:.4f}"
        info["normal"] = f"{normal:.4f}"
        info["ratio"] = f"{ratio:.4f}"
        assert ratio > 1.0
        assert ratio == pytest.approx(HEAVY_RATIO_PIN, rel=1e-3)


def _row(cid, mere, speedup, eps, mere_max):
    return CandidateResult("L", GemmDirection.FORWARD, cid, mere, mere_max, ThroughputSample(eps, 1.0 / eps, 3), speedup, 50)


def _oracle(rows, cfg):
    ok = [r for r in rows if r.candidate_id != BASELINE_ID
          and (r.mere if cfg.mere_statistic == "mean" else r.mere_max) < cfg.mere_threshold
          and r.speedup_vs_baseline > cfg.min_speedup]
    if not ok:
        return BASELINE_ID
    return sorted(ok, key=lambda r: (-r.throughput.elements_per_second, r.candidate_id))[0].candidate_id


def test_9_dispatch_oracle():
    with criterion(9, "dispatch vs brute-force oracle on 1000 tables") as info:
        rnd = random.Random(9)
        seen = {"all_filtered": 0, "tied": 0, "chosen": 0}
        for i in range(1000):
            rows = [_row(BASELINE_ID, 0.0, 1.0, 100.0, 0.0)]
            n = rnd.randint(0, 6)
            eps_pool = [80.0, 120.0, 150.0, 150.0, 200.0]
            for cid in rnd.sample("ABCDEFGH", n):
                mere = 0.5 if i % 10 == 0 else rnd.choice([0.05, 0.15, 0.19, 0.2, 0.25, rnd.random()])
                sp = rnd.choice([1.0, 1.05, 1.06, 1.5, rnd.uniform(0.5, 3.0)])
                rows.append(_row(cid, mere, sp, rnd.choice(eps_pool), mere * rnd.uniform(1, 3)))
            cfg = DispatchConfig(rnd.choice([0.1, 0.2, 0.3]), rnd.choice([1.0, 1.05, 1.2]), rnd.choice(["mean", "max"]))
            want = _oracle(rows, cfg)
            plan = build_plan(ProbeReport(rows), cfg)
            got = plan.entry("L", GemmDirection.FORWARD).candidate_id
            assert got == want
            if want == BASELINE_ID:
                seen["all_filtered"] += 1
                for _ in range(3):
                    tighter = DispatchConfig(cfg.mere_threshold * rnd.uniform(0.05, 1.0),
                                             cfg.min_speedup * rnd.uniform(1.0, 2.0), cfg.mere_statistic)
                    assert select(rows, tighter).candidate_id == BASELINE_ID
            else:
                seen["chosen"] += 1
                top = max(r.throughput.elements_per_second for r in rows if r.candidate_id == want)
                passing = [r for r in rows if r.candidate_id != BASELINE_ID and r.throughput.elements_per_second == top
                           and _oracle([rows[0], r], cfg) == r.candidate_id]
                seen["tied"] += len(passing) > 1
        info.update(seen)
        assert min(seen.values()) > 0


def _ten_layer_config(tmp_path):
    d = PipelineConfig().to_dict()
    kinds = [{"kind": "heavy", "rho": 0.5, "scale_decades": 3.0, "mean_shift": 1.0, "weight_rho": 0.3},
             {"kind": "normal"},
             {"kind": "correlated", "rho": 0.8, "weight_rho": 0.3}]
    d["seed"] = 1234
    d["layers"] = [{"name": f"layer{i}", "batch": 64, "in_features": 128, "out_features": 128 if i % 2 else 256,
                    "distribution": kinds[i % 3]} for i in range(10)]
    (tmp_path / "cfg.json").write_text(json.dumps(d))
    (tmp_path / "tp.csv").write_text("candidate_id,elements_per_second\nbaseline,1e9\n"
                                     "e4m3-tensorwise,1.6e9\ne4m3-rowwise,1.5e9\ne4m3-blockwise,1.3e9\n")
    return tmp_path / "cfg.json"


def _strip_created(path):
    return b"\n".join(ln for ln in path.read_bytes().splitlines() if not ln.lstrip().startswith(b'"created"'))


def test_10_end_to_end_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    with criterion(10, "CLI pipeline byte-identical across runs, 10 layers") as info:
        t0 = time.perf_counter()
        outputs = []
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            cfg = _ten_layer_config(d)
            assert main(["track", "--config", str(cfg)]) == 0
            assert main(["probe", "--config", str(cfg), "--throughput-table", str(d / "tp.csv")]) == 0
            assert main(["dispatch", "--config", str(cfg)]) == 0
            outputs.append((d / "report.json", d / "plan.json"))
        (ra, pa), (rb, pb) = outputs
        assert _strip_created(ra) == _strip_created(rb)
        assert _strip_created(pa) == _strip_created(pb)
        assert len(json.loads(ra.read_text())["body"]["results"]) == 10 * 3 * 4
        elapsed = time.perf_counter() - t0
        info["runtime"] = f"{elapsed:.1f}s"
        assert elapsed < 120
