"""Acceptance suite: every criterion at its stated tolerance and time budget.

Each test prints one ``PASS``/``FAIL`` line as it finishes, and the lines are
repeated in the session summary.  Run on its own with::

    pytest tests/test_acceptance.py -v

or as a script (``python tests/test_acceptance.py``) for just the lines.
"""

import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from adassl import cli
from adassl.autodiff import (Tape, Tensor, backward, dense, finite_diff_gradient, grad_reverse,
                             relu, soft_cross_entropy)
from adassl.datagen import cross_set_mixup, make_rng, one_hot
from adassl.divergence import energy_distance_sq, mixup_energy_ratio, read_mmd_curve_csv
from adassl.model import (NetworkSpec, ada_objective, forward_class, forward_domain,
                          init_params)
from adassl.trainer import feature_divergence, fit

SEEDS = range(20)
ABLATIONS = ("baseline", "dist", "aug", "full")
LABEL_COUNTS = (4, 6, 10, 20, 50)

LINES: list[str] = []
_reporter = None


@pytest.fixture(autouse=True)
def _terminal(request):
    global _reporter
    _reporter = request.config.pluginmanager.get_plugin("terminalreporter")


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    LINES.append(line)
    if _reporter is not None:
        _reporter.write_line("")
        _reporter.write_line(line)
    else:
        print(line)


class RunCache:
    """Trains each (ablation, seed, n_labeled) once for the whole module."""

    def __init__(self):
        self.base = cli.ExperimentConfig.from_dict(cli.load_preset("twomoon-ada"))
        self.base = replace(self.base, track_divergence=False)
        self.runs: dict[tuple, dict] = {}
        self.seconds = 0.0

    def get(self, ablation: str, seed: int, n_labeled: int = 6) -> dict:
        key = (ablation, seed, n_labeled)
        if key not in self.runs:
            start = time.perf_counter()
            cfg = replace(self.base, ablation=ablation, seed=seed, n_labeled=n_labeled)
            ds, test = cli.experiment_data(cfg)
            spec = cfg.network_spec(ds.dim, ds.num_classes)
            params, rep = fit(ds, spec, cfg.train_config(), test)
            mmd, _ = feature_divergence(params, spec, ds.labeled_x, ds.unlabeled_x)
            self.runs[key] = {"test_err": rep.final.test_err, "mmd": mmd,
                              "seconds": time.perf_counter() - start}
            self.seconds += self.runs[key]["seconds"]
        return self.runs[key]

    def elapsed(self, keys) -> float:
        return sum(self.runs[k]["seconds"] for k in keys)


@pytest.fixture(scope="module")
def runs():
    return RunCache()


class TestAcceptance:
    def test_1_ablation_trend(self, runs):
        keys = [(ab, s, 6) for ab in ABLATIONS for s in SEEDS]
        for k in keys:
            runs.get(*k)
        mean = {ab: float(np.mean([runs.runs[(ab, s, 6)]["test_err"] for s in SEEDS]))
                for ab in ABLATIONS}
        seconds = runs.elapsed(keys)
        margin = mean["baseline"] - mean["full"]
        checks = {
            "full<baseline": mean["full"] < mean["baseline"],
            "dist<=baseline": mean["dist"] <= mean["baseline"],
            "aug<=baseline": mean["aug"] <= mean["baseline"],
            "full is min": mean["full"] == min(mean.values()),
            "margin>=3pp": margin >= 0.03,
            "time<=600s": seconds <= 600,
        }
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        report(1, "ablation trend",  ok,
               " ".join(f"{ab}={mean[ab]:.4f}" for ab in ABLATIONS)
               + f" margin={100 * margin:.2f}pp t={seconds:.0f}s"
               + (f" failed: {', '.join(failed)}" if failed else ""))
        assert ok, checks

    def test_2_mmd_curve(self, tmp_path):
        start = time.perf_counter()
        assert cli.main(["mmd-curve", "--seed", "0", "--out", str(tmp_path)]) == 0
        seconds = time.perf_counter() - start
        rows = read_mmd_curve_csv(tmp_path / "mmd_curve.csv")
        means = [r.mean_mmd for r in rows]
        by_n = {r.n: r for r in rows}
        violations = sum(b > a for a, b in zip(means, means[1:]))
        checks = {
            "sizes": [r.n for r in rows] == list(cli.DEFAULT_SIZES),
            "monotone (<=1 violation)": violations <= 1,
            "mean4>2*mean512": by_n[4].mean_mmd > 2 * by_n[512].mean_mmd,
            "sd4>sd512": by_n[4].sd_mmd > by_n[512].sd_mmd,
            "time<=120s": seconds <= 120,
        }
        ok = all(checks.values())
        report(2, "MMD vs labeled size", ok,
               f"violations={violations} mean4={by_n[4].mean_mmd:.4f} "
               f"mean512={by_n[512].mean_mmd:.4f} sd4={by_n[4].sd_mmd:.4f} "
               f"sd512={by_n[512].sd_mmd:.4f} t={seconds:.0f}s")
        assert ok, checks

    def test_3_mmd_deviation_bound(self, tmp_path):
        start = time.perf_counter()
        assert cli.main(["prop-check", "--seed", "0", "--trials", "1000",
                         "--out", str(tmp_path)]) == 0
        seconds = time.perf_counter() - start
        prop1 = json.loads((tmp_path / "prop1.json").read_text())
        assert (prop1["n"], prop1["m"], prop1["kernel_bound"]) == (50, 1000, 1.0)
        rows = [r for r in prop1["rows"] if r["prob_bound"] < 1]
        ok = bool(rows) and all(r["exceedance_rate"] <= r["prob_bound"] for r in rows) \
            and seconds <= 120
        report(3, "MMD deviation bound", ok,
               " ".join(f"eps={r['epsilon']}: rate={r['exceedance_rate']:.3f}"
                        f"<=bound={r['prob_bound']:.3g}" for r in prop1["rows"])
               + f" t={seconds:.0f}s")
        assert ok

    def test_4_mixup_energy_ratio(self):
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        a = rng.normal(size=(500, 2))
        b = rng.normal(size=(500, 2)) + [4.0, 0.0]
        ratio = mixup_energy_ratio(a, b, 1.0, 100_000, make_rng(1))
        worst = 0.0
        for _ in range(100):
            n, m, d = rng.integers(2, 40, size=3)
            x = rng.normal(size=(n, d)) * rng.uniform(0.5, 2)
            y = rng.normal(size=(m, d)) + rng.normal(size=d)
            exact = 2 * float(np.sum((x.mean(axis=0) - y.mean(axis=0)) ** 2))
            worst = max(worst, abs(energy_distance_sq(x, y, method="pairwise") - exact))
        seconds = time.perf_counter() - start
        ok = 0.20 <= ratio <= 0.30 and worst <= 1e-9 and seconds <= 60
        report(4, "mixup energy ratio", ok,
               f"ratio={ratio:.4f} identity max|err|={worst:.2e} t={seconds:.1f}s")
        assert ok

    def test_5_label_count_trend(self, runs):
        keys = [(ab, s, n) for n in LABEL_COUNTS for ab in ("baseline", "full")
                for s in range(10)]
        for k in keys:
            runs.get(*k)
        mean = {(ab, n): float(np.mean([runs.runs[(ab, s, n)]["test_err"] for s in range(10)]))
                for n in LABEL_COUNTS for ab in ("baseline", "full")}
        base = [mean[("baseline", n)] for n in LABEL_COUNTS]
        violations = sum(b > a for a, b in zip(base, base[1:]))
        gain = {n: mean[("baseline", n)] - mean[("full", n)] for n in LABEL_COUNTS}
        seconds = runs.elapsed(keys)
        checks = {
            "baseline non-increasing (<=1 violation)": violations <= 1,
            "gain(4)>=gain(50)": gain[4] >= gain[50],
            "time<=900s": seconds <= 900,
        }
        ok = all(checks.values())
        report(5, "label-count trend", ok,
               "baseline=" + ",".join(f"{v:.3f}" for v in base)
               + " gain=" + ",".join(f"{gain[n]:+.3f}" for n in LABEL_COUNTS)
               + f" t={seconds:.0f}s")
        assert ok, checks

    def test_6_gradient_suite(self):
        start = time.perf_counter()
        spec = NetworkSpec(input_dim=2, feature_layers=(6, 5), discriminator_layers=(4, 3),
                           grl_scale=0.0, gamma=0.8)
        rng = np.random.default_rng(0)
        params = init_params(spec, make_rng(0))
        params = params.replace([a + 0.2 * rng.normal(size=a.shape) for a in params.arrays()])
        b = 8
        batch = cross_set_mixup(rng.normal(size=(b, 2)), one_hot(rng.integers(0, 2, b), 2),
                                rng.normal(size=(b, 2)), rng.dirichlet([1, 1], b),
                                rng.uniform(size=b))
        tape = Tape()
        analytic = backward(ada_objective(params, spec, batch, tape), tape, params.tensors())

        # A zero-scale reversal blocks the domain gradient into the feature
        # extractor, so the oracle freezes those weights inside the domain term.
        frozen = params.arrays()
        n_feat = 2 * len(params.feature)

        def objective(arrays):
            live = params.replace(arrays)
            held = params.replace(frozen[:n_feat] + list(arrays[n_feat:]))
            cls = soft_cross_entropy(forward_class(live, spec, batch.inputs),
                                     batch.class_targets, batch.lambdas).item()
            dom = soft_cross_entropy(forward_domain(held, spec, batch.inputs),
                                     batch.domain_targets).item()
            return cls + spec.gamma * dom

        numeric = finite_diff_gradient(objective, params.arrays(), 1e-5)
        worst, checked = 0.0, 0
        for a, n in zip(analytic, numeric):
            mask = np.abs(a) > 1e-6
            checked += int(mask.sum())
            if mask.any():
                worst = max(worst, float(np.max(np.abs(a[mask] - n[mask]) / np.abs(a[mask]))))

        # reversal layer: forward bit-exact, backward exactly -scale x upstream
        feats = Tensor(rng.normal(size=(b, 5)), requires_grad=True)
        w, bias = params.discriminator[0]
        targets = batch.domain_targets
        forward_exact = True
        backward_exact = True
        for scale in (0.6, 1.0, 2.5):
            grads = {}
            for use_grl in (True, False):
                t = Tape()
                z = grad_reverse(feats, scale, t) if use_grl else feats
                forward_exact &= z.values.tobytes() == feats.values.tobytes()
                logits = dense(relu(dense(z, w, bias, t), t), *params.discriminator[1], t)
                logits = dense(relu(logits, t), *params.discriminator[2], t)
                grads[use_grl] = backward(soft_cross_entropy(logits, targets, None, t), t,
                                          [feats])[0]
            backward_exact &= grads[True].tobytes() == (-scale * grads[False]).tobytes()
        seconds = time.perf_counter() - start
        ok = worst <= 1e-4 and checked > 0 and forward_exact and backward_exact \
            and seconds <= 30
        report(6, "gradient suite", ok,
               f"max rel err={worst:.2e} over {checked} coords; grl forward bit-exact="
               f"{forward_exact}; grl backward bit-exact={backward_exact} t={seconds:.1f}s")
        assert ok

    def test_7_cli_determinism(self, tmp_path):
        start = time.perf_counter()
        train_dir = tmp_path / "train"
        commands = [
            ["train", "--preset", "twomoon-ada", "--seed", "7", "--out", str(train_dir)],
            ["train", "--preset", "twomoon-baseline", "--seed", "7", "--format", "json",
             "--out", str(tmp_path / "train_json")],
            ["mmd-curve", "--seed", "7", "--trials", "20", "--out", str(tmp_path / "curve")],
            ["prop-check", "--seed", "7", "--trials", "100", "--out", str(tmp_path / "prop")],
            ["kde", "--seed", "7", "--checkpoint", str(train_dir / "params.ckpt"),
             "--out", str(tmp_path / "kde")],
        ]
        identical = {}
        for argv in commands:
            out = Path(argv[-1])
            assert cli.main(argv) == 0, argv
            first = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
            assert cli.main(argv) == 0, argv
            second = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
            identical[argv[0] + ":" + out.name] = first == second and bool(first)
        seconds = time.perf_counter() - start
        ok = all(identical.values()) and seconds <= 60
        report(7, "CLI determinism", ok,
               " ".join(f"{k}={'same' if v else 'DIFF'}" for k, v in identical.items())
               + f" t={seconds:.0f}s")
        assert ok

    def test_8_feature_alignment(self, runs):
        keys = [(ab, s, 6) for ab in ("baseline", "full") for s in SEEDS]
        for k in keys:
            runs.get(*k)
        lower = sum(runs.runs[("full", s, 6)]["mmd"] < runs.runs[("baseline", s, 6)]["mmd"]
                    for s in SEEDS)
        seconds = runs.elapsed(keys)
        ok = lower >= 16 and seconds <= 600
        report(8, "feature alignment", ok,
               f"full-ADA feature MMD below baseline in {lower}/20 seeds t={seconds:.0f}s")
        assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
