import csv
import statistics
from pathlib import Path

import pytest

from lensrobust.errors import ConfigError
from lensrobust.harness import cmd_evaluate, cmd_report, cmd_sweep_k, cmd_sweep_w, cmd_train
from lensrobust.harness.cli import main
from lensrobust.harness.config import PRESETS, ExperimentConfig, config_from_text, load_preset
from lensrobust.harness.report import render_report
from lensrobust.harness.runner import metric_combos, sample_indices, resolve_dataset
from lensrobust.metrics import SIMILARITY_METRICS, read_records

SMALL = """
sample_count = 5
epochs = 15
pgd_steps = 3
pgd_step_size = 0.05
steps = 3
restarts = 2
ig_steps = 4
attacks = random_sign, top_k
epsilons = 0.0, 0.3
metrics = topk, lens_prec, lens_recall, topk_div, lens_prec_div, spearman, lens_kendall, lens_distance
k_values = 5, 64
w_values = 0, 1, 2, 3
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_bytes(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = config_from_text(SMALL + f"out = {out}\n")
    cmd_train(cfg)
    cmd_evaluate(cfg)
    return out, cfg


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.sample_count == 200 and cfg.regimes == ("natural", "pgd")
        assert cfg.checkpoint("pgd") == Path("runs/default/checkpoints/pgd.toynet")

    @pytest.mark.parametrize(
        "text",
        [
            "epsilon = 0.3",
            "seed = 1\nseed = 2",
            "seed = one",
            "attacks = top_k, fgsm",
            "metrics =",
            "k_values = 1,,2",
            "top_k.colour = red",
            "nosuch.steps = 3",
            "just words",
            "regimes = natural, natural",
            "steps = -1",
            "pgd_step_size = 0.5",
        ],
    )
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            config_from_text(text)

    def test_comments_and_lists(self):
        cfg = config_from_text("# header\nk_values = 5, 10  # two\nw_div = 2\nhidden = 8\n")
        assert cfg.k_values == (5, 10) and cfg.w_div == 2 and cfg.hidden == (8,)
        assert config_from_text("w_div = w").w_div is None

    def test_per_variant_override(self):
        cfg = config_from_text("attacks = top_k, mass_center\nsteps = 7\ntop_k.steps = 3\ntop_k.t = 5")
        assert cfg.attack_config("top_k", 0.3, 0).steps == 3
        assert cfg.attack_config("top_k", 0.3, 0).t == 5
        assert cfg.attack_config("mass_center", 0.3, 0).steps == 7

    def test_step_capped_at_epsilon(self):
        cfg = config_from_text("epsilons = 0.005, 0.3\nstep_size = 0.01")
        assert cfg.attack_config("top_k", 0.005, 0).step_size == 0.005
        assert cfg.attack_config("top_k", 0.3, 0).step_size == 0.01

    @pytest.mark.parametrize("name", PRESETS)
    def test_presets_load(self, name):
        cfg = load_preset(name)
        assert cfg.out.endswith(name)

    def test_sample_count_bounded_by_dataset(self):
        cfg = config_from_text("sample_count = 501")
        with pytest.raises(ConfigError):
            sample_indices(cfg, resolve_dataset(cfg))

    def test_sampling_is_seeded_and_sorted(self):
        cfg = config_from_text("sample_count = 20")
        m = resolve_dataset(cfg)
        a, b = sample_indices(cfg, m), sample_indices(cfg, m)
        assert a == b and len(set(a)) == 20
        ids = [m.image_id(i) for i in a]
        assert ids == sorted(ids)
        assert sample_indices(cfg.replace(seed=1), m) != a


class TestCombos:
    def test_free_axes_collapse(self):
        cfg = ExperimentConfig()
        combos = metric_combos(cfg, ["topk", "lens_prec", "spearman", "lens_kendall"], [5, 10], [0, 1], 64)
        assert combos == [
            ("topk", 5, 0), ("topk", 10, 0),
            ("lens_prec", 5, 0), ("lens_prec", 5, 1), ("lens_prec", 10, 0), ("lens_prec", 10, 1),
            ("spearman", 64, 0),
            ("lens_kendall", 64, 0), ("lens_kendall", 64, 1),
        ]

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            metric_combos(ExperimentConfig(), ["topk"], [65], [0], 64)


class TestEvaluate:
    def test_training_log(self, run_dir):
        out, cfg = run_dir
        for regime in ("natural", "pgd"):
            rows = read_rows(out / f"train_{regime}.csv")
            assert [int(r["epoch"]) for r in rows] == list(range(1, cfg.epochs + 1))
            assert (out / "checkpoints" / f"{regime}.toynet").exists()

    def test_retrain_is_bit_identical(self, run_dir, tmp_path):
        out, cfg = run_dir
        cmd_train(cfg.replace(out=str(tmp_path), regimes=("natural",)))
        assert (tmp_path / "checkpoints/natural.toynet").read_bytes() == (out / "checkpoints/natural.toynet").read_bytes()

    def test_row_count(self, run_dir):
        out, cfg = run_dir
        combos = metric_combos(cfg, cfg.metrics, cfg.k_values, cfg.w_values, 64)
        for regime in cfg.regimes:
            recs = read_records(out / f"records_{regime}.csv")
            assert len(recs) == cfg.sample_count * len(cfg.attacks) * len(cfg.epsilons) * len(combos)
            errors = read_rows(out / f"errors_{regime}.csv")
            assert sum(r.value is None for r in recs) == len(errors)

    def test_zero_budget_is_perfect_similarity(self, run_dir):
        out, _ = run_dir
        recs = read_records(out / "records_natural.csv")
        zero = [r for r in recs if r.epsilon == 0.0 and r.value is not None]
        assert zero
        for r in zero:
            if r.metric in SIMILARITY_METRICS:
                assert r.value == 1.0
            elif r.metric == "lens_distance":
                assert r.value == 0.0

    def test_sandwich_per_image(self, run_dir):
        out, _ = run_dir
        for regime in ("natural", "pgd"):
            recs = read_records(out / f"records_{regime}.csv")
            top = {(r.image_id, r.attack_id, r.k, r.epsilon): r.value for r in recs if r.metric == "topk"}
            for r in recs:
                if r.metric == "lens_prec" and r.value is not None:
                    assert r.value >= top[r.image_id, r.attack_id, r.k, r.epsilon]

    def test_aggregates_recompute(self, run_dir):
        out, _ = run_dir
        agg = {
            (r["training_regime"], r["attack_id"], r["metric"], r["k"], r["w"], float(r["epsilon"])): r
            for r in read_rows(out / "aggregate.csv")
        }
        groups = {}
        for regime in ("natural", "pgd"):
            for r in read_rows(out / f"records_{regime}.csv"):
                if r["value"] != "":
                    key = (regime, r["attack_id"], r["metric"], r["k"], r["w"], float(r["epsilon"]))
                    groups.setdefault(key, []).append(float(r["value"]))
        assert set(groups) == set(agg)
        for key, values in groups.items():
            row = agg[key]
            assert int(row["n"]) == len(values)
            assert abs(float(row["mean"]) - statistics.fmean(values)) <= 1e-12
            assert abs(float(row["std"]) - statistics.pstdev(values)) <= 1e-12

    def test_aggregate_lens_dominates_topk(self, run_dir):
        out, _ = run_dir
        rows = read_rows(out / "aggregate.csv")
        top = {(r["training_regime"], r["attack_id"], r["k"], r["epsilon"]): r for r in rows if r["metric"] == "topk"}
        lens = [r for r in rows if r["metric"] == "lens_prec"]
        assert lens
        for r in lens:
            t = top[r["training_regime"], r["attack_id"], r["k"], r["epsilon"]]
            # both metrics fail only on prediction flips, so they average the same images
            assert r["n"] == t["n"]
            assert float(r["mean"]) >= float(t["mean"])

    def test_evaluate_is_deterministic(self, run_dir, tmp_path):
        out, cfg = run_dir
        second = tmp_path / "again"
        cmd_evaluate(cfg.replace(out=str(second), natural_checkpoint=str(out / "checkpoints/natural.toynet"),
                                 pgd_checkpoint=str(out / "checkpoints/pgd.toynet")))
        first = {k: v for k, v in tree_bytes(out).items() if not k.startswith("train_") and not k.startswith("sweep")}
        assert tree_bytes(second) == first


@pytest.fixture(scope="module")
def sweeps(run_dir):
    _, cfg = run_dir
    cfg = cfg.replace(metrics=("topk", "lens_prec", "lens_recall"), k_values=(1, 5, 10, 32, 64))
    return read_rows(cmd_sweep_w(cfg)), read_rows(cmd_sweep_k(cfg)), cfg


class TestSweeps:
    def test_w_grid_rows(self, sweeps):
        rows_w, _, cfg = sweeps
        for metric in cfg.metrics:
            for attack in cfg.attacks:
                sel = [r for r in rows_w if r["metric"] == metric and r["attack"] == attack]
                assert [int(r["w"]) for r in sel] == [0, 1, 2, 3]

    def test_w_zero_equals_topk_and_monotone(self, sweeps):
        rows_w, _, cfg = sweeps
        for attack in cfg.attacks:
            mean = {(r["metric"], int(r["w"])): float(r["mean"]) for r in rows_w if r["attack"] == attack}
            assert mean["lens_prec", 0] == mean["topk", 0] == mean["lens_recall", 0]
            for metric in ("lens_prec", "lens_recall"):
                series = [mean[metric, w] for w in range(4)]
                assert series == sorted(series)

    def test_k_grid(self, sweeps):
        _, rows_k, cfg = sweeps
        for metric in cfg.metrics:
            sel = [r for r in rows_k if r["metric"] == metric and r["attack"] == "top_k"]
            assert [int(r["k"]) for r in sel] == [1, 5, 10, 32, 64]
        full = [r for r in rows_k if r["k"] == "64" and r["metric"] in SIMILARITY_METRICS]
        assert full and all(float(r["mean"]) == 1.0 for r in full)
        assert all(float(r["mean"]) >= 0.0 for r in rows_k if r["metric"] == "disparity")


class TestReport:
    def test_columns_and_determinism(self, run_dir):
        out, _ = run_dir
        text = cmd_report(out)
        header = next(line for line in text.splitlines() if line.lstrip().startswith("k "))
        labels = ["top-k", "w-LENS-recall@k", "w-LENS-prec@k", "top-k-div", "w-LENS-prec@k-div"]
        positions = [header.index(f" {label} ") if f" {label} " in header else header.index(f" {label}") for label in labels]
        assert positions == sorted(positions)
        assert render_report(out) == text == (out / "report.txt").read_text()

    def test_empty_aggregate(self, tmp_path):
        (tmp_path / "aggregate.csv").write_text("attack_id,metric,k,w,epsilon,training_regime,mean,std,n\n")
        assert main(["report", str(tmp_path)]) == 0
        assert "no data" in (tmp_path / "report.txt").read_text()


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["evaluate", "--config", str(tmp_path / "nope.cfg")]) == 2

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("colour = red\n")
        assert main(["train", "--config", str(p)]) == 2

    def test_missing_checkpoint(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(f"out = {tmp_path}\nsample_count = 2\n")
        assert main(["evaluate", "--config", str(p)]) == 3

    def test_missing_dataset(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(f"dataset = {tmp_path}/none.csv\n")
        assert main(["train", "--config", str(p)]) == 3

    def test_report_without_aggregate(self, tmp_path):
        assert main(["report", "--out", str(tmp_path)]) == 3

    def test_overrides(self, tmp_path, run_dir):
        out, _ = run_dir
        p = tmp_path / "c.cfg"
        p.write_text(SMALL + f"natural_checkpoint = {out}/checkpoints/natural.toynet\nregimes = natural\n")
        target = tmp_path / "o"
        assert main(["evaluate", "--config", str(p), "--out", str(target), "--samples", "2", "--seed", "4"]) == 0
        recs = read_records(target / "records_natural.csv")
        assert len({r.image_id for r in recs}) == 2
