import json
from xml.etree import ElementTree

import pytest

from src.main import main
from src.models import RunConfig
from src.services.report_service import file_sha256, read_table, strip_provenance
from src.utils.cohort import load_cohort, load_scores, mask_cohort
from src.utils.correction import cfwer_threshold
from src.utils.nullengine import CollectSpec, default_k, generate_permutations, run_permutation_pass

SMOKE_CONFIG = {
    "n_perms": 50,
    "seed": 31,
    "workers": 1,
    "quiet": True,
    "v_list": [1, 10],
    "p_threshold_list": [0.05, 0.01],
    "t_clamp": 100.0,
    "synthetic": {
        "dims": [8, 8, 8],
        "n_subjects": 12,
        "lesion_log_mu": 3.0,
        "lesion_log_sigma": 0.3,
        "gradient_decay": 2.0,
        "envelope": "grid",
        "rois": {"anterior": {"corner": [3, 3, 3], "size": [2, 2, 2]}},
        "primary_roi": "anterior",
        "seed": 5,
    },
}
RUN_TABLES = ("corrections.csv", "null_summary.csv", "comparison.csv")


@pytest.fixture
def smoke_config(tmp_path):
    path = tmp_path / "smoke.json"
    path.write_text(json.dumps(SMOKE_CONFIG), encoding="utf-8")
    return path


@pytest.fixture
def dataset(tmp_path, smoke_config):
    out = tmp_path / "dataset"
    assert main(["simulate", "--config", str(smoke_config), "--out", str(out)]) == 0
    return out


def _run(smoke_config, dataset, out, *extra):
    return main([
        "run", "--config", str(smoke_config), "--manifest", str(dataset / "manifest.json"),
        "--scores", str(dataset / "scores_anterior.csv"), "--out", str(out), *extra,
    ])


class TestConfig:
    def test_dump_then_load_round_trips(self, tmp_path, smoke_config):
        first = tmp_path / "first.json"
        second = tmp_path / "second.json"
        assert main(["run", "--config", str(smoke_config), "--alpha", "0.01", "--v", "1", "5",
                     "--dump-config", str(first)]) == 0
        assert main(["run", "--config", str(first), "--dump-config", str(second)]) == 0
        assert first.read_text(encoding="utf-8") == second.read_text(encoding="utf-8")
        config = RunConfig.model_validate_json(first.read_text(encoding="utf-8"))
        assert config.alpha == 0.01
        assert config.v_list == [1, 5]
        assert config.n_perms == 50

    def test_flags_override_config_file(self, tmp_path, smoke_config):
        dumped = tmp_path / "dumped.json"
        assert main(["evaluate", "--config", str(smoke_config), "--subjects", "20",
                     "--dump-config", str(dumped)]) == 0
        config = RunConfig.model_validate_json(dumped.read_text(encoding="utf-8"))
        assert config.synthetic.n_subjects == 20
        assert config.synthetic.dims == (8, 8, 8)

    def test_unknown_experiment(self):
        with pytest.raises(SystemExit) as info:
            main(["evaluate", "--experiment", "bogus"])
        assert info.value.code == 2

    def test_invalid_setting_exits_2(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", "--alpha", "1.5", "--out", str(out)]) == 2
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["exit_code"] == 2

    def test_no_command(self):
        assert main([]) == 2


class TestSimulate:
    def test_dataset_layout(self, dataset):
        manifest = json.loads((dataset / "manifest.json").read_text(encoding="utf-8"))
        assert len(manifest) == 12
        assert all(not entry["lesion_path"].startswith("/") for entry in manifest)
        assert load_cohort(dataset / "manifest.json").n_subjects == 12
        assert (dataset / "overlap.nii.gz").exists()

    def test_deterministic_checksums(self, tmp_path, smoke_config, dataset):
        again = tmp_path / "again"
        assert main(["simulate", "--config", str(smoke_config), "--out", str(again)]) == 0
        first = {p.relative_to(dataset): file_sha256(p) for p in dataset.rglob("*") if p.is_file()}
        second = {p.relative_to(again): file_sha256(p) for p in again.rglob("*") if p.is_file()}
        assert first == second


class TestRun:
    def test_end_to_end(self, tmp_path, smoke_config, dataset):
        out = tmp_path / "run"
        assert _run(smoke_config, dataset, out) == 0
        for name in RUN_TABLES + ("tmap.nii.gz", "mask.nii.gz", "manifest.json", "summary.md"):
            assert (out / name).exists()
        frame, provenance = read_table(out / "corrections.csv")
        assert set(frame["method"]) == {"cluster-all", "cluster-max", "cfwer", "fdr"}
        assert provenance["config"]["n_perms"] == 50
        assert provenance["null_hash"]
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        listed = {entry["path"] for entry in manifest["files"]}
        assert "corrections.csv" in listed and "tmap.nii.gz" in listed

    def test_maps_and_figures_carry_provenance(self, tmp_path, smoke_config, dataset):
        out = tmp_path / "run"
        assert _run(smoke_config, dataset, out) == 0
        _, table_provenance = read_table(out / "corrections.csv")
        maps = sorted(out.glob("*.nii.gz"))
        assert {"tmap.nii.gz", "mask.nii.gz"} <= {path.name for path in maps}
        for path in maps:
            sidecar = out / path.name.replace(".nii.gz", ".json")
            assert json.loads(sidecar.read_text(encoding="utf-8")) == table_provenance

        root = ElementTree.parse(out / "comparison.svg").getroot()
        descriptions = [element.text for element in root.iter() if element.tag.endswith("description")]
        assert len(descriptions) == 1
        provenance = json.loads(descriptions[0])
        assert provenance["seed"] == 31
        assert provenance["config"]["n_perms"] == 50

        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert "tmap.json" in {entry["path"] for entry in manifest["files"]}

    def test_cfwer_matches_module_calls(self, tmp_path, smoke_config, dataset):
        out = tmp_path / "run"
        assert _run(smoke_config, dataset, out, "--correction", "cfwer", "--v", "1") == 0
        frame, _ = read_table(out / "corrections.csv")

        cohort = load_cohort(dataset / "manifest.json")
        scores = load_scores(dataset / "scores_anterior.csv", cohort.subject_ids)
        masked = mask_cohort(cohort)
        plan = generate_permutations(masked.n_subjects, 50, 31)
        collect = CollectSpec(k=default_k([1], masked.n_voxels), p_thresholds=(0.05, 0.01))
        null = run_permutation_pass(masked, scores, plan, collect, t_clamp=100.0, show_progress=False)
        expected = cfwer_threshold(null, 1, 0.05)
        assert frame["critical_value"].tolist() == [pytest.approx(expected, rel=1e-9)]

    def test_repeat_and_worker_count_give_identical_tables(self, tmp_path, smoke_config, dataset):
        first, second, parallel = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert _run(smoke_config, dataset, first) == 0
        assert _run(smoke_config, dataset, second) == 0
        assert _run(smoke_config, dataset, parallel, "--workers", "2") == 0
        for name in RUN_TABLES:
            assert strip_provenance(first / name) == strip_provenance(second / name)
            assert strip_provenance(first / name) == strip_provenance(parallel / name)

    def test_null_cache_reused(self, tmp_path, smoke_config, dataset):
        cache = tmp_path / "null.bin"
        first, second = tmp_path / "a", tmp_path / "b"
        assert _run(smoke_config, dataset, first, "--null-cache", str(cache)) == 0
        stamp = cache.read_bytes()
        assert _run(smoke_config, dataset, second, "--null-cache", str(cache)) == 0
        assert cache.read_bytes() == stamp
        assert strip_provenance(first / "corrections.csv") == strip_provenance(second / "corrections.csv")

    def test_bad_scores_csv(self, tmp_path, smoke_config, dataset, capsys):
        scores = tmp_path / "bad.csv"
        scores.write_text("id,value\nsub-001,1\n", encoding="utf-8")
        out = tmp_path / "run"
        code = main(["run", "--config", str(smoke_config), "--manifest", str(dataset / "manifest.json"),
                     "--scores", str(scores), "--out", str(out)])
        assert code == 2
        error = json.loads((out / "error.json").read_text(encoding="utf-8"))
        assert error["path"] == str(scores)
        assert str(scores) in capsys.readouterr().err

    def test_reference_rows_flagged(self, tmp_path, smoke_config, dataset):
        out = tmp_path / "run"
        assert _run(smoke_config, dataset, out, "--correction", "cfwer", "--reference-rows") == 0
        frame, _ = read_table(out / "comparison.csv")
        assert frame["reference"].sum() == 3


class TestEvaluate:
    def test_cluster_fpr_report(self, tmp_path, smoke_config):
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", str(smoke_config), "--experiment", "cluster-fpr",
                     "--p-thresholds", "0.05", "0.01", "0.005", "0.001", "0.0005", "0.0001",
                     "--out", str(out)]) == 0
        frame, provenance = read_table(out / "cluster_fpr.csv")
        assert set(frame["variant"]) == {"all", "max"}
        assert len(set(frame["p_threshold"])) == 6
        assert provenance["config"]["experiment"] == "cluster-fpr"
        assert (out / "cluster_thresholds.svg").exists()

    def test_worker_count_does_not_change_tables(self, tmp_path, smoke_config):
        args = ["evaluate", "--config", str(smoke_config), "--experiment", "method-comparison",
                "--fractions", "1.0", "0.5", "--repeats", "2"]
        one, two = tmp_path / "one", tmp_path / "two"
        assert main(args + ["--workers", "1", "--out", str(one)]) == 0
        assert main(args + ["--workers", "2", "--out", str(two)]) == 0
        for path in sorted(one.glob("*.csv")):
            assert strip_provenance(path) == strip_provenance(two / path.name)

    def test_report_rerenders(self, tmp_path, smoke_config):
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", str(smoke_config), "--experiment", "spillover",
                     "--out", str(out)]) == 0
        (out / "summary.md").unlink()
        assert main(["report", "--out", str(out), "--quiet"]) == 0
        assert (out / "summary.md").exists()

    def test_report_without_tables(self, tmp_path):
        assert main(["report", "--out", str(tmp_path / "empty")]) == 2
