import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from bettercheck.cli import main
from bettercheck.stores import file_sha256, read_jsonl

from conftest import N_IMAGES, N_PLANTED, planted_sentence


@pytest.fixture
def runner():
    return CliRunner()


def run_pipeline(runner, fixture, run_name="r1", threshold="0.5", cache=None, runs_parent="runs"):
    tmp = fixture["tmp"]
    corpus_file = tmp / "corpus.jsonl"
    run_dir = tmp / runs_parent / run_name
    steps = [
        ["ingest", "--images", str(fixture["image_dir"]), "--labels", str(fixture["labels"]),
         "--stride", "10", "--per-scenario", "25", "--out", str(corpus_file),
         "--created-at", "2026-01-01T00:00:00Z"],
        ["caption", "--corpus", str(corpus_file), "--model", "mock-model", "--repeats", "3",
         "--backend", "mock", "--mock-script", str(fixture["script"]), "--mock-default", "Yes",
         "--run", str(run_dir)] + (["--cache", str(cache)] if cache else []),
        ["check", "--run", str(run_dir), "--checker-model", "mock-model",
         "--backend", "mock", "--mock-script", str(fixture["script"]), "--mock-default", "Yes"]
        + (["--cache", str(cache)] if cache else []),
        ["filter", "--run", str(run_dir), "--threshold", threshold],
        ["evaluate", "--run", str(run_dir)],
        ["report", "--run", str(run_dir)],
    ]
    for step in steps:
        result = runner.invoke(main, step)
        assert result.exit_code == 0, f"{step[0]} failed: {result.output}"
    return run_dir


class TestPipeline:
    def test_full_pipeline_produces_report(self, runner, fixture_corpus):
        run_dir = run_pipeline(runner, fixture_corpus)
        assert (run_dir / "captions.jsonl").exists()
        assert (run_dir / "checks.jsonl").exists()
        assert (run_dir / "filtered.jsonl").exists()
        report = json.loads((run_dir / "report.json").read_text())
        assert report["model"] == "mock-model"
        assert report["unparseable_rate"] == 0.0
        assert (run_dir / "figures" / "confusion_per_class.png").exists()
        assert (run_dir / "figures" / "metrics_per_class.png").exists()

    def test_planted_sentences_excluded_end_to_end(self, runner, fixture_corpus):
        run_dir = run_pipeline(runner, fixture_corpus)
        excluded = []
        sentences = {}
        for _, rec in read_jsonl(run_dir / "captions.jsonl"):
            for s in rec["sentences"]:
                sentences[s["sentence_id"]] = s["text"]
        for _, row in read_jsonl(run_dir / "filtered.jsonl"):
            excluded += [sentences[e["sentence_id"]] for e in row["excluded"]]
        assert sorted(excluded) == sorted(planted_sentence(i) for i in range(N_PLANTED))

    def test_check_count_recorded_in_manifest(self, runner, fixture_corpus):
        run_dir = run_pipeline(runner, fixture_corpus)
        manifest = json.loads((run_dir / "run.json").read_text())
        n_sentences = sum(
            len(rec["sentences"]) for _, rec in read_jsonl(run_dir / "captions.jsonl")
        )
        assert manifest["check_calls"] == n_sentences * 2

    def test_stage_order_enforced(self, runner, fixture_corpus):
        tmp = fixture_corpus["tmp"]
        corpus_file = tmp / "corpus.jsonl"
        run_dir = tmp / "runs" / "r-order"
        runner.invoke(main, ["ingest", "--images", str(fixture_corpus["image_dir"]),
                             "--labels", str(fixture_corpus["labels"]),
                             "--out", str(corpus_file)])
        runner.invoke(main, ["caption", "--corpus", str(corpus_file), "--model", "m",
                             "--backend", "mock", "--mock-script", str(fixture_corpus["script"]),
                             "--mock-default", "Yes", "--run", str(run_dir)])
        result = runner.invoke(main, ["evaluate", "--run", str(run_dir)])
        assert result.exit_code == 4
        assert "bettercheck filter" in result.output

    def test_rerun_requires_force(self, runner, fixture_corpus):
        run_dir = run_pipeline(runner, fixture_corpus)
        corpus_file = fixture_corpus["tmp"] / "corpus.jsonl"
        args = ["caption", "--corpus", str(corpus_file), "--model", "mock-model",
                "--backend", "mock", "--mock-script", str(fixture_corpus["script"]),
                "--mock-default", "Yes", "--run", str(run_dir)]
        blocked = runner.invoke(main, args)
        assert blocked.exit_code == 4
        forced = runner.invoke(main, args + ["--force"])
        assert forced.exit_code == 0

    def test_usage_error_exit_code(self, runner):
        result = runner.invoke(main, ["caption", "--model", "m"])
        assert result.exit_code == 2

    def test_determinism_across_runs(self, runner, fixture_corpus):
        cache = fixture_corpus["tmp"] / "cache"
        r1 = run_pipeline(runner, fixture_corpus, run_name="d", cache=cache, runs_parent="runs1")
        r2 = run_pipeline(runner, fixture_corpus, run_name="d", cache=cache, runs_parent="runs2")
        for name in ("captions.jsonl", "checks.jsonl", "filtered.jsonl", "report.json"):
            assert file_sha256(r1 / name) == file_sha256(r2 / name), name

    def test_threshold_zero_retains_everything(self, runner, fixture_corpus):
        run_dir = run_pipeline(runner, fixture_corpus, run_name="t0", threshold="0.0")
        for _, row in read_jsonl(run_dir / "filtered.jsonl"):
            assert row["excluded"] == []


class TestServePlanning:
    def test_plan_only_writes_plan(self, runner, fixture_corpus):
        run_dir = run_pipeline(runner, fixture_corpus, run_name="plan")
        result = runner.invoke(main, ["serve", "--run", str(run_dir), "--annotators", "a,b",
                                      "--overlap", "0.15", "--seed", "42", "--plan-only"])
        assert result.exit_code == 0, result.output
        plan = json.loads((run_dir / "plan.json").read_text())
        assert plan["annotators"] == ["a", "b"]
        assert plan["tasks"]

    def test_same_seed_identical_plan_file(self, runner, fixture_corpus):
        run_dir = run_pipeline(runner, fixture_corpus, run_name="plan2")
        args = ["serve", "--run", str(run_dir), "--annotators", "a,b", "--seed", "9",
                "--plan-only", "--force"]
        runner.invoke(main, args)
        first = (run_dir / "plan.json").read_bytes()
        runner.invoke(main, args)
        assert (run_dir / "plan.json").read_bytes() == first


class TestReportContent:
    def test_summary_table_printed(self, runner, fixture_corpus):
        tmp = fixture_corpus["tmp"]
        run_dir = run_pipeline(runner, fixture_corpus, run_name="tbl")
        result = runner.invoke(main, ["report", "--run", str(run_dir)])
        assert result.exit_code == 0
        assert "vehicle" in result.output
        assert "selfcheck:" in result.output

    def test_per_class_confusion_totals(self, runner, fixture_corpus):
        run_dir = run_pipeline(runner, fixture_corpus)
        report = json.loads((run_dir / "report.json").read_text())
        for cls, data in report["per_class"].items():
            c = data["confusion"]
            assert c["tp"] + c["fp"] + c["fn"] + c["tn"] == N_IMAGES

    def test_word_frequency_excludes_agents_and_stopwords(self, runner, fixture_corpus):
        run_dir = run_pipeline(runner, fixture_corpus)
        report = json.loads((run_dir / "report.json").read_text())
        words = {w for w, _ in report["word_frequency"]}
        assert "cars" not in words and "people" not in words
        assert "there" not in words and "are" not in words
        assert "trees" in words
