"""Command-line orchestration of the pipeline: ingest, caption, check, filter, evaluate, report, serve."""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import annotation, captioner, corpus, gateway, report as report_mod, selfcheck, taxonomy
from .stores import StoreError, text_digest, write_jsonl

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_DATA = 4

STAGE_ORDER = ["caption", "check", "filter", "evaluate", "report"]
STAGE_COMMAND = {
    "caption": "bettercheck caption",
    "check": "bettercheck check",
    "filter": "bettercheck filter",
    "evaluate": "bettercheck evaluate",
    "report": "bettercheck report",
}


class StageOrderError(Exception):
    pass


def _run_manifest_path(run_dir: Path) -> Path:
    return run_dir / "run.json"


def load_run_manifest(run_dir: Path) -> dict:
    path = _run_manifest_path(run_dir)
    if not path.exists():
        raise StageOrderError(f"no run manifest in {run_dir}; run `{STAGE_COMMAND['caption']}` first")
    return json.loads(path.read_text(encoding="utf-8"))


def save_run_manifest(run_dir: Path, manifest: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    _run_manifest_path(run_dir).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def require_stage(manifest: dict, stage: str) -> None:
    if not manifest.get("stages", {}).get(stage):
        raise StageOrderError(f"stage {stage!r} has not run yet; run `{STAGE_COMMAND[stage]}` first")


def guard_rerun(manifest: dict, stage: str, force: bool) -> None:
    if manifest.get("stages", {}).get(stage) and not force:
        raise StageOrderError(f"stage {stage!r} already completed; pass --force to re-run")


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except gateway.BackendUnavailable as exc:
            click.echo(f"backend error: {exc}", err=True)
            sys.exit(EXIT_BACKEND)
        except (
            StageOrderError,
            StoreError,
            corpus.CorpusError,
            taxonomy.TaxonomyError,
            selfcheck.SelfCheckError,
            annotation.AnnotationError,
            captioner.CaptioningError,
            gateway.CacheMiss,
            gateway.MockKeyMissing,
            gateway.ProtocolError,
        ) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)

    return wrapper


def build_gateway(backend_kind, backend_url, mock_script, mock_default, cache_dir, cache_mode, timeout, retries):
    cache = gateway.ResponseCache(cache_dir, mode=cache_mode) if cache_dir else None
    if backend_kind == "mock":
        if not mock_script:
            raise click.UsageError("--mock-script is required with --backend mock")
        backend = gateway.MockBackend.from_file(mock_script, default=mock_default)
    else:
        url = gateway.backend_url_from_env(backend_url)
        if not url:
            if cache is not None and cache_mode == "replay":
                backend = _ReplayOnlyBackend()
            else:
                raise click.UsageError(
                    "no backend URL: pass --backend-url or set BETTERCHECK_BACKEND_URL"
                )
        elif backend_kind == "openai":
            backend = gateway.ChatCompletionsBackend(url, timeout=timeout)
        else:
            backend = gateway.OllamaBackend(url, timeout=timeout)
    return gateway.Gateway(backend, cache=cache, retries=retries)


class _ReplayOnlyBackend:
    source = "live"

    def generate(self, req):
        raise gateway.CacheMiss("replay-only run hit an uncached request")


def backend_options(fn):
    fn = click.option("--backend", "backend_kind", type=click.Choice(["ollama", "openai", "mock"]), default="ollama", show_default=True)(fn)
    fn = click.option("--backend-url", default=None, help="Model server URL; env BETTERCHECK_BACKEND_URL also works.")(fn)
    fn = click.option("--mock-script", type=click.Path(exists=True, dir_okay=False), default=None)(fn)
    fn = click.option("--mock-default", default=None, help="Lenient mock fallback response.")(fn)
    fn = click.option("--cache", "cache_dir", type=click.Path(file_okay=False), default=None)(fn)
    fn = click.option("--cache-mode", type=click.Choice(["record", "replay", "off"]), default="record", show_default=True)(fn)
    fn = click.option("--timeout", type=float, default=gateway.DEFAULT_TIMEOUT_S, show_default=True)(fn)
    fn = click.option("--retries", type=int, default=gateway.DEFAULT_RETRIES, show_default=True)(fn)
    return fn


@click.group()
def main():
    """Hallucination guardrail pipeline for VLM captions of driving imagery."""


@main.command("ingest")
@click.option("--images", "image_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--labels", "labels_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--stride", type=int, default=10, show_default=True)
@click.option("--per-scenario", "per_scenario_cap", type=int, default=25, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--created-at", default=None, help="Override the manifest timestamp (for reproducible files).")
@handle_errors
def cmd_ingest(image_dir, labels_file, stride, per_scenario_cap, out_path, created_at):
    """Build a corpus manifest by stride-sampling labeled frames."""
    manifest = corpus.ingest(image_dir, labels_file, stride, per_scenario_cap, created_at=created_at)
    corpus.save_manifest(manifest, out_path)
    click.echo(f"wrote {out_path}: {len(manifest.records)} images, corpus_id {manifest.corpus_id}")


@main.command("caption")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model", required=True)
@click.option("--repeats", type=int, default=captioner.DEFAULT_REPEATS, show_default=True)
@click.option("--max-sentence-len", type=int, default=captioner.DEFAULT_MAX_SENTENCE_LEN, show_default=True)
@click.option("--temperature", type=float, default=None)
@click.option("--images", "image_root", type=click.Path(exists=True, file_okay=False), default=None,
              help="Override the image root recorded in the corpus manifest.")
@click.option("--run", "run_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--force", is_flag=True)
@backend_options
@handle_errors
def cmd_caption(corpus_path, model, repeats, max_sentence_len, temperature, image_root, run_dir,
                seed, force, backend_kind, backend_url, mock_script, mock_default, cache_dir,
                cache_mode, timeout, retries):
    """Caption every corpus image `repeats` times and decompose into sentences."""
    if repeats < 2:
        raise click.UsageError("--repeats must be >= 2")
    run_dir = Path(run_dir)
    if _run_manifest_path(run_dir).exists():
        guard_rerun(load_run_manifest(run_dir), "caption", force)
    manifest = corpus.load_manifest(corpus_path)
    root = Path(image_root) if image_root else _resolve_image_root(manifest, corpus_path)
    gw = build_gateway(backend_kind, backend_url, mock_script, mock_default, cache_dir, cache_mode, timeout, retries)

    rows = []
    for record in manifest.records:
        for caption in captioner.caption_image(
            record, model, gw, root, repeats=repeats, temperature=temperature,
            max_sentence_len=max_sentence_len,
        ):
            rows.append(captioner.caption_to_record(caption))
    write_jsonl(run_dir / "captions.jsonl", rows)

    run_manifest = {
        "run_id": run_dir.name,
        "corpus": str(Path(corpus_path)),
        "corpus_id": manifest.corpus_id,
        "model": model,
        "repeats": repeats,
        "max_sentence_len": max_sentence_len,
        "temperature": temperature,
        "checker_model": None,
        "threshold": None,
        "reference_repeat": None,
        "backend": backend_kind,
        "seed": seed,
        "prompt_digests": {
            "caption": text_digest(captioner.CAPTION_PROMPT),
            "check": text_digest(selfcheck.check_prompt("{CONTEXT}", "{SENTENCE}")),
        },
        "stages": {s: False for s in STAGE_ORDER},
    }
    run_manifest["stages"]["caption"] = True
    save_run_manifest(run_dir, run_manifest)
    click.echo(f"captioned {len(manifest.records)} images x {repeats} repeats -> {run_dir/'captions.jsonl'}")


def _resolve_image_root(manifest: corpus.CorpusManifest, corpus_path) -> Path:
    if manifest.image_root is None:
        raise StoreError("corpus manifest has no image_root; pass --images", path=corpus_path)
    root = Path(manifest.image_root)
    if not root.is_absolute():
        root = Path(corpus_path).parent / root
    return root


@main.command("check")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--checker-model", required=True)
@click.option("--force", is_flag=True)
@backend_options
@handle_errors
def cmd_check(run_dir, checker_model, force, backend_kind, backend_url, mock_script, mock_default,
              cache_dir, cache_mode, timeout, retries):
    """Ask the checker model whether each sentence is supported by the other captions."""
    run_dir = Path(run_dir)
    manifest = load_run_manifest(run_dir)
    require_stage(manifest, "caption")
    guard_rerun(manifest, "check", force)
    gw = build_gateway(backend_kind, backend_url, mock_script, mock_default, cache_dir, cache_mode, timeout, retries)
    count = selfcheck.run_checks(run_dir, checker_model, gw)
    manifest["checker_model"] = checker_model
    manifest["check_calls"] = count
    manifest["stages"]["check"] = True
    save_run_manifest(run_dir, manifest)
    click.echo(f"recorded {count} check verdicts -> {run_dir/'checks.jsonl'}")


@main.command("filter")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--reference-repeat", type=int, default=selfcheck.DEFAULT_REFERENCE_REPEAT, show_default=True)
@click.option("--force", is_flag=True)
@handle_errors
def cmd_filter(run_dir, threshold, reference_repeat, force):
    """Drop sentences whose consistency score falls below the threshold."""
    run_dir = Path(run_dir)
    manifest = load_run_manifest(run_dir)
    require_stage(manifest, "check")
    guard_rerun(manifest, "filter", force)
    count = selfcheck.run_filter(run_dir, threshold=threshold, reference_repeat=reference_repeat)
    manifest["threshold"] = threshold
    manifest["reference_repeat"] = reference_repeat
    manifest["stages"]["filter"] = True
    save_run_manifest(run_dir, manifest)
    click.echo(f"filtered {count} captions -> {run_dir/'filtered.jsonl'}")


@main.command("evaluate")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--annotations", "annotations_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Annotation store; defaults to <run>/annotations.jsonl when present.")
@click.option("--force", is_flag=True)
@handle_errors
def cmd_evaluate(run_dir, lexicon_path, annotations_path, force):
    """Compute confusion matrices, metrics, correctness, and word frequencies."""
    run_dir = Path(run_dir)
    manifest = load_run_manifest(run_dir)
    require_stage(manifest, "filter")
    guard_rerun(manifest, "evaluate", force)
    corpus_manifest = corpus.load_manifest(manifest["corpus"])
    lexicon = taxonomy.load_lexicon(lexicon_path) if lexicon_path else taxonomy.default_lexicon()
    if annotations_path:
        # Evaluation reads <run>/annotations.jsonl; copy an external store in.
        target = run_dir / "annotations.jsonl"
        if Path(annotations_path).resolve() != target.resolve():
            target.write_bytes(Path(annotations_path).read_bytes())
    report_mod.evaluate_run(run_dir, corpus_manifest, lexicon=lexicon)
    manifest["stages"]["evaluate"] = True
    save_run_manifest(run_dir, manifest)
    click.echo(f"wrote {run_dir/'evaluation.json'}")


@main.command("report")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
@handle_errors
def cmd_report(run_dir, figures):
    """Emit report.json, figures, and a summary table."""
    run_dir = Path(run_dir)
    manifest = load_run_manifest(run_dir)
    require_stage(manifest, "evaluate")
    report = report_mod.build_report(run_dir, manifest, render_figures=figures)
    manifest["stages"]["report"] = True
    save_run_manifest(run_dir, manifest)
    click.echo(report_mod.summary_table(report))


@main.command("serve")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--annotators", required=True, help="Comma-separated annotator ids.")
@click.option("--overlap", type=float, default=annotation.DEFAULT_OVERLAP_FRACTION, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--kind", type=click.Choice([annotation.KIND_CORRECTNESS, annotation.KIND_LABEL_CONSISTENCY]),
              default=annotation.KIND_CORRECTNESS, show_default=True)
@click.option("--force", is_flag=True, help="Re-plan even if plan.json exists.")
@click.option("--plan-only", is_flag=True, help="Write plan.json and exit without serving.")
@handle_errors
def cmd_serve(run_dir, port, annotators, overlap, seed, kind, force, plan_only):
    """Plan annotation assignments and serve the annotation hub."""
    run_dir = Path(run_dir)
    manifest = load_run_manifest(run_dir)
    require_stage(manifest, "caption")
    annotator_list = [a.strip() for a in annotators.split(",") if a.strip()]
    plan_path = run_dir / "plan.json"
    if plan_path.exists() and not force:
        plan = annotation.AssignmentPlan.from_json(json.loads(plan_path.read_text(encoding="utf-8")))
    else:
        captions = selfcheck.load_captions(run_dir)
        corpus_manifest = corpus.load_manifest(manifest["corpus"])
        truth = {r.image_id: r.agents for r in corpus_manifest.records}
        plan = annotation.plan_assignments(
            captions, annotator_list, overlap_fraction=overlap, seed=seed, kind=kind,
            ground_truth=truth,
        )
        plan_path.write_text(json.dumps(plan.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if plan_only:
        click.echo(f"wrote {plan_path} ({len(plan.tasks)} tasks)")
        return
    corpus_manifest = corpus.load_manifest(manifest["corpus"])
    root = _resolve_image_root(corpus_manifest, manifest["corpus"])
    image_paths = {r.image_id: root / r.path for r in corpus_manifest.records}
    hub = annotation.AnnotationHub(plan, run_dir / "annotations.jsonl", image_paths=image_paths)
    app = annotation.create_app(hub)
    import uvicorn

    click.echo(f"serving annotation hub on port {port} ({len(plan.tasks)} tasks)")
    uvicorn.run(app, host="127.0.0.1", port=port)


if __name__ == "__main__":
    main()
