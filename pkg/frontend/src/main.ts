// Thin DOM renderer wiring the session state machine to the page.

import { HttpHubClient, formatKappa, progressPercent } from "./api.js";
import { AnnotationSession, SessionState } from "./session.js";

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node;
}

function render(state: SessionState): void {
  const status = el("status");
  const image = el("image") as HTMLImageElement;
  const sentence = el("sentence");
  const verdict = el("verdict");
  const progress = el("progress");
  const bar = el("progress-bar");

  if (state.phase === "done") {
    status.textContent = `All tasks labeled (${state.submittedCount} submitted). Press u to undo the last one.`;
    image.hidden = true;
    sentence.textContent = "";
    verdict.textContent = "";
    return;
  }
  if (state.phase === "retry") {
    status.textContent = `Submission failed: ${state.errorMessage ?? "unknown error"}. Press Enter to retry.`;
    return;
  }
  if (state.phase === "loading" || state.task === null) {
    status.textContent = "Loading…";
    return;
  }

  const task = state.task;
  status.textContent =
    task.kind === "correctness"
      ? "Is this sentence correct for the image? c = correct, x = incorrect, Enter = submit, u = undo"
      : "Toggle each listed class with its number key, Enter = submit, u = undo";
  image.hidden = false;
  image.src = task.image_url;
  sentence.textContent = task.sentence_text ?? task.caption ?? "";
  if (task.kind === "correctness") {
    verdict.textContent = state.selected === null ? "no verdict selected" : state.selected;
  } else {
    verdict.textContent = (task.ground_truth_agents ?? [])
      .map((cls, i) => `${i + 1}: ${cls} = ${state.classToggles[cls] ?? "absent"}`)
      .join("   ");
  }

  if (state.progress !== null) {
    const pct = progressPercent(state.progress);
    progress.textContent = `${state.progress.done}/${state.progress.total} (${pct}%)`;
    bar.style.width = `${pct}%`;
  }
}

async function refreshAgreement(client: HttpHubClient): Promise<void> {
  const panel = el("agreement");
  const report = await client.agreement();
  if (report === null) {
    panel.hidden = true;
    return;
  }
  panel.hidden = false;
  panel.textContent = Object.entries(report)
    .map(([pair, entry]) => `${pair}: κ = ${formatKappa(entry.kappa)} (${entry.items} items)`)
    .join("   ");
}

export function boot(): void {
  const params = new URLSearchParams(window.location.search);
  const annotator = params.get("annotator") ?? "anonymous";
  const client = new HttpHubClient("");
  const session = new AnnotationSession(client, annotator);

  session.onChange((state) => {
    render(state);
    if (state.phase === "labeling" || state.phase === "done") {
      void refreshAgreement(client);
    }
  });
  document.addEventListener("keydown", (event) => {
    void session.handleKey(event.key);
  });
  void session.start();
}

if (typeof document !== "undefined" && document.getElementById("status") !== null) {
  boot();
}
