// Keyboard-driven annotation session state machine.
//
// Keymap: c = correct, x = incorrect, digits toggle classes on
// label-consistency tasks, Enter = submit, u = undo (re-opens the previous
// task; latest-wins server semantics make resubmission safe).

import {
  ClassVerdict,
  CorrectnessVerdict,
  HubClient,
  TaskPayload,
  Verdict,
  isDone,
} from "./api.js";

export type Phase = "loading" | "labeling" | "submitting" | "retry" | "done";

export interface SessionState {
  phase: Phase;
  task: TaskPayload | null;
  selected: CorrectnessVerdict | null;
  classToggles: ClassVerdict;
  submittedCount: number;
  progress: { done: number; total: number } | null;
  errorMessage: string | null;
  canUndo: boolean;
}

interface SubmittedEntry {
  task: TaskPayload;
  verdict: Verdict;
}

export class AnnotationSession {
  private phase: Phase = "loading";
  private task: TaskPayload | null = null;
  private selected: CorrectnessVerdict | null = null;
  private classToggles: ClassVerdict = {};
  private submittedCount = 0;
  private errorMessage: string | null = null;
  private lastSubmitted: SubmittedEntry | null = null;
  private listeners: Array<(state: SessionState) => void> = [];

  constructor(
    private client: HubClient,
    private annotator: string,
  ) {}

  onChange(listener: (state: SessionState) => void): void {
    this.listeners.push(listener);
  }

  getState(): SessionState {
    return {
      phase: this.phase,
      task: this.task,
      selected: this.selected,
      classToggles: { ...this.classToggles },
      submittedCount: this.submittedCount,
      progress: this.task?.progress ?? null,
      errorMessage: this.errorMessage,
      canUndo: this.lastSubmitted !== null,
    };
  }

  private emit(): void {
    const state = this.getState();
    for (const listener of this.listeners) listener(state);
  }

  async start(): Promise<void> {
    await this.advance();
  }

  private async advance(): Promise<void> {
    this.phase = "loading";
    this.emit();
    try {
      const next = await this.client.nextTask(this.annotator);
      if (isDone(next)) {
        this.phase = "done";
        this.task = null;
      } else {
        this.task = next;
        this.phase = "labeling";
        this.selected = null;
        this.classToggles = this.initialToggles(next);
      }
      this.errorMessage = null;
    } catch (err) {
      this.phase = "retry";
      this.errorMessage = String(err);
    }
    this.emit();
  }

  private initialToggles(task: TaskPayload): ClassVerdict {
    if (task.kind !== "label_consistency") return {};
    const toggles: ClassVerdict = {};
    for (const cls of task.ground_truth_agents ?? []) toggles[cls] = "absent";
    return toggles;
  }

  /** Submit is enabled only once a verdict is selected. */
  canSubmit(): boolean {
    if (this.phase !== "labeling" || this.task === null) return false;
    if (this.task.kind === "correctness") return this.selected !== null;
    return Object.keys(this.classToggles).length > 0;
  }

  async handleKey(key: string): Promise<void> {
    if (this.phase === "retry" && key === "Enter") {
      await this.retry();
      return;
    }
    if (this.phase !== "labeling" || this.task === null) {
      if (key === "u") await this.undo();
      return;
    }
    if (this.task.kind === "correctness") {
      if (key === "c") {
        this.selected = "correct";
        this.emit();
        return;
      }
      if (key === "x") {
        this.selected = "incorrect";
        this.emit();
        return;
      }
    } else if (/^[1-9]$/.test(key)) {
      const classes = this.task.ground_truth_agents ?? [];
      const cls = classes[Number(key) - 1];
      if (cls !== undefined) {
        this.classToggles[cls] = this.classToggles[cls] === "present" ? "absent" : "present";
        this.emit();
      }
      return;
    }
    if (key === "Enter") {
      await this.submit();
      return;
    }
    if (key === "u") {
      await this.undo();
    }
  }

  private currentVerdict(): Verdict {
    if (this.task!.kind === "correctness") return this.selected!;
    return { ...this.classToggles };
  }

  /** Posts the verdict once; the task leaves the view only after the ack. */
  async submit(): Promise<void> {
    if (!this.canSubmit() || this.phase !== "labeling") return;
    const task = this.task!;
    const verdict = this.currentVerdict();
    this.phase = "submitting";
    this.emit();
    try {
      await this.client.submitLabel(task.task_id, this.annotator, verdict);
    } catch (err) {
      // Verdict selection is kept locally; Enter retries the same submission.
      this.phase = "retry";
      this.errorMessage = String(err);
      this.emit();
      return;
    }
    this.submittedCount += 1;
    this.lastSubmitted = { task, verdict };
    await this.advance();
  }

  private async retry(): Promise<void> {
    if (this.task !== null && this.canSubmitAfterRetry()) {
      this.phase = "labeling";
      this.emit();
      await this.submit();
    } else {
      await this.advance();
    }
  }

  private canSubmitAfterRetry(): boolean {
    const task = this.task;
    if (task === null) return false;
    if (task.kind === "correctness") return this.selected !== null;
    return Object.keys(this.classToggles).length > 0;
  }

  /** Re-opens the previous task with its verdict preselected. */
  async undo(): Promise<void> {
    if (this.lastSubmitted === null) return;
    const { task, verdict } = this.lastSubmitted;
    this.lastSubmitted = null;
    this.task = task;
    this.phase = "labeling";
    if (task.kind === "correctness") {
      this.selected = verdict as CorrectnessVerdict;
      this.classToggles = {};
    } else {
      this.selected = null;
      this.classToggles = { ...(verdict as ClassVerdict) };
    }
    this.emit();
  }
}
