// Typed client for the annotation hub wire protocol.

export type CorrectnessVerdict = "correct" | "incorrect";
export type ClassVerdict = Record<string, "present" | "absent">;
export type Verdict = CorrectnessVerdict | ClassVerdict;

export interface TaskPayload {
  task_id: string;
  kind: "correctness" | "label_consistency";
  image_url: string;
  sentence_text?: string;
  caption?: string;
  ground_truth_agents?: string[];
  progress: { done: number; total: number };
}

export interface DonePayload {
  done: true;
}

export type NextResponse = TaskPayload | DonePayload;

export interface AgreementEntry {
  kappa: number | null;
  items: number;
}

export type AgreementReport = Record<string, AgreementEntry>;

export function isDone(resp: NextResponse): resp is DonePayload {
  return (resp as DonePayload).done === true;
}

/** The hub surface the session depends on; tests substitute a scripted one. */
export interface HubClient {
  nextTask(annotator: string): Promise<NextResponse>;
  submitLabel(taskId: string, annotator: string, verdict: Verdict): Promise<void>;
  agreement(): Promise<AgreementReport | null>;
}

export class HttpHubClient implements HubClient {
  constructor(
    private baseUrl: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  async nextTask(annotator: string): Promise<NextResponse> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/api/tasks/next?annotator=${encodeURIComponent(annotator)}`,
    );
    if (!resp.ok) throw new Error(`next task failed: ${resp.status}`);
    return (await resp.json()) as NextResponse;
  }

  async submitLabel(taskId: string, annotator: string, verdict: Verdict): Promise<void> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/tasks/${taskId}/label`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ annotator, verdict }),
    });
    if (!resp.ok) throw new Error(`label submission failed: ${resp.status}`);
  }

  async agreement(): Promise<AgreementReport | null> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/agreement`);
    if (!resp.ok) return null; // hub answers 409 until overlap labels exist
    return (await resp.json()) as AgreementReport;
  }
}

export function formatKappa(value: number | null): string {
  return value === null ? "n/a" : value.toFixed(2);
}

export function progressPercent(progress: { done: number; total: number }): number {
  if (progress.total === 0) return 0;
  return Math.round((100 * progress.done) / progress.total);
}
