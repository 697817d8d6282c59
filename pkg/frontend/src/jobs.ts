/** Job submission and 1 Hz status polling. */

import { ApiClient, ApiError } from "./api.js";
import type { FieldError, JobState } from "./api.js";

export interface JobEvents {
  onUpdate?: (state: JobState) => void;
  onDone?: (state: JobState) => void;
  onFailed?: (state: JobState) => void;
  onValidationErrors?: (errors: FieldError[]) => void;
}

export class JobMonitor {
  private timer: ReturnType<typeof setTimeout> | null = null;
  current: JobState | null = null;

  constructor(private api: ApiClient,
              private events: JobEvents = {},
              private intervalMs = 1000,
              private setTimer: typeof setTimeout = setTimeout,
              private clearTimer: typeof clearTimeout = clearTimeout) {}

  get running(): boolean {
    const s = this.current?.state;
    return s === "queued" || s === "running";
  }

  /** Submit a job; duplicate submits while one runs are refused locally
   * (the service would 409 anyway). Returns the job id or null. */
  async submit(slideId: string,
               config: Record<string, unknown>): Promise<string | null> {
    if (this.running) return null;
    try {
      this.current = await this.api.submitJob(slideId, config);
    } catch (err) {
      if (err instanceof ApiError && err.fieldErrors.length) {
        this.events.onValidationErrors?.(err.fieldErrors);
        return null;
      }
      throw err;
    }
    this.events.onUpdate?.(this.current);
    this.schedule();
    return this.current.job_id;
  }

  /** Attach to an existing job (deep link restore). */
  async attach(jobId: string): Promise<void> {
    this.current = await this.api.jobStatus(jobId);
    this.events.onUpdate?.(this.current);
    if (this.running) this.schedule();
    else this.finish();
  }

  stop(): void {
    if (this.timer !== null) this.clearTimer(this.timer);
    this.timer = null;
  }

  private schedule(): void {
    this.stop();
    this.timer = this.setTimer(() => void this.tick(), this.intervalMs);
  }

  private async tick(): Promise<void> {
    if (!this.current) return;
    this.current = await this.api.jobStatus(this.current.job_id);
    this.events.onUpdate?.(this.current);
    if (this.running) this.schedule();
    else this.finish();
  }

  private finish(): void {
    this.stop();
    if (!this.current) return;
    if (this.current.state === "done") this.events.onDone?.(this.current);
    else if (this.current.state === "failed") this.events.onFailed?.(this.current);
  }
}
