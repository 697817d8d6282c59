/** Typed client for the slide/job HTTP API. The viewer consumes this API
 * exclusively; it never computes pixels itself. */

export interface LevelInfo {
  level: number;
  width: number;
  height: number;
}

export interface SlideManifest {
  slide_id: string;
  mpp_x: number;
  mpp_y: number;
  tile_size: number;
  levels: LevelInfo[];
  background: number[];
}

export type JobStateName = "queued" | "running" | "done" | "failed";

export interface JobState {
  job_id: string;
  slide_id: string;
  config: Record<string, unknown>;
  state: JobStateName;
  progress: number;
  error: string | null;
  outputs: Record<string, string>;
}

export interface FieldError {
  field: string;
  message: string;
}

export class ApiError extends Error {
  status: number;
  fieldErrors: FieldError[];

  constructor(status: number, message: string, fieldErrors: FieldError[] = []) {
    super(message);
    this.status = status;
    this.fieldErrors = fieldErrors;
  }
}

export interface OverlayParams {
  threshold?: number;
  colormap?: string;
}

async function parseError(response: Response): Promise<ApiError> {
  let detail: unknown = null;
  try {
    detail = (await response.json()).detail;
  } catch {
    /* non-JSON body */
  }
  if (Array.isArray(detail)) {
    return new ApiError(response.status, "validation failed",
      detail as FieldError[]);
  }
  return new ApiError(response.status, String(detail ?? response.statusText));
}

export class ApiClient {
  constructor(private base: string = "",
              private fetchFn: typeof fetch = fetch) {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchFn(`${this.base}${path}`);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  listSlides(): Promise<SlideManifest[]> {
    return this.getJson("/api/slides");
  }

  async submitJob(slideId: string,
                  config: Record<string, unknown>): Promise<JobState> {
    const response = await this.fetchFn(`${this.base}/api/jobs`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ slide_id: slideId, config }),
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as JobState;
  }

  jobStatus(jobId: string): Promise<JobState> {
    return this.getJson(`/api/jobs/${jobId}`);
  }

  jobFeatures(jobId: string): Promise<Record<string, unknown>> {
    return this.getJson(`/api/jobs/${jobId}/features`);
  }

  jobStaging(jobId: string): Promise<Record<string, unknown>> {
    return this.getJson(`/api/jobs/${jobId}/staging`);
  }

  jobBurden(jobId: string): Promise<Record<string, unknown>> {
    return this.getJson(`/api/jobs/${jobId}/burden`);
  }

  tileUrl(slideId: string, level: number, x: number, y: number): string {
    return `${this.base}/api/tiles/${slideId}/${level}/${x}_${y}.png`;
  }

  overlayUrl(jobId: string, kind: string, level: number, x: number, y: number,
             params: OverlayParams = {}): string {
    const query = new URLSearchParams();
    if (params.threshold !== undefined) {
      query.set("threshold", String(params.threshold));
    }
    if (params.colormap !== undefined) query.set("colormap", params.colormap);
    const qs = query.toString();
    return `${this.base}/api/overlays/${jobId}/${kind}/${level}/${x}_${y}.png`
      + (qs ? `?${qs}` : "");
  }
}
