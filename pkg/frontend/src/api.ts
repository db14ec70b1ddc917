/**
 * Typed client for the rating-study endpoints.
 *
 * The UI talks to exactly two endpoint families: `/v1/study/*` for
 * sessions and votes, and `/v1/media/*` for the image and audio bytes
 * (via the URLs the session payload hands back).
 */

export type Side = "left" | "right";

/** One blinded comparison: ids and media URLs, nothing else. */
export interface SessionItem {
  comparison_id: string;
  frame_id: string;
  frame_url: string;
  left_audio_url: string;
  right_audio_url: string;
}

export interface StudySession {
  session_id: string;
  rater_id: string;
  items: SessionItem[];
}

interface ErrorBody {
  error: string;
  code: string;
}

/** Service-reported failure; `status === 0` means the network failed. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }

  get isNetwork(): boolean {
    return this.status === 0;
  }
}

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class StudyApi {
  private readonly fetchFn: FetchLike;

  constructor(
    private readonly baseUrl: string = "",
    fetchFn?: FetchLike,
  ) {
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  /** POST /v1/study/session — open a fresh blinded session. */
  async startSession(raterId: string, seed?: number): Promise<StudySession> {
    const body: Record<string, unknown> = { rater_id: raterId };
    if (seed !== undefined) {
      body.seed = seed;
    }
    return (await this.post("/v1/study/session", body)) as StudySession;
  }

  /** POST /v1/study/vote — record one left/right preference. */
  async submitVote(
    sessionId: string,
    comparisonId: string,
    choice: Side,
  ): Promise<void> {
    await this.post("/v1/study/vote", {
      session_id: sessionId,
      comparison_id: comparisonId,
      choice,
    });
  }

  /** Absolute URL for a media path from the session payload. */
  mediaUrl(path: string): string {
    return this.baseUrl + path;
  }

  private async post(path: string, body: unknown): Promise<unknown> {
    let resp: Response;
    try {
      resp = await this.fetchFn(this.baseUrl + path, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      });
    } catch (err) {
      throw new ApiError(0, "network", `request to ${path} failed: ${err}`);
    }
    if (resp.status === 204) {
      return undefined;
    }
    if (!resp.ok) {
      throw new ApiError(resp.status, ...(await describeError(resp)));
    }
    return resp.json();
  }
}

async function describeError(resp: Response): Promise<[string, string]> {
  try {
    const body = (await resp.json()) as ErrorBody;
    return [body.code ?? "unknown", body.error ?? resp.statusText];
  } catch {
    return ["unknown", resp.statusText];
  }
}
