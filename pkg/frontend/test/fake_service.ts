/**
 * In-memory stand-in for the study service: same routes, same status
 * codes, same error bodies, so client tests exercise real payloads.
 */

import { FetchLike, SessionItem, Side } from "../src/api";

function json(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

interface SessionRequestBody {
  rater_id?: string;
  seed?: number;
}

interface VoteRequestBody {
  session_id?: string;
  comparison_id?: string;
  choice?: string;
}

export class FakeService {
  /** comparison_id -> recorded choice, the "persisted vote log". */
  readonly votes = new Map<string, Side>();
  /** "METHOD path" of every request that reached the service. */
  readonly requests: string[] = [];
  /** Fail this many upcoming requests at the network layer. */
  networkFailures = 0;

  private readonly sessions = new Map<string, Set<string>>();
  private counter = 0;

  constructor(private readonly sessionSize = 30) {}

  get fetch(): FetchLike {
    return (input, init) => this.handle(input, init);
  }

  private async handle(input: string, init?: RequestInit): Promise<Response> {
    this.requests.push(`${init?.method ?? "GET"} ${input}`);
    if (this.networkFailures > 0) {
      this.networkFailures -= 1;
      throw new TypeError("fetch failed");
    }
    const body = init?.body ? JSON.parse(String(init.body)) : {};
    if (input.endsWith("/v1/study/session")) {
      return this.session(body as SessionRequestBody);
    }
    if (input.endsWith("/v1/study/vote")) {
      return this.vote(body as VoteRequestBody);
    }
    return json(404, { error: `no route ${input}`, code: "not_found" });
  }

  private session(body: SessionRequestBody): Response {
    if (!body.rater_id) {
      return json(400, { error: "rater_id required", code: "bad_request" });
    }
    const sessionId = `s-${this.counter++}`;
    const items: SessionItem[] = [];
    for (let i = 0; i < this.sessionSize; i++) {
      const cid = `${sessionId}-c${String(i).padStart(4, "0")}`;
      items.push({
        comparison_id: cid,
        frame_id: `frm-${i}`,
        frame_url: `/v1/media/frame/frm-${i}`,
        left_audio_url: `/v1/media/audio/snd-${i}a`,
        right_audio_url: `/v1/media/audio/snd-${i}b`,
      });
    }
    this.sessions.set(sessionId, new Set(items.map((e) => e.comparison_id)));
    return json(200, {
      session_id: sessionId,
      rater_id: body.rater_id,
      items,
    });
  }

  private vote(body: VoteRequestBody): Response {
    const known = this.sessions.get(body.session_id ?? "");
    if (!known || !known.has(body.comparison_id ?? "")) {
      return json(404, {
        error: `no comparison ${body.comparison_id}`,
        code: "unknown_comparison",
      });
    }
    if (body.choice !== "left" && body.choice !== "right") {
      return json(400, {
        error: `bad choice ${body.choice}`,
        code: "bad_choice",
      });
    }
    if (this.votes.has(body.comparison_id!)) {
      return json(409, {
        error: `already voted on ${body.comparison_id}`,
        code: "duplicate_vote",
      });
    }
    this.votes.set(body.comparison_id!, body.choice);
    return new Response(null, { status: 204 });
  }
}
