/**
 * DOM-free rating-session state machine.
 *
 * Drives one rater through a blinded session: every comparison must
 * have both sounds played before its vote buttons unlock, votes go to
 * the service immediately, and the controller only ever advances past
 * a comparison once its vote is recorded (or the service reports it as
 * already voted) — there is no skip path. A snapshot store lets a page
 * refresh resume at the first unvoted comparison.
 */

import { ApiError, SessionItem, Side, StudyApi, StudySession } from "./api";

/** Exact question shown above every comparison. */
export const PROMPT =
  "Which video has a sound that better matches the image?";

export type Phase = "idle" | "starting" | "rating" | "complete";

export type VoteOutcome = "recorded" | "already-voted" | "queued";

/** Per-comparison UI progress; never persisted, reset on refresh. */
export interface ComparisonProgress {
  playedLeft: boolean;
  playedRight: boolean;
  mediaFailed: boolean;
}

export interface PersistedSession {
  session: StudySession;
  votes: Record<string, Side>;
}

/** Durable storage for refresh-resume (e.g. localStorage). */
export interface SnapshotStore {
  load(): PersistedSession | null;
  save(snapshot: PersistedSession): void;
  clear(): void;
}

function freshProgress(): ComparisonProgress {
  return { playedLeft: false, playedRight: false, mediaFailed: false };
}

export class SessionController {
  phase: Phase = "idle";
  lastError: string | null = null;

  private session: StudySession | null = null;
  private votes: Record<string, Side> = {};
  private currentIx = 0;
  private progressFlags: ComparisonProgress[] = [];
  private queued: { comparisonId: string; choice: Side } | null = null;

  constructor(
    private readonly api: StudyApi,
    private readonly snapshots?: SnapshotStore,
  ) {}

  /** Open a new session. Throws ApiError on failure; safe to retry. */
  async start(raterId: string): Promise<void> {
    this.phase = "starting";
    this.lastError = null;
    let session: StudySession;
    try {
      session = await this.api.startSession(raterId);
    } catch (err) {
      this.phase = "idle";
      this.lastError = err instanceof Error ? err.message : String(err);
      throw err;
    }
    this.install(session, {});
  }

  /** Restore a persisted session; false when there is none. */
  resume(): boolean {
    const snapshot = this.snapshots?.load();
    if (!snapshot) {
      return false;
    }
    this.install(snapshot.session, snapshot.votes);
    return true;
  }

  private install(session: StudySession, votes: Record<string, Side>): void {
    this.session = session;
    this.votes = { ...votes };
    this.progressFlags = session.items.map(freshProgress);
    this.queued = null;
    this.currentIx = this.firstUnvoted();
    this.phase = this.currentIx < session.items.length
      ? "rating"
      : "complete";
    this.persist();
  }

  private firstUnvoted(): number {
    const items = this.session?.items ?? [];
    let ix = 0;
    while (ix < items.length && this.votes[items[ix].comparison_id]) {
      ix += 1;
    }
    return ix;
  }

  get sessionId(): string | null {
    return this.session?.session_id ?? null;
  }

  /** Zero-based position of the comparison awaiting a vote. */
  get currentIndex(): number {
    return this.currentIx;
  }

  get current(): SessionItem | null {
    if (!this.session || this.phase !== "rating") {
      return null;
    }
    return this.session.items[this.currentIx];
  }

  get currentProgress(): ComparisonProgress | null {
    return this.phase === "rating"
      ? this.progressFlags[this.currentIx]
      : null;
  }

  get votedCount(): number {
    return Object.keys(this.votes).length;
  }

  /** "7/30"-style progress label. */
  get progressLabel(): string {
    return `${this.votedCount}/${this.session?.items.length ?? 0}`;
  }

  get submittedVotes(): Readonly<Record<string, Side>> {
    return this.votes;
  }

  /** The rater played one side of the current comparison to the end
   * (or at least started it); both sides unlock voting. */
  markPlayed(side: Side): void {
    const flags = this.currentProgress;
    if (!flags) {
      return;
    }
    if (side === "left") {
      flags.playedLeft = true;
    } else {
      flags.playedRight = true;
    }
  }

  /** A media element failed to load: voting stays locked, the UI
   * offers a retry, and skipping remains impossible. */
  markMediaFailed(): void {
    const flags = this.currentProgress;
    if (flags) {
      flags.mediaFailed = true;
    }
  }

  retryMedia(): void {
    const flags = this.currentProgress;
    if (flags) {
      flags.mediaFailed = false;
      flags.playedLeft = false;
      flags.playedRight = false;
    }
  }

  get canVote(): boolean {
    const flags = this.currentProgress;
    return (
      !!flags &&
      flags.playedLeft &&
      flags.playedRight &&
      !flags.mediaFailed &&
      this.queued === null
    );
  }

  /**
   * Submit the current comparison's vote and advance.
   *
   * A duplicate-vote answer from the service counts as already voted
   * (the vote exists server-side, e.g. after a refresh raced a retry)
   * and still advances. A network failure queues the vote for
   * `flushQueuedVote` and does not advance.
   */
  async vote(choice: Side): Promise<VoteOutcome> {
    const item = this.current;
    if (!item) {
      throw new Error("no comparison awaiting a vote");
    }
    if (!this.canVote) {
      throw new Error("both sounds must be played before voting");
    }
    return this.deliver(item.comparison_id, choice);
  }

  /** Re-send a vote that failed on the network; no-op without one. */
  async flushQueuedVote(): Promise<VoteOutcome | null> {
    if (!this.queued) {
      return null;
    }
    const { comparisonId, choice } = this.queued;
    this.queued = null;
    return this.deliver(comparisonId, choice);
  }

  private async deliver(
    comparisonId: string,
    choice: Side,
  ): Promise<VoteOutcome> {
    if (!this.session) {
      throw new Error("no active session");
    }
    let outcome: VoteOutcome = "recorded";
    try {
      await this.api.submitVote(
        this.session.session_id,
        comparisonId,
        choice,
      );
    } catch (err) {
      if (err instanceof ApiError && err.isNetwork) {
        this.queued = { comparisonId, choice };
        this.lastError = err.message;
        return "queued";
      }
      if (err instanceof ApiError && err.code === "duplicate_vote") {
        outcome = "already-voted";
      } else {
        this.lastError = err instanceof Error ? err.message : String(err);
        throw err;
      }
    }
    this.lastError = null;
    this.votes[comparisonId] = choice;
    this.advance();
    this.persist();
    return outcome;
  }

  private advance(): void {
    this.currentIx = this.firstUnvoted();
    if (this.session && this.currentIx >= this.session.items.length) {
      this.phase = "complete";
    }
  }

  private persist(): void {
    if (this.snapshots && this.session) {
      this.snapshots.save({ session: this.session, votes: this.votes });
    }
  }
}
