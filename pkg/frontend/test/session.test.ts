import { describe, expect, it } from "vitest";

import { ApiError, Side, StudyApi } from "../src/api";
import {
  PersistedSession,
  PROMPT,
  SessionController,
  SnapshotStore,
} from "../src/session";
import { FakeService } from "./fake_service";

class MemorySnapshots implements SnapshotStore {
  private snapshot: PersistedSession | null = null;

  load(): PersistedSession | null {
    // deep copy: a fresh page load parses fresh JSON
    return this.snapshot
      ? (JSON.parse(JSON.stringify(this.snapshot)) as PersistedSession)
      : null;
  }

  save(snapshot: PersistedSession): void {
    this.snapshot = JSON.parse(JSON.stringify(snapshot)) as PersistedSession;
  }

  clear(): void {
    this.snapshot = null;
  }
}

function setup(sessionSize = 30, snapshots?: SnapshotStore) {
  const fake = new FakeService(sessionSize);
  const api = new StudyApi("", fake.fetch);
  const controller = new SessionController(api, snapshots);
  return { fake, controller };
}

async function playAndVote(
  controller: SessionController,
  choice: Side = "left",
) {
  controller.markPlayed("left");
  controller.markPlayed("right");
  return controller.vote(choice);
}

describe("SessionController", () => {
  it("shows the exact rater prompt", () => {
    expect(PROMPT).toBe(
      "Which video has a sound that better matches the image?",
    );
  });

  it("starts at comparison 0 with zero progress", async () => {
    const { controller } = setup();
    await controller.start("rater-1");
    expect(controller.phase).toBe("rating");
    expect(controller.currentIndex).toBe(0);
    expect(controller.progressLabel).toBe("0/30");
    expect(controller.current?.comparison_id).toMatch(/-c0000$/);
  });

  it("surfaces a failed start and allows retry", async () => {
    const { fake, controller } = setup();
    fake.networkFailures = 1;
    await expect(controller.start("rater-1")).rejects.toBeInstanceOf(
      ApiError,
    );
    expect(controller.phase).toBe("idle");
    expect(controller.lastError).toBeTruthy();
    await controller.start("rater-1");
    expect(controller.phase).toBe("rating");
  });

  it("locks voting until both sounds were played", async () => {
    const { controller } = setup();
    await controller.start("rater-1");
    expect(controller.canVote).toBe(false);
    await expect(controller.vote("left")).rejects.toThrow(
      /both sounds must be played/,
    );
    controller.markPlayed("left");
    expect(controller.canVote).toBe(false);
    controller.markPlayed("right");
    expect(controller.canVote).toBe(true);
    expect(controller.currentIndex).toBe(0); // failed vote never advanced
  });

  it("keeps voting locked while media is failed, then retries", async () => {
    const { controller } = setup();
    await controller.start("rater-1");
    controller.markPlayed("left");
    controller.markPlayed("right");
    controller.markMediaFailed();
    expect(controller.canVote).toBe(false);
    controller.retryMedia();
    // a retry reloads the players, so both must be played again
    expect(controller.canVote).toBe(false);
    controller.markPlayed("left");
    controller.markPlayed("right");
    expect(controller.canVote).toBe(true);
  });

  it("records a vote and auto-advances to the next comparison", async () => {
    const { fake, controller } = setup();
    await controller.start("rater-1");
    const first = controller.current!;
    const outcome = await playAndVote(controller, "right");
    expect(outcome).toBe("recorded");
    expect(fake.votes.get(first.comparison_id)).toBe("right");
    expect(controller.currentIndex).toBe(1);
    expect(controller.progressLabel).toBe("1/30");
    expect(controller.canVote).toBe(false); // next item: nothing played yet
  });

  it("completes after the final vote with all votes persisted", async () => {
    const { fake, controller } = setup(30);
    await controller.start("rater-1");
    for (let i = 0; i < 30; i++) {
      expect(controller.phase).toBe("rating");
      await playAndVote(controller, i % 2 ? "left" : "right");
    }
    expect(controller.phase).toBe("complete");
    expect(controller.current).toBeNull();
    expect(controller.progressLabel).toBe("30/30");
    // votes rendered == votes persisted on the service
    expect(fake.votes.size).toBe(30);
    expect(Object.keys(controller.submittedVotes)).toHaveLength(30);
  });

  it("treats a duplicate-vote answer as already voted and advances",
      async () => {
    const { fake, controller } = setup(3);
    await controller.start("rater-1");
    // the service already has this vote (e.g. a refresh raced a retry)
    fake.votes.set(controller.current!.comparison_id, "left");
    const outcome = await playAndVote(controller, "right");
    expect(outcome).toBe("already-voted");
    expect(controller.currentIndex).toBe(1);
  });

  it("queues a vote across a network drop and flushes it", async () => {
    const { fake, controller } = setup(3);
    await controller.start("rater-1");
    const first = controller.current!;
    fake.networkFailures = 1;
    controller.markPlayed("left");
    controller.markPlayed("right");
    expect(await controller.vote("left")).toBe("queued");
    expect(controller.currentIndex).toBe(0); // no advance yet
    expect(controller.canVote).toBe(false); // re-vote blocked while queued
    expect(await controller.flushQueuedVote()).toBe("recorded");
    expect(fake.votes.get(first.comparison_id)).toBe("left");
    expect(controller.currentIndex).toBe(1);
    expect(await controller.flushQueuedVote()).toBeNull();
  });

  it("resumes at the first unvoted comparison after a refresh",
      async () => {
    const snapshots = new MemorySnapshots();
    const fake = new FakeService(30);
    const api = new StudyApi("", fake.fetch);
    const before = new SessionController(api, snapshots);
    await before.start("rater-1");
    for (let i = 0; i < 7; i++) {
      before.markPlayed("left");
      before.markPlayed("right");
      await before.vote("left");
    }

    const after = new SessionController(api, snapshots);
    expect(after.resume()).toBe(true);
    expect(after.phase).toBe("rating");
    expect(after.sessionId).toBe(before.sessionId);
    expect(after.currentIndex).toBe(7);
    expect(after.progressLabel).toBe("7/30");
    expect(after.canVote).toBe(false); // played state does not carry over

    // the restored controller keeps rating the same session
    after.markPlayed("left");
    after.markPlayed("right");
    await after.vote("right");
    expect(fake.votes.size).toBe(8);
  });

  it("resumes a finished session as complete", async () => {
    const snapshots = new MemorySnapshots();
    const fake = new FakeService(2);
    const api = new StudyApi("", fake.fetch);
    const before = new SessionController(api, snapshots);
    await before.start("rater-1");
    await playAndVote(before);
    await playAndVote(before);
    const after = new SessionController(api, snapshots);
    expect(after.resume()).toBe(true);
    expect(after.phase).toBe("complete");
  });

  it("reports nothing to resume without a snapshot", () => {
    const { controller } = setup(2);
    expect(controller.resume()).toBe(false);
    const bare = new SessionController(new StudyApi(""), undefined);
    expect(bare.resume()).toBe(false);
  });
});
