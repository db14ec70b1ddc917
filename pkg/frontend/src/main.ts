/**
 * Browser bootstrap: wires the session state machine to a minimal DOM.
 *
 * The page is served next to the rating service (same origin), so all
 * requests use root-relative URLs.
 */

import { StudyApi } from "./api";
import {
  PersistedSession,
  PROMPT,
  SessionController,
  SnapshotStore,
} from "./session";

const STORAGE_KEY = "study-ui/session";

class LocalStorageSnapshots implements SnapshotStore {
  load(): PersistedSession | null {
    const raw = window.localStorage.getItem(STORAGE_KEY);
    if (!raw) {
      return null;
    }
    try {
      return JSON.parse(raw) as PersistedSession;
    } catch {
      return null;
    }
  }

  save(snapshot: PersistedSession): void {
    window.localStorage.setItem(STORAGE_KEY, JSON.stringify(snapshot));
  }

  clear(): void {
    window.localStorage.removeItem(STORAGE_KEY);
  }
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

export function mount(root: HTMLElement): void {
  const api = new StudyApi("");
  const snapshots = new LocalStorageSnapshots();
  const controller = new SessionController(api, snapshots);

  function render(): void {
    root.replaceChildren();
    if (controller.phase === "complete") {
      renderComplete();
    } else if (controller.phase === "rating") {
      renderComparison();
    } else {
      renderStart();
    }
  }

  function renderStart(): void {
    const form = el("form", { class: "start" });
    const name = el("input", {
      type: "text",
      placeholder: "Rater name",
      required: "required",
    });
    const button = el("button", { type: "submit" }, "Start session");
    const error = el("p", { class: "error" }, controller.lastError ?? "");
    form.append(name, button, error);
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      button.disabled = true;
      controller
        .start(name.value.trim())
        .then(render)
        .catch(() => {
          // error already captured on the controller; allow retry
          button.disabled = false;
          error.textContent = controller.lastError ?? "request failed";
        });
    });
    root.append(el("h1", {}, "Sound rating study"), form);
  }

  function renderComparison(): void {
    const item = controller.current;
    const flags = controller.currentProgress;
    if (!item || !flags) {
      return;
    }
    root.append(
      el("p", { class: "progress" }, `Comparison ${controller.progressLabel}`),
      el("h1", {}, PROMPT),
      el("img", { src: api.mediaUrl(item.frame_url), alt: "video frame" }),
    );

    const players = el("div", { class: "players" });
    const buttons = el("div", { class: "votes" });
    const voteLeft = el("button", { disabled: "disabled" }, "Vote Left");
    const voteRight = el("button", { disabled: "disabled" }, "Vote Right");
    const error = el("p", { class: "error" }, "");

    const refresh = () => {
      voteLeft.disabled = voteRight.disabled = !controller.canVote;
      error.textContent = controller.lastError ?? "";
    };

    for (const side of ["left", "right"] as const) {
      const label = side === "left" ? "Left" : "Right";
      const url = side === "left"
        ? item.left_audio_url
        : item.right_audio_url;
      const block = el("div", { class: `player ${side}` });
      const audio = el("audio", {
        controls: "controls",
        src: api.mediaUrl(url),
      });
      audio.addEventListener("ended", () => {
        controller.markPlayed(side);
        refresh();
      });
      audio.addEventListener("error", () => {
        controller.markMediaFailed();
        const retry = el("button", {}, "Retry media");
        retry.addEventListener("click", () => {
          controller.retryMedia();
          retry.remove();
          audio.load();
          refresh();
        });
        block.append(retry);
        refresh();
      });
      block.append(el("p", {}, label), audio);
      players.append(block);
    }

    const cast = (choice: "left" | "right") => {
      voteLeft.disabled = voteRight.disabled = true;
      controller
        .vote(choice)
        .then((outcome) => {
          if (outcome === "queued") {
            error.textContent = "connection lost — retrying…";
            setTimeout(
              () => controller.flushQueuedVote().then(render, render),
              1000,
            );
          } else {
            render();
          }
        })
        .catch(refresh);
    };
    voteLeft.addEventListener("click", () => cast("left"));
    voteRight.addEventListener("click", () => cast("right"));
    buttons.append(voteLeft, voteRight);
    root.append(players, buttons, error);
    refresh();
  }

  function renderComplete(): void {
    root.append(
      el("h1", {}, "All comparisons rated — thank you!"),
      el("p", {}, `Votes submitted: ${controller.progressLabel}`),
    );
    const again = el("button", {}, "Start a new session");
    again.addEventListener("click", () => {
      snapshots.clear();
      window.location.reload();
    });
    root.append(again);
  }

  if (!controller.resume()) {
    controller.lastError = null;
  }
  render();
}

const rootElement = document.getElementById("app");
if (rootElement) {
  mount(rootElement);
}
