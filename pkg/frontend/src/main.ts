import { ReviewApi } from "./api.js";
import { ReviewController } from "./controller.js";
import { renderPhase } from "./render.js";
import { REJECT_REASONS } from "./types.js";
import type { RejectReason } from "./types.js";

function reviewerName(): string {
  const stored = localStorage.getItem("reviewer");
  if (stored) return stored;
  const name = window.prompt("Reviewer name?", "anonymous") || "anonymous";
  localStorage.setItem("reviewer", name);
  return name;
}

function wire(root: HTMLElement, controller: ReviewController): void {
  controller.subscribe((phase) => {
    root.innerHTML = renderPhase(phase);
  });

  document.addEventListener("keydown", (event) => {
    if (event.target instanceof HTMLInputElement) return;
    void controller.handleKey(event.key);
  });

  root.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    const button = target.closest("button");
    if (!button) return;
    if (button.classList.contains("accept")) void controller.submitAccept();
    else if (button.classList.contains("reject")) void controller.handleKey("r");
    else if (button.classList.contains("retry")) void controller.fetchNext();
    else if (button.classList.contains("reason")) {
      const reason = button.dataset.reason as RejectReason;
      if ((REJECT_REASONS as readonly string[]).includes(reason)) {
        const other = root.querySelector<HTMLInputElement>(".other-text");
        void controller.submitReject(reason, other?.value ?? "");
      }
    }
  });

  root.addEventListener("input", (event) => {
    const target = event.target as HTMLElement;
    if (target instanceof HTMLInputElement && target.classList.contains("other-text")) {
      controller.setOtherText(target.value);
    }
  });
}

const root = document.getElementById("app");
if (root) {
  const controller = new ReviewController(new ReviewApi(), reviewerName());
  wire(root, controller);
  void controller.start();
}
