// DOM wiring for the portal page. Everything stateful lives in PortalMachine;
// this file only moves values between it, the API client, and the elements.

import * as api from "./api.js";
import { describeDuration, formatClock } from "./format.js";
import { PortalMachine } from "./state.js";

const DEFAULT_CHOICES = [3600, 14400, 28800];
const POLL_MS = 15_000;
const TICK_MS = 1_000;
const REDIRECT_DELAY_MS = 2_000;

export interface PortalOptions {
  /** Where to send the browser after a login that carried a return URL. */
  navigate?: (url: string) => void;
  /** Override the return URL instead of reading ?return= from the location. */
  returnUrl?: string | null;
  pollMs?: number;
  tickMs?: number;
  redirectDelayMs?: number;
}

export interface PortalHandle {
  machine: PortalMachine;
  /** Resolves when the initial status/choices fetch has been applied. */
  ready: Promise<void>;
  /** Resolves once every operation started so far has finished. */
  settled(): Promise<void>;
  stop(): void;
}

function must<T extends Element>(doc: Document, id: string): T {
  const el = doc.getElementById(id);
  if (!el) throw new Error(`portal page is missing #${id}`);
  return el as unknown as T;
}

// Only targets a browser will fetch over HTTP may be offered as the
// post-login destination; anything else (javascript:, data:, ...) is dropped.
export function safeReturnUrl(raw: string | null): string | null {
  if (!raw) return null;
  if (raw.startsWith("/") && !raw.startsWith("//")) return raw;
  if (/^https?:\/\//i.test(raw)) return raw;
  return null;
}

export function init(doc: Document, options: PortalOptions = {}): PortalHandle {
  const form = must<HTMLFormElement>(doc, "login-form");
  const userEl = must<HTMLInputElement>(doc, "user");
  const passwordEl = must<HTMLInputElement>(doc, "password");
  const durationEl = must<HTMLSelectElement>(doc, "duration");
  const submitEl = must<HTMLButtonElement>(doc, "submit");
  const messageEl = must<HTMLElement>(doc, "message");
  const sessionEl = must<HTMLElement>(doc, "session");
  const sessionUserEl = must<HTMLElement>(doc, "session-user");
  const sessionRemainingEl = must<HTMLElement>(doc, "session-remaining");
  const returnBoxEl = must<HTMLElement>(doc, "return-box");
  const returnLinkEl = must<HTMLAnchorElement>(doc, "return-link");
  const logoutEl = must<HTMLButtonElement>(doc, "logout");

  const machine = new PortalMachine();
  const navigate = options.navigate ?? ((url: string) => doc.defaultView?.location.replace(url));
  const returnUrl = safeReturnUrl(
    options.returnUrl !== undefined
      ? options.returnUrl
      : new URLSearchParams(doc.location?.search ?? "").get("return"),
  );
  const pollMs = options.pollMs ?? POLL_MS;
  const tickMs = options.tickMs ?? TICK_MS;
  const redirectDelayMs = options.redirectDelayMs ?? REDIRECT_DELAY_MS;

  let pending: Promise<void> = Promise.resolve();
  const track = (work: () => Promise<void>): Promise<void> => {
    pending = pending.then(work, work);
    return pending;
  };

  function fillChoices(choices: number[]): void {
    durationEl.textContent = "";
    for (const seconds of choices) {
      const option = doc.createElement("option");
      option.value = String(seconds);
      option.textContent = describeDuration(seconds);
      durationEl.appendChild(option);
    }
  }

  function render(): void {
    const state = machine.state;
    const busy = state.kind === "submitting";
    userEl.disabled = busy;
    passwordEl.disabled = busy;
    durationEl.disabled = busy;
    submitEl.disabled = busy;

    form.hidden = state.kind === "active";
    sessionEl.hidden = state.kind !== "active";

    if (state.kind === "error") {
      messageEl.textContent = state.message;
      messageEl.className = "message error";
      messageEl.hidden = false;
    } else if (state.kind === "needs-login" && state.notice) {
      messageEl.textContent = state.notice;
      messageEl.className = "message note";
      messageEl.hidden = false;
    } else {
      messageEl.textContent = "";
      messageEl.hidden = true;
    }

    if (state.kind === "active") {
      sessionUserEl.textContent = state.user;
      sessionRemainingEl.textContent = formatClock(state.remaining);
      if (state.returnUrl) {
        returnLinkEl.href = state.returnUrl;
        returnBoxEl.hidden = false;
      } else {
        returnBoxEl.hidden = true;
      }
    }
  }

  let redirectTimer: ReturnType<typeof setTimeout> | null = null;

  async function doLogin(): Promise<void> {
    const outcome = await api.submitLogin(
      userEl.value.trim(),
      passwordEl.value,
      Number(durationEl.value),
      returnUrl,
    );
    machine.acceptLogin(outcome);
    if (outcome.kind !== "active") {
      // Whatever went wrong, a password should not sit in a form field.
      passwordEl.value = "";
    }
    render();
    if (outcome.kind === "active" && outcome.returnUrl) {
      const target = safeReturnUrl(outcome.returnUrl);
      if (target) redirectTimer = setTimeout(() => navigate(target), redirectDelayMs);
    }
  }

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    if (machine.state.kind === "submitting") return;
    machine.beginSubmit();
    render();
    void track(doLogin);
  });

  logoutEl.addEventListener("click", () => {
    machine.loggedOut();
    render();
    void track(async () => {
      await api.submitLogout();
    });
  });

  async function refreshOnce(): Promise<void> {
    const status = await api.fetchStatus();
    if (status && machine.acceptStatus(status)) render();
  }

  const pollTimer = setInterval(() => void track(refreshOnce), pollMs);
  const tickTimer = setInterval(() => {
    if (machine.tick()) render();
  }, tickMs);

  const ready = track(async () => {
    const info = await api.fetchLoginInfo();
    if (info && info.duration_choices.length > 0) {
      fillChoices(info.duration_choices);
      machine.acceptStatus(info);
    } else {
      fillChoices(DEFAULT_CHOICES);
    }
    render();
  });

  return {
    machine,
    ready,
    settled: () => pending,
    stop: () => {
      clearInterval(pollTimer);
      clearInterval(tickTimer);
      if (redirectTimer !== null) clearTimeout(redirectTimer);
    },
  };
}
