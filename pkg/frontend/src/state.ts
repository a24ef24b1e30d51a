// Portal state machine, kept free of DOM and network so it can be tested on
// its own. The login service stamps every JSON reply with server_time; the
// machine refuses to apply a reply older than one it has already applied,
// which is what keeps a slow status poll from clobbering a fresh login.

import type { LoginOutcome, StatusPayload } from "./api.js";

export type PortalState =
  | { kind: "needs-login"; notice: string | null }
  | { kind: "submitting" }
  | { kind: "active"; user: string; remaining: number; returnUrl: string | null }
  | { kind: "error"; message: string };

export const MESSAGES = {
  rejected: "Invalid user name or password.",
  unavailable: "The login service is temporarily unavailable. Try again in a moment.",
  badRequest: "The server rejected the login request.",
  network: "Could not reach the login service. Check your connection and try again.",
  expired: "Your session has expired.",
  ended: "Your session has ended.",
  loggedOut: "You are logged out.",
} as const;

export class PortalMachine {
  state: PortalState = { kind: "needs-login", notice: null };
  private newestServerTime = -Infinity;

  private fresh(serverTime: number): boolean {
    if (serverTime <= this.newestServerTime) return false;
    this.newestServerTime = serverTime;
    return true;
  }

  /** Apply a /status (or GET /login) payload. Returns false when the payload
      was discarded: stale, or a submit is in flight and its reply wins. */
  acceptStatus(payload: StatusPayload): boolean {
    if (this.state.kind === "submitting") return false;
    if (!this.fresh(payload.server_time)) return false;
    if (payload.authenticated && payload.user !== null) {
      const returnUrl = this.state.kind === "active" ? this.state.returnUrl : null;
      this.state = {
        kind: "active",
        user: payload.user,
        remaining: payload.remaining ?? 0,
        returnUrl,
      };
    } else if (this.state.kind === "active") {
      this.state = { kind: "needs-login", notice: MESSAGES.ended };
    }
    return true;
  }

  beginSubmit(): void {
    this.state = { kind: "submitting" };
  }

  acceptLogin(outcome: LoginOutcome): void {
    switch (outcome.kind) {
      case "active":
        // The reply to the user's own submit is authoritative even if a
        // status poll raced ahead of it; just keep the newest timestamp.
        this.newestServerTime = Math.max(this.newestServerTime, outcome.serverTime);
        this.state = {
          kind: "active",
          user: outcome.user,
          remaining: outcome.remaining,
          returnUrl: outcome.returnUrl,
        };
        return;
      case "rejected":
        this.state = { kind: "error", message: MESSAGES.rejected };
        return;
      case "unavailable":
        this.state = { kind: "error", message: MESSAGES.unavailable };
        return;
      case "bad-request":
        this.state = { kind: "error", message: MESSAGES.badRequest };
        return;
      case "network":
        this.state = { kind: "error", message: MESSAGES.network };
        return;
    }
  }

  /** One-second countdown between polls. Returns true when the view needs
      re-rendering. */
  tick(): boolean {
    if (this.state.kind !== "active") return false;
    const remaining = this.state.remaining - 1;
    if (remaining <= 0) {
      this.state = { kind: "needs-login", notice: MESSAGES.expired };
    } else {
      this.state = { ...this.state, remaining };
    }
    return true;
  }

  /** The user pressed log out: drop to the form immediately, without waiting
      for the POST to come back. */
  loggedOut(): void {
    this.state = { kind: "needs-login", notice: MESSAGES.loggedOut };
  }
}
