// Typed client for the ipgate login service. Everything is same-origin and
// form-encoded; the session is bound to the source address of the TCP
// connection, so there is no token to store and no cookie to send. The
// password travels only in a POST body, never in a URL.

export interface StatusPayload {
  authenticated: boolean;
  user: string | null;
  remaining: number | null; // null whenever authenticated is false
  server_time: number;
}

export interface LoginInfo extends StatusPayload {
  duration_choices: number[];
}

export type LoginOutcome =
  | { kind: "active"; user: string; remaining: number; serverTime: number; returnUrl: string | null }
  | { kind: "rejected" }      // 401: bad credentials or no qualifying group
  | { kind: "unavailable" }   // 503: session store or directory is down
  | { kind: "bad-request" }   // 400: malformed fields (should not happen via the form)
  | { kind: "network" };      // could not reach the service at all

const ACCEPT_JSON = { Accept: "application/json" };

export async function fetchLoginInfo(): Promise<LoginInfo | null> {
  try {
    const res = await fetch("/login", { headers: ACCEPT_JSON });
    if (!res.ok) return null;
    return (await res.json()) as LoginInfo;
  } catch {
    return null;
  }
}

export async function fetchStatus(): Promise<StatusPayload | null> {
  try {
    const res = await fetch("/status", { headers: ACCEPT_JSON });
    if (!res.ok) return null;
    return (await res.json()) as StatusPayload;
  } catch {
    return null;
  }
}

export async function submitLogin(
  user: string,
  password: string,
  durationSeconds: number,
  returnUrl: string | null,
): Promise<LoginOutcome> {
  const body = new URLSearchParams({
    user,
    password,
    duration: String(durationSeconds),
  });
  if (returnUrl) body.set("return", returnUrl);
  let res: Response;
  try {
    res = await fetch("/login", {
      method: "POST",
      headers: { ...ACCEPT_JSON, "Content-Type": "application/x-www-form-urlencoded" },
      body: body.toString(),
    });
  } catch {
    return { kind: "network" };
  }
  if (res.status === 401) return { kind: "rejected" };
  if (res.status === 503) return { kind: "unavailable" };
  if (!res.ok) return { kind: "bad-request" };
  try {
    const data = (await res.json()) as {
      user: string;
      remaining: number;
      server_time: number;
      return_url: string | null;
    };
    return {
      kind: "active",
      user: data.user,
      remaining: data.remaining,
      serverTime: data.server_time,
      returnUrl: data.return_url ?? null,
    };
  } catch {
    return { kind: "network" };
  }
}

export async function submitLogout(): Promise<boolean> {
  try {
    const res = await fetch("/logout", { method: "POST", headers: ACCEPT_JSON });
    return res.ok;
  } catch {
    return false;
  }
}
