import { afterEach, describe, expect, it, vi } from "vitest";

import { fetchLoginInfo, fetchStatus, submitLogin, submitLogout } from "../src/api.js";

function jsonResponse(payload: unknown, status = 200): Response {
  return new Response(JSON.stringify(payload), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("submitLogin", () => {
  it("posts the form fields in the body, never the URL", async () => {
    const fetchMock = vi.fn(async () =>
      jsonResponse({
        authenticated: true,
        user: "alice",
        remaining: 3600,
        server_time: 12.5,
        return_url: "http://news.example/",
      }),
    );
    vi.stubGlobal("fetch", fetchMock);

    const outcome = await submitLogin("alice", "s3cret/&?=", 3600, "http://news.example/");

    expect(fetchMock).toHaveBeenCalledTimes(1);
    const [url, init] = fetchMock.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe("/login");
    expect(url).not.toContain("s3cret");
    expect(init.method).toBe("POST");
    const headers = init.headers as Record<string, string>;
    expect(headers["Accept"]).toBe("application/json");
    expect(headers["Content-Type"]).toBe("application/x-www-form-urlencoded");

    const body = new URLSearchParams(init.body as string);
    expect(body.get("user")).toBe("alice");
    expect(body.get("password")).toBe("s3cret/&?=");
    expect(body.get("duration")).toBe("3600");
    expect(body.get("return")).toBe("http://news.example/");
    // Sessions bind to the transport address; the client never claims an IP.
    expect([...body.keys()].sort()).toEqual(["duration", "password", "return", "user"]);

    expect(outcome).toEqual({
      kind: "active",
      user: "alice",
      remaining: 3600,
      serverTime: 12.5,
      returnUrl: "http://news.example/",
    });
  });

  it("omits the return field when there is nowhere to go back to", async () => {
    const fetchMock = vi.fn(async () =>
      jsonResponse({ authenticated: true, user: "a", remaining: 1, server_time: 1, return_url: null }),
    );
    vi.stubGlobal("fetch", fetchMock);
    await submitLogin("a", "pw", 3600, null);
    const [, init] = fetchMock.mock.calls[0] as unknown as [string, RequestInit];
    const body = new URLSearchParams(init.body as string);
    expect(body.has("return")).toBe(false);
  });

  it("maps 401 to rejected and 503 to unavailable", async () => {
    vi.stubGlobal("fetch", vi.fn(async () => jsonResponse({ error: "invalid-credentials" }, 401)));
    expect(await submitLogin("a", "bad", 3600, null)).toEqual({ kind: "rejected" });

    vi.stubGlobal("fetch", vi.fn(async () => jsonResponse({ error: "service-unavailable" }, 503)));
    expect(await submitLogin("a", "pw", 3600, null)).toEqual({ kind: "unavailable" });
  });

  it("maps 400 to bad-request and a fetch failure to network", async () => {
    vi.stubGlobal("fetch", vi.fn(async () => jsonResponse({ error: "bad-request" }, 400)));
    expect(await submitLogin("a", "pw", 0, null)).toEqual({ kind: "bad-request" });

    vi.stubGlobal("fetch", vi.fn(async () => {
      throw new TypeError("connection refused");
    }));
    expect(await submitLogin("a", "pw", 3600, null)).toEqual({ kind: "network" });
  });
});

describe("status and login info", () => {
  it("fetches /status with a JSON accept header", async () => {
    const payload = { authenticated: true, user: "alice", remaining: 42, server_time: 9 };
    const fetchMock = vi.fn(async () => jsonResponse(payload));
    vi.stubGlobal("fetch", fetchMock);
    expect(await fetchStatus()).toEqual(payload);
    const [url, init] = fetchMock.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe("/status");
    expect((init.headers as Record<string, string>)["Accept"]).toBe("application/json");
  });

  it("fetches duration choices from GET /login", async () => {
    const payload = {
      authenticated: false,
      user: null,
      remaining: null,
      server_time: 1,
      duration_choices: [600, 3600],
    };
    const fetchMock = vi.fn(async () => jsonResponse(payload));
    vi.stubGlobal("fetch", fetchMock);
    expect(await fetchLoginInfo()).toEqual(payload);
    expect(fetchMock.mock.calls[0]?.[0]).toBe("/login");
  });

  it("returns null when the service is unreachable or errors", async () => {
    vi.stubGlobal("fetch", vi.fn(async () => {
      throw new TypeError("down");
    }));
    expect(await fetchStatus()).toBeNull();
    expect(await fetchLoginInfo()).toBeNull();

    vi.stubGlobal("fetch", vi.fn(async () => jsonResponse({}, 500)));
    expect(await fetchStatus()).toBeNull();
  });
});

describe("submitLogout", () => {
  it("posts /logout and reports success", async () => {
    const fetchMock = vi.fn(async () => jsonResponse({ authenticated: false }));
    vi.stubGlobal("fetch", fetchMock);
    expect(await submitLogout()).toBe(true);
    const [url, init] = fetchMock.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe("/logout");
    expect(init.method).toBe("POST");
  });

  it("swallows transport errors: the UI has already moved on", async () => {
    vi.stubGlobal("fetch", vi.fn(async () => {
      throw new TypeError("down");
    }));
    expect(await submitLogout()).toBe(false);
  });
});
