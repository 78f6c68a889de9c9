/** HTTP side of the console: one server-sent-event subscription with
 * automatic reconnect, plus the three plain endpoints. Built on fetch
 * streams (not EventSource) so the identical code runs in the browser
 * and under node's test runner.
 */

import {
  ConsoleEvent,
  FeedbackBody,
  SceneDoc,
  StatusDoc,
  parseConsoleEvent,
} from "./protocol.js";

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const doc = await response.json();
    if (typeof doc.detail === "string") return doc.detail;
    return JSON.stringify(doc.detail ?? doc);
  } catch {
    return response.statusText || "request failed";
  }
}

export async function fetchStatus(baseUrl: string): Promise<StatusDoc> {
  const response = await fetch(`${baseUrl}/status`);
  if (!response.ok) throw new ApiError(response.status, await errorDetail(response));
  return response.json();
}

export async function fetchScene(baseUrl: string): Promise<SceneDoc> {
  const response = await fetch(`${baseUrl}/scene`);
  if (!response.ok) throw new ApiError(response.status, await errorDetail(response));
  return response.json();
}

export interface FeedbackAccepted {
  v: number;
  request_id: number;
  applied: { feedback: string; arguments: Record<string, unknown> };
}

/** POST one feedback document. Rejections (409 protocol errors, 422
 * malformed) surface as ApiError with the server's reason. */
export async function postFeedback(
  baseUrl: string, body: FeedbackBody,
): Promise<FeedbackAccepted> {
  const response = await fetch(`${baseUrl}/feedback`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(body),
  });
  if (!response.ok) throw new ApiError(response.status, await errorDetail(response));
  return response.json();
}

// ---------------------------------------------------------------------------
// event stream

/** Incremental parser for one SSE byte stream. Feed it decoded text
 * chunks in any fragmentation; it yields [eventName, data] pairs and
 * swallows comment keepalives. */
export class SseParser {
  private buffer = "";

  push(chunk: string): Array<[string, string]> {
    this.buffer += chunk;
    const out: Array<[string, string]> = [];
    let cut: number;
    while ((cut = this.buffer.indexOf("\n\n")) >= 0) {
      const raw = this.buffer.slice(0, cut);
      this.buffer = this.buffer.slice(cut + 2);
      let name = "message";
      const data: string[] = [];
      for (const line of raw.split("\n")) {
        if (line.startsWith(":")) continue; // keepalive comment
        if (line.startsWith("event:")) name = line.slice(6).trim();
        else if (line.startsWith("data:")) data.push(line.slice(5).trim());
      }
      if (data.length > 0) out.push([name, data.join("\n")]);
    }
    return out;
  }
}

export interface StreamHandle {
  close(): void;
}

export interface StreamCallbacks {
  onEvent(event: ConsoleEvent): void;
  /** connection lifecycle: live on open, reconnecting on any drop */
  onState(state: "live" | "reconnecting" | "closed"): void;
  /** non-fatal decode problems, for the console log */
  onError?(error: unknown): void;
}

/** Subscribe to `${baseUrl}/events` until closed, reconnecting with a
 * fixed short backoff whenever the stream drops. Each (re)connect
 * replays the server's sticky events, so the view is complete again
 * before new deltas arrive. */
export function streamEvents(
  baseUrl: string, callbacks: StreamCallbacks, retryMs = 750,
): StreamHandle {
  const controller = { aborted: false, inner: new AbortController() };

  const run = async () => {
    while (!controller.aborted) {
      try {
        const response = await fetch(`${baseUrl}/events`, {
          signal: controller.inner.signal,
          headers: { accept: "text/event-stream" },
        });
        if (!response.ok || response.body === null) {
          throw new ApiError(response.status, await errorDetail(response));
        }
        callbacks.onState("live");
        const reader = response.body.getReader();
        const decoder = new TextDecoder();
        const parser = new SseParser();
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          for (const [name, data] of parser.push(decoder.decode(value, { stream: true }))) {
            try {
              const event = parseConsoleEvent(name, data);
              if (event !== null) callbacks.onEvent(event);
            } catch (error) {
              callbacks.onError?.(error);
            }
          }
        }
      } catch (error) {
        if (!controller.aborted) callbacks.onError?.(error);
      }
      if (controller.aborted) break;
      callbacks.onState("reconnecting");
      await new Promise((resolve) => setTimeout(resolve, retryMs));
    }
    callbacks.onState("closed");
  };

  void run();
  return {
    close() {
      controller.aborted = true;
      controller.inner.abort();
    },
  };
}
