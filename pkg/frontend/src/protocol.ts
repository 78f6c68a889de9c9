/** Wire protocol v1 for the supervisor console (see docs/wire-protocol.md).
 *
 * Positions are millimeters in the camera frame ([x, y, z]; +x right,
 * +y down, +z away from the camera); pixels are [x, y] in the frame
 * image. Every document carries "v": 1.
 */

export const PROTOCOL_VERSION = 1;

export const DIRECTIONS = [
  "up", "down", "left", "right", "forward", "back",
] as const;
export type Direction = (typeof DIRECTIONS)[number];

export type Vec3 = [number, number, number];
export type Vec2 = [number, number];

export interface TwinDoc {
  id: number;
  label: string;
  color: string | null;
  detected: boolean;
  stale: boolean;
  position_mm: Vec3 | null;
  outline_px: Vec2[] | null;
}

export interface FrameDoc {
  v: number;
  frame_id: number;
  width: number;
  height: number;
  png_base64: string;
  tooltip_mm: Vec3 | null;
  tooltip_px: Vec2 | null;
}

export interface SceneDoc extends FrameDoc {
  twins: TwinDoc[];
}

export interface FeedbackRequestDoc {
  v: number;
  request_id: number;
  kind: "reach" | "pick" | "inquiry";
  action_just_completed: string;
  tooltip_mm: Vec3;
  budget_remaining: number;
  phase: string;
  question: string | null;
}

export interface TrialRecordDoc {
  trial_index: number;
  seed: number;
  task: string;
  loop_mode: string;
  success: boolean;
  planning_steps: number;
  adjustments_used: number;
  failure_mode: string;
  failure_reason: string;
  action_trace: string[];
}

export interface StatusDoc {
  v: number;
  state: "idle" | "running" | "done";
  task: string;
  loop_mode: string;
  trials: number;
  trial_index: number;
  records_done: number;
  planning_steps: number;
  pending_request: FeedbackRequestDoc | null;
  phase: string | null;
  last_result: TrialRecordDoc | null;
}

/** Everything the event stream can deliver, tagged by SSE event name. */
export type ConsoleEvent =
  | { kind: "hello"; status: StatusDoc }
  | { kind: "status"; status: StatusDoc }
  | { kind: "frame"; frame: FrameDoc }
  | { kind: "twins"; frameId: number; twins: TwinDoc[] }
  | { kind: "feedback-request"; request: FeedbackRequestDoc }
  | { kind: "trace"; line: string }
  | { kind: "result"; record: TrialRecordDoc };

export class ProtocolError extends Error {}

function requireV1(doc: { v?: unknown }, kind: string): void {
  if (doc.v !== PROTOCOL_VERSION) {
    throw new ProtocolError(
      `${kind} document has protocol version ${doc.v}, expected ${PROTOCOL_VERSION}`);
  }
}

/** Parse one named SSE event into a typed ConsoleEvent.
 *
 * Unknown event names return null (forward compatibility: additive
 * event kinds must not break old clients); a known event with the
 * wrong protocol version throws.
 */
export function parseConsoleEvent(name: string, data: string): ConsoleEvent | null {
  const doc = JSON.parse(data);
  switch (name) {
    case "hello":
    case "status":
      requireV1(doc, name);
      return { kind: name, status: doc as StatusDoc };
    case "frame":
      requireV1(doc, name);
      return { kind: "frame", frame: doc as FrameDoc };
    case "twins":
      requireV1(doc, name);
      return { kind: "twins", frameId: doc.frame_id, twins: doc.twins as TwinDoc[] };
    case "feedback-request":
      requireV1(doc, name);
      return { kind: "feedback-request", request: doc as FeedbackRequestDoc };
    case "trace":
      requireV1(doc, name);
      return { kind: "trace", line: doc.line as string };
    case "result":
      requireV1(doc, name);
      return { kind: "result", record: doc.record as TrialRecordDoc };
    default:
      return null;
  }
}

// ---------------------------------------------------------------------------
// outgoing feedback

export interface FeedbackBody {
  v: number;
  kind: "confirm" | "adjust" | "redo";
  direction?: Direction;
  request_id: number;
}

/** Build a feedback document; the only place one is ever constructed,
 * so everything the UI posts is valid under the server schema. */
export function makeFeedback(
  kind: FeedbackBody["kind"], requestId: number, direction?: string,
): FeedbackBody {
  if (!Number.isInteger(requestId)) {
    throw new ProtocolError(`request id must be an integer, got ${requestId}`);
  }
  if (kind === "adjust") {
    if (!DIRECTIONS.includes(direction as Direction)) {
      throw new ProtocolError(`adjust needs a direction, got ${direction}`);
    }
    return { v: PROTOCOL_VERSION, kind, direction: direction as Direction,
             request_id: requestId };
  }
  if (direction !== undefined) {
    throw new ProtocolError(`${kind} does not take a direction`);
  }
  return { v: PROTOCOL_VERSION, kind, request_id: requestId };
}

/** Render one recorded trace line for the live trace panel. */
export function formatTraceLine(line: string): string {
  let doc: Record<string, unknown>;
  try {
    doc = JSON.parse(line);
  } catch {
    return line;
  }
  const t = String(doc.t ?? "?").padStart(3);
  const kind = String(doc.kind ?? "?");
  if (kind === "action") {
    const action = doc.action as { action: string; arguments: Record<string, unknown> };
    const args = Object.entries(action.arguments)
      .map(([k, v]) => `${k}=${v}`).join(", ");
    return `t${t} ${action.action}(${args}) -> ${doc.outcome}`;
  }
  if (kind === "feedback") {
    const fb = doc.feedback as { feedback: string; arguments: Record<string, unknown> };
    const args = Object.values(fb.arguments).join(", ");
    return `t${t} << ${fb.feedback}(${args})`;
  }
  if (kind === "result") {
    return `t${t} result: ${doc.success ? "success" : `${doc.failure_mode} — ${doc.reason}`}`;
  }
  const rest = Object.entries(doc)
    .filter(([k]) => k !== "t" && k !== "kind")
    .map(([k, v]) => `${k}=${typeof v === "string" ? v : JSON.stringify(v)}`)
    .join(" ");
  return `t${t} ${kind} ${rest}`;
}
