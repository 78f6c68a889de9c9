/** Pure state for the console: everything the UI shows, reduced from
 * stream events and post outcomes. No DOM, no network — the renderer
 * and the HTTP client sit on either side of this module.
 *
 * The hard rule: every displayed position comes verbatim from the most
 * recent server payload. The reducer never moves, predicts, or
 * interpolates a coordinate.
 */

import type {
  ConsoleEvent,
  FeedbackRequestDoc,
  FrameDoc,
  StatusDoc,
  TrialRecordDoc,
  TwinDoc,
} from "./protocol.js";

export type ConnectionState = "connecting" | "live" | "reconnecting" | "closed";

export interface TrialStatus {
  state: "idle" | "running" | "done";
  task: string;
  loopMode: string;
  trials: number;
  trialIndex: number;
  recordsDone: number;
  planningSteps: number;
  phase: string | null;
  lastResult: TrialRecordDoc | null;
}

export interface ConsoleViewModel {
  connection: ConnectionState;
  frame: FrameDoc | null;
  twins: TwinDoc[];
  pending: FeedbackRequestDoc | null;
  trial: TrialStatus;
  trace: string[];
  /** one POST in flight at a time; a second click is dropped locally */
  inflight: boolean;
  notice: string | null;
}

export type ViewEvent =
  | { type: "stream"; event: ConsoleEvent }
  | { type: "connection"; state: ConnectionState }
  | { type: "post-sent" }
  | { type: "post-ok"; requestId: number }
  | { type: "post-rejected"; status: number; detail: string };

const TRACE_LIMIT = 400;

export function initialViewModel(): ConsoleViewModel {
  return {
    connection: "connecting",
    frame: null,
    twins: [],
    pending: null,
    trial: {
      state: "idle", task: "", loopMode: "", trials: 0, trialIndex: 0,
      recordsDone: 0, planningSteps: 0, phase: null, lastResult: null,
    },
    trace: [],
    inflight: false,
    notice: null,
  };
}

function trialFromStatus(status: StatusDoc): TrialStatus {
  return {
    state: status.state,
    task: status.task,
    loopMode: status.loop_mode,
    trials: status.trials,
    trialIndex: status.trial_index,
    recordsDone: status.records_done,
    planningSteps: status.planning_steps,
    phase: status.phase,
    lastResult: status.last_result,
  };
}

export function reduce(vm: ConsoleViewModel, ev: ViewEvent): ConsoleViewModel {
  switch (ev.type) {
    case "connection": {
      // a dropped stream freezes the controls until the sticky replay
      // on reconnect proves the view is current again
      const pending = ev.state === "live" ? vm.pending : null;
      return { ...vm, connection: ev.state, pending };
    }
    case "post-sent":
      return { ...vm, inflight: true, notice: null };
    case "post-ok":
      // our answer resolved this request; a new one arrives as its own event
      return { ...vm, inflight: false, pending: null };
    case "post-rejected":
      // 409: the request was no longer pending (double submit, stale
      // view, or exhausted budget) — the stream is the authority on
      // what is actually pending, so only surface the reason
      return { ...vm, inflight: false, notice: `rejected (${ev.status}): ${ev.detail}` };
    case "stream":
      break;
    default:
      return vm;
  }

  const event = ev.event;
  switch (event.kind) {
    case "hello":
    case "status": {
      const vm2 = { ...vm, trial: trialFromStatus(event.status) };
      // hello carries the authoritative pending request (or lack of one)
      if (event.kind === "hello") {
        vm2.pending = event.status.pending_request;
      }
      return vm2;
    }
    case "frame":
      return { ...vm, frame: event.frame };
    case "twins":
      return { ...vm, twins: event.twins };
    case "feedback-request":
      return { ...vm, pending: event.request, notice: null };
    case "trace": {
      const trace = [...vm.trace, event.line];
      if (trace.length > TRACE_LIMIT) trace.splice(0, trace.length - TRACE_LIMIT);
      return { ...vm, trace };
    }
    case "result":
      return { ...vm, trial: { ...vm.trial, lastResult: event.record } };
    default:
      return vm;
  }
}

// ---------------------------------------------------------------------------
// derived control states — the invariants the buttons obey

/** Feedback controls are usable iff a request is pending, the stream is
 * live (a stale view never accepts input), and no answer is in flight. */
export function controlsEnabled(vm: ConsoleViewModel): boolean {
  return vm.connection === "live" && vm.pending !== null && !vm.inflight;
}

/** Adjust and redo spend the shared correction budget, so both grey out
 * the moment it hits zero; confirm stays available. */
export function correctionEnabled(vm: ConsoleViewModel): boolean {
  return controlsEnabled(vm) && (vm.pending?.budget_remaining ?? 0) > 0;
}
