/** The console itself: a frame canvas with twin outlines and the tool
 * tip marker, the feedback controls (six directions, confirm, redo),
 * the twin table, and the live action trace.
 *
 * All state lives in the view model; this module only builds DOM,
 * renders a view model into it, and forwards clicks as feedback posts.
 * Dependencies (document, Image, network) are injectable so the whole
 * console runs under a headless DOM in tests.
 */

import { ApiError, postFeedback, streamEvents } from "./client.js";
import {
  DIRECTIONS,
  Direction,
  FrameDoc,
  TwinDoc,
  formatTraceLine,
  makeFeedback,
} from "./protocol.js";
import {
  ConsoleViewModel,
  ViewEvent,
  controlsEnabled,
  correctionEnabled,
  initialViewModel,
  reduce,
} from "./viewmodel.js";

export interface ConsoleDeps {
  documentRef?: Document;
  imageCtor?: new () => HTMLImageElement;
  stream?: typeof streamEvents;
  post?: typeof postFeedback;
}

export interface ConsoleElements {
  banner: HTMLElement;
  canvas: HTMLCanvasElement;
  statusLine: HTMLElement;
  pendingBox: HTMLElement;
  twinList: HTMLElement;
  notice: HTMLElement;
  tracePane: HTMLElement;
  buttons: Record<string, HTMLButtonElement>;
}

export interface ConsoleApp {
  elements: ConsoleElements;
  viewModel(): ConsoleViewModel;
  dispatch(ev: ViewEvent): void;
  stop(): void;
}

const mmText = (p: readonly number[] | null): string =>
  p === null ? "—" : `[${p.map((c) => c.toFixed(1)).join(", ")}] mm`;

export function buildConsole(
  root: HTMLElement, baseUrl: string, deps: ConsoleDeps = {},
): ConsoleApp {
  const doc = deps.documentRef ?? document;
  const ImageCtor = deps.imageCtor ?? Image;
  const stream = deps.stream ?? streamEvents;
  const post = deps.post ?? postFeedback;

  const el = <K extends keyof HTMLElementTagNameMap>(
    tag: K, className: string, parent: HTMLElement, text = "",
  ): HTMLElementTagNameMap[K] => {
    const node = doc.createElement(tag);
    node.className = className;
    if (text) node.textContent = text;
    parent.appendChild(node);
    return node;
  };

  // ---- static layout ----
  const banner = el("div", "banner", root, "connecting…");
  const columns = el("div", "columns", root);
  const left = el("div", "view-column", columns);
  const canvas = el("canvas", "frame", left);
  canvas.width = 640;
  canvas.height = 480;
  const statusLine = el("div", "status-line", left);
  const tracePane = el("pre", "trace", left);

  const right = el("div", "control-column", columns);
  const pendingBox = el("div", "pending", right, "waiting for the robot…");
  const notice = el("div", "notice", right);
  const pad = el("div", "pad", right);
  const buttons: Record<string, HTMLButtonElement> = {};
  for (const direction of DIRECTIONS) {
    buttons[direction] = el("button", `dir dir-${direction}`, pad, direction);
  }
  const actions = el("div", "actions", right);
  buttons.confirm = el("button", "confirm", actions, "Confirm");
  buttons.redo = el("button", "redo", actions, "Redo");
  const twinList = el("ul", "twins", right);

  // ---- state ----
  let vm = initialViewModel();
  let frameImage: HTMLImageElement | null = null;
  let drawnFrameId = -1;

  const ctx = canvas.getContext("2d");

  const drawOverlays = (frame: FrameDoc, twins: TwinDoc[]) => {
    if (!ctx) return;
    for (const twin of twins) {
      const outline = twin.outline_px;
      if (!outline || outline.length < 2) continue;
      ctx.strokeStyle = twin.label === "block" ? "#ffd23f" : "#3fe0a8";
      ctx.lineWidth = 1.5;
      ctx.beginPath();
      ctx.moveTo(outline[0]![0], outline[0]![1]);
      for (const [x, y] of outline.slice(1)) ctx.lineTo(x, y);
      ctx.closePath();
      ctx.stroke();
      ctx.fillStyle = "#e8e8e8";
      ctx.fillText(`${twin.label}#${twin.id}`, outline[0]![0] + 4, outline[0]![1] - 4);
    }
    const tip = frame.tooltip_px;
    if (tip) {
      const [x, y] = tip;
      ctx.strokeStyle = "#ff5470";
      ctx.lineWidth = 1.5;
      ctx.beginPath();
      ctx.moveTo(x - 9, y); ctx.lineTo(x + 9, y);
      ctx.moveTo(x, y - 9); ctx.lineTo(x, y + 9);
      ctx.stroke();
      ctx.beginPath();
      ctx.arc(x, y, 5, 0, Math.PI * 2);
      ctx.stroke();
    }
  };

  const drawAll = () => {
    if (!ctx || !vm.frame || !frameImage) return;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.drawImage(frameImage, 0, 0);
    drawOverlays(vm.frame, vm.twins);
  };

  const loadFrame = (frame: FrameDoc) => {
    const image = new ImageCtor();
    const frameId = frame.frame_id;
    image.onload = () => {
      if (vm.frame && vm.frame.frame_id === frameId) {
        frameImage = image;
        drawnFrameId = frameId;
        drawAll();
      }
    };
    image.src = `data:image/png;base64,${frame.png_base64}`;
  };

  // ---- rendering ----
  const render = () => {
    const live = vm.connection === "live";
    banner.className = live ? "banner hidden" : "banner visible";
    banner.textContent =
      vm.connection === "connecting" ? "connecting…"
      : vm.connection === "reconnecting" ? "connection lost — reconnecting…"
      : vm.connection === "closed" ? "console closed"
      : "";

    const t = vm.trial;
    const trialNo = t.trials ? `${Math.min(t.trialIndex + 1, t.trials)}/${t.trials}` : "—";
    statusLine.textContent =
      `trial ${trialNo} · ${t.state} · ${t.loopMode} · steps ${t.planningSteps}` +
      (t.phase ? ` · ${t.phase}` : "");

    if (vm.pending) {
      const p = vm.pending;
      pendingBox.textContent =
        `after ${p.action_just_completed}` +
        (p.question ? ` — "${p.question}"` : "") +
        ` · tool tip ${mmText(p.tooltip_mm)} · budget ${p.budget_remaining}`;
    } else if (t.state === "done" && t.lastResult) {
      const r = t.lastResult;
      pendingBox.textContent = r.success
        ? `done: success in ${r.planning_steps} steps`
        : `done: ${r.failure_mode} — ${r.failure_reason}`;
    } else {
      pendingBox.textContent = vm.inflight ? "sending…" : "waiting for the robot…";
    }

    const enabled = controlsEnabled(vm);
    const correcting = correctionEnabled(vm);
    buttons.confirm!.disabled = !enabled;
    buttons.redo!.disabled = !correcting;
    for (const direction of DIRECTIONS) buttons[direction]!.disabled = !correcting;

    notice.textContent = vm.notice ?? "";
    notice.className = vm.notice ? "notice visible" : "notice hidden";

    twinList.textContent = "";
    for (const twin of vm.twins) {
      const status = twin.detected ? "detected" : twin.stale ? "stale" : "missing";
      el("li", `twin ${status}`, twinList,
         `#${twin.id} ${twin.label}${twin.color ? ` (${twin.color})` : ""} · ` +
         `${status} · ${mmText(twin.position_mm)}`);
    }

    tracePane.textContent = vm.trace.map(formatTraceLine).join("\n");
    tracePane.scrollTop = tracePane.scrollHeight;

    if (vm.frame) {
      if (vm.frame.frame_id !== drawnFrameId) loadFrame(vm.frame);
      else drawAll();
    }
  };

  const dispatch = (ev: ViewEvent) => {
    vm = reduce(vm, ev);
    render();
  };

  // ---- feedback ----
  const submit = (kind: "confirm" | "adjust" | "redo", direction?: Direction) => {
    // belt and braces on top of the disabled attributes: a stale or
    // busy view never posts, whatever the DOM thinks
    if (!controlsEnabled(vm)) return;
    if (kind !== "confirm" && !correctionEnabled(vm)) return;
    const requestId = vm.pending!.request_id;
    dispatch({ type: "post-sent" });
    post(baseUrl, makeFeedback(kind, requestId, direction))
      .then(() => dispatch({ type: "post-ok", requestId }))
      .catch((error: unknown) => {
        const status = error instanceof ApiError ? error.status : 0;
        const detail = error instanceof ApiError ? error.detail : String(error);
        dispatch({ type: "post-rejected", status, detail });
      });
  };

  buttons.confirm!.addEventListener("click", () => submit("confirm"));
  buttons.redo!.addEventListener("click", () => submit("redo"));
  for (const direction of DIRECTIONS) {
    buttons[direction]!.addEventListener("click", () => submit("adjust", direction));
  }

  // ---- stream ----
  const handle = stream(baseUrl, {
    onEvent: (event) => dispatch({ type: "stream", event }),
    onState: (state) => dispatch({ type: "connection", state }),
    onError: () => { /* transient decode/transport issue; reconnect handles it */ },
  });

  render();
  return {
    elements: { banner, canvas, statusLine, pendingBox, twinList, notice,
                tracePane, buttons },
    viewModel: () => vm,
    dispatch,
    stop: () => handle.close(),
  };
}

// browser bootstrap; tests import buildConsole and skip this
declare global {
  interface Window { supervisorUiNoAutostart?: boolean }
}
if (typeof window !== "undefined" && typeof document !== "undefined") {
  const mount = document.getElementById("app");
  if (mount && !window.supervisorUiNoAutostart) {
    buildConsole(mount, window.location.origin);
  }
}
