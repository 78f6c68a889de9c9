/** A deliberately tiny DOM for running the real console under node:
 * just the surface main.ts touches. Elements track children, classes,
 * listeners, and disabled state; the canvas context records its draw
 * calls; images "decode" on the next microtask.
 */

type Listener = (event: unknown) => void;

export class FakeContext {
  ops: Array<{ op: string; args: unknown[] }> = [];
  strokeStyle = "";
  fillStyle = "";
  lineWidth = 0;

  private record(op: string, ...args: unknown[]): void {
    this.ops.push({ op, args });
  }
  clearRect(...args: unknown[]) { this.record("clearRect", ...args); }
  drawImage(...args: unknown[]) { this.record("drawImage", ...args); }
  beginPath() { this.record("beginPath"); }
  closePath() { this.record("closePath"); }
  moveTo(...args: unknown[]) { this.record("moveTo", ...args); }
  lineTo(...args: unknown[]) { this.record("lineTo", ...args); }
  stroke() { this.record("stroke"); }
  fill() { this.record("fill"); }
  arc(...args: unknown[]) { this.record("arc", ...args); }
  fillText(...args: unknown[]) { this.record("fillText", ...args); }

  count(op: string): number {
    return this.ops.filter((entry) => entry.op === op).length;
  }
}

export class FakeElement {
  children: FakeElement[] = [];
  className = "";
  disabled = false;
  width = 0;
  height = 0;
  scrollTop = 0;
  scrollHeight = 0;
  listeners = new Map<string, Listener[]>();
  context: FakeContext | null = null;
  private text = "";

  constructor(readonly tagName: string) {}

  get textContent(): string {
    return this.text || this.children.map((c) => c.textContent).join("");
  }
  set textContent(value: string) {
    this.text = value;
    this.children = [];
  }

  appendChild(child: FakeElement): FakeElement {
    this.children.push(child);
    return child;
  }

  addEventListener(name: string, listener: Listener): void {
    const slot = this.listeners.get(name) ?? [];
    slot.push(listener);
    this.listeners.set(name, slot);
  }

  click(): void {
    for (const listener of this.listeners.get("click") ?? []) listener({});
  }

  getContext(kind: string): FakeContext | null {
    if (kind !== "2d") return null;
    this.context ??= new FakeContext();
    return this.context;
  }
}

export class FakeDocument {
  created: FakeElement[] = [];
  createElement(tag: string): FakeElement {
    const node = new FakeElement(tag);
    this.created.push(node);
    return node;
  }
}

export class FakeImage {
  onload: (() => void) | null = null;
  loads: string[] = [];
  private source = "";

  get src(): string { return this.source; }
  set src(value: string) {
    this.source = value;
    this.loads.push(value);
    queueMicrotask(() => this.onload?.());
  }
}

export function stubDom() {
  const documentRef = new FakeDocument();
  const root = documentRef.createElement("div");
  return {
    documentRef: documentRef as unknown as Document,
    root: root as unknown as HTMLElement,
    rawRoot: root,
    imageCtor: FakeImage as unknown as new () => HTMLImageElement,
  };
}
