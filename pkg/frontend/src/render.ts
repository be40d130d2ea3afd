/** DOM construction for the review screen.  Rendering is replace-on-change:
 * each update rebuilds the affected container from the current PairView. */

import { cellKey, PairView, SentenceDecision } from "./types.js";

export interface Handlers {
  onToggleCell(row: number, col: number): void;
  onDecision(sentenceId: string, decision: SentenceDecision): void;
  onSubmit(): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderTable(view: PairView, handlers: Handlers): HTMLElement {
  const wrap = el("div", "table-panel");
  wrap.appendChild(el("div", "caption", view.caption || "(no caption)"));
  const table = el("table", "grid");
  const byPos = new Map(view.cells.map((c) => [cellKey(c.row, c.col), c]));
  for (let r = 0; r < view.nRows; r += 1) {
    const tr = el("tr");
    for (let c = 0; c < view.nCols; c += 1) {
      const cell = byPos.get(cellKey(r, c));
      const td = el("td", cell ? "cell" : "cell empty");
      if (cell) {
        td.appendChild(el("span", "attr", cell.attribute));
        td.appendChild(el("span", "value", cell.value));
        if (view.highlighted.has(cellKey(r, c))) td.classList.add("highlighted");
        td.dataset.pos = cellKey(r, c);
        td.onclick = () => handlers.onToggleCell(r, c);
      }
      tr.appendChild(td);
    }
    table.appendChild(tr);
  }
  wrap.appendChild(table);
  return wrap;
}

export function renderSentences(
  view: PairView,
  cursor: number,
  handlers: Handlers,
): HTMLElement {
  const wrap = el("div", "kb-panel");
  wrap.appendChild(el("h2", undefined, `knowledge sentences (${view.sentences.length})`));
  const list = el("ul", "kb-list");
  view.sentences.forEach((sentence, index) => {
    const decision = view.decisions.get(sentence.id) ?? "auto";
    const item = el("li", `kb-row ${decision}${index === cursor ? " cursor" : ""}`);
    item.appendChild(el("span", "kb-text", sentence.text));
    const controls = el("span", "kb-controls");
    const accept = el("button", "accept", "accept");
    accept.onclick = () => handlers.onDecision(sentence.id, "accepted");
    const reject = el("button", "reject", "reject");
    reject.onclick = () => handlers.onDecision(sentence.id, "rejected");
    controls.append(accept, el("span", "status", decision), reject);
    item.appendChild(controls);
    list.appendChild(item);
  });
  wrap.appendChild(list);
  return wrap;
}

export function renderDescription(view: PairView): HTMLElement {
  const wrap = el("div", "description-panel");
  wrap.appendChild(el("h2", undefined, "reference description"));
  wrap.appendChild(el("p", "description", view.description));
  return wrap;
}

export function renderSubmit(view: PairView, handlers: Handlers): HTMLElement {
  const button = el("button", "submit", view.dirty ? "submit verdict" : "no unsaved edits");
  button.disabled = !view.dirty;
  button.onclick = () => handlers.onSubmit();
  return button;
}

export function errorBanner(message: string): HTMLElement {
  return el("div", "error-banner", message);
}

export function infoBanner(message: string): HTMLElement {
  return el("div", "info-banner", message);
}
