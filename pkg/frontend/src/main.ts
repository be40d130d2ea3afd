/** Application wiring: load queue, keyboard-first review loop, submit, and
 * the agreement dashboard.  Server state is the only persistence. */

import { AnnotationApi } from "./api.js";
import { formatAgreement, formatProgress } from "./format.js";
import {
  buildPairView,
  markSubmitted,
  nextUnverified,
  setDecision,
  toggleCell,
  verdictBody,
} from "./state.js";
import {
  errorBanner,
  infoBanner,
  renderDescription,
  renderSentences,
  renderSubmit,
  renderTable,
} from "./render.js";
import { PairSummary, PairView, SentenceDecision } from "./types.js";

const api = new AnnotationApi();

interface AppState {
  annotatorId: string;
  summaries: PairSummary[];
  view: PairView | null;
  cursor: number;
  message: string;
}

const state: AppState = {
  annotatorId: localStorage.getItem("annotator") ?? "",
  summaries: [],
  view: null,
  cursor: 0,
  message: "",
};

function byId(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node;
}

function redraw(): void {
  const root = byId("pair-root");
  root.replaceChildren();
  const banner = byId("banner");
  banner.replaceChildren();
  if (state.message) {
    banner.appendChild(
      state.message.startsWith("error") ? errorBanner(state.message) : infoBanner(state.message),
    );
  }
  const verified = state.summaries.filter((s) => s.verified).length;
  byId("progress").textContent = formatProgress(verified, state.summaries.length);
  if (!state.view) return;

  const handlers = {
    onToggleCell(row: number, col: number) {
      state.view = toggleCell(state.view!, row, col);
      redraw();
    },
    onDecision(sentenceId: string, decision: SentenceDecision) {
      state.view = setDecision(state.view!, sentenceId, decision);
      redraw();
    },
    onSubmit() {
      void submit();
    },
  };
  byId("pair-title").textContent = state.view.pairId;
  root.appendChild(renderTable(state.view, handlers));
  root.appendChild(renderSentences(state.view, state.cursor, handlers));
  root.appendChild(renderDescription(state.view));
  root.appendChild(renderSubmit(state.view, handlers));
}

async function loadPair(id: string): Promise<void> {
  try {
    const detail = await api.getPair(id);
    state.view = buildPairView(detail, state.annotatorId);
    state.cursor = 0;
    state.message = "";
  } catch (err) {
    state.message = `error loading ${id}: ${(err as Error).message}`;
    state.view = null;
  }
  redraw();
}

async function refreshSummaries(): Promise<void> {
  state.summaries = await api.listPairs();
}

async function submit(): Promise<void> {
  const view = state.view;
  if (!view || !view.dirty) return;
  try {
    await api.postVerdict(view.pairId, verdictBody(view, state.annotatorId));
    state.view = markSubmitted(view);
    await refreshSummaries();
    state.message = `submitted ${view.pairId}`;
    const verified = new Set(
      state.summaries.filter((s) => s.annotators.includes(state.annotatorId)).map((s) => s.id),
    );
    const next = nextUnverified(state.summaries.map((s) => s.id), verified, view.pairId);
    if (next) {
      await loadPair(next);
      return;
    }
  } catch (err) {
    // keep local edits; the reviewer can retry
    state.message = `error submitting: ${(err as Error).message} (edits kept)`;
  }
  redraw();
}

function moveCursor(delta: number): void {
  if (!state.view) return;
  const n = state.view.sentences.length;
  if (n === 0) return;
  state.cursor = (state.cursor + delta + n) % n;
  redraw();
}

function decideAtCursor(decision: SentenceDecision): void {
  if (!state.view) return;
  const sentence = state.view.sentences[state.cursor];
  if (!sentence) return;
  state.view = setDecision(state.view, sentence.id, decision);
  moveCursor(1);
}

function bindKeys(): void {
  document.addEventListener("keydown", (event) => {
    if ((event.target as HTMLElement).tagName === "INPUT") return;
    switch (event.key) {
      case "j": moveCursor(1); break;
      case "k": moveCursor(-1); break;
      case "a": decideAtCursor("accepted"); break;
      case "r": decideAtCursor("rejected"); break;
      case "s": void submit(); break;
      default: return;
    }
    event.preventDefault();
  });
}

async function showAgreement(): Promise<void> {
  const a = (byId("agreement-a") as HTMLInputElement).value.trim();
  const b = (byId("agreement-b") as HTMLInputElement).value.trim();
  const out = byId("agreement-result");
  if (!a || !b) {
    out.textContent = "enter two annotator ids";
    return;
  }
  try {
    out.textContent = formatAgreement(await api.getAgreement(a, b));
  } catch (err) {
    out.textContent = `no agreement available: ${(err as Error).message}`;
  }
}

async function start(): Promise<void> {
  if (!state.annotatorId) {
    state.annotatorId = window.prompt("annotator id?", "ann1") ?? "ann1";
  }
  localStorage.setItem("annotator", state.annotatorId);
  byId("annotator").textContent = state.annotatorId;
  const select = byId("pair-select") as HTMLSelectElement;

  await refreshSummaries();
  select.replaceChildren(
    ...state.summaries.map((s) => {
      const option = document.createElement("option");
      option.value = s.id;
      option.textContent = `${s.id} (${s.split}${s.verified ? ", verified" : ""})`;
      return option;
    }),
  );
  select.onchange = () => void loadPair(select.value);
  (byId("agreement-show") as HTMLButtonElement).onclick = () => void showAgreement();
  bindKeys();
  if (state.summaries.length > 0) {
    await loadPair(state.summaries[0].id);
  } else {
    state.message = "error: the service returned no pairs";
    redraw();
  }
}

void start();
