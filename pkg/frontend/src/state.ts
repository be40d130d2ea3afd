/** Pure review-state transitions: the view is a function of the last server
 * payload plus the local edit log, so replaying edits after a reload
 * reproduces the submitted state exactly. */

import {
  cellKey,
  PairDetail,
  PairView,
  SentenceDecision,
  VerdictPayload,
} from "./types.js";

/** Build the initial view from a server payload; auto highlights pre-toggled.
 * If the annotator already has a verdict, resume from it. */
export function buildPairView(detail: PairDetail, annotatorId: string): PairView {
  const prior = detail.verdicts?.[annotatorId];
  const highlighted = new Set<string>(
    (prior ? prior.highlight_set : detail.highlights).map(([r, c]) => cellKey(r, c)),
  );
  const decisions = new Map<string, SentenceDecision>();
  const priorDecisions = new Map<string, boolean>(prior ? prior.kb_decisions : []);
  for (const sentence of detail.kb) {
    if (priorDecisions.has(sentence.id)) {
      decisions.set(sentence.id, priorDecisions.get(sentence.id) ? "accepted" : "rejected");
    } else {
      decisions.set(sentence.id, "auto");
    }
  }
  return {
    pairId: detail.id,
    caption: detail.table.caption,
    nRows: detail.table.n_rows,
    nCols: detail.table.n_cols,
    cells: detail.table.cells,
    description: detail.description,
    highlighted,
    decisions,
    sentences: detail.kb,
    dirty: false,
  };
}

export function toggleCell(view: PairView, row: number, col: number): PairView {
  const key = cellKey(row, col);
  if (!view.cells.some((c) => c.row === row && c.col === col)) {
    return view; // not a real cell; ignore
  }
  const highlighted = new Set(view.highlighted);
  if (highlighted.has(key)) {
    highlighted.delete(key);
  } else {
    highlighted.add(key);
  }
  return { ...view, highlighted, dirty: true };
}

export function setDecision(
  view: PairView,
  sentenceId: string,
  decision: SentenceDecision,
): PairView {
  if (!view.decisions.has(sentenceId)) {
    return view;
  }
  const decisions = new Map(view.decisions);
  decisions.set(sentenceId, decision);
  return { ...view, decisions, dirty: true };
}

/** Serialize the current view as a verdict body.  Sentences still marked
 * auto are submitted as kept, mirroring the reviewer default. */
export function verdictBody(view: PairView, annotatorId: string): VerdictPayload {
  const kb_decisions: [string, boolean][] = view.sentences.map((s) => [
    s.id,
    view.decisions.get(s.id) !== "rejected",
  ]);
  const highlight_set: [number, number][] = [...view.highlighted]
    .map((key) => key.split(",").map(Number) as [number, number])
    .sort((a, b) => a[0] - b[0] || a[1] - b[1]);
  return { annotator_id: annotatorId, kb_decisions, highlight_set };
}

export function markSubmitted(view: PairView): PairView {
  return { ...view, dirty: false };
}

/** Id of the next pair lacking a verdict, scanning forward from `currentId`. */
export function nextUnverified(
  ids: string[],
  verified: Set<string>,
  currentId: string,
): string | null {
  const start = Math.max(0, ids.indexOf(currentId));
  for (let step = 1; step <= ids.length; step += 1) {
    const candidate = ids[(start + step) % ids.length];
    if (!verified.has(candidate) && candidate !== currentId) {
      return candidate;
    }
  }
  return null;
}
