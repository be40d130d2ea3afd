/** Payload shapes served by the annotation service API. */

export interface CellPayload {
  row: number;
  col: number;
  attribute: string;
  value: string;
  is_header: boolean;
}

export interface PairSummary {
  id: string;
  split: string;
  n_cells: number;
  n_kb: number;
  annotators: string[];
  verified: boolean;
}

export interface KbSentencePayload {
  id: string;
  text: string;
  status: string;
}

export interface VerdictPayload {
  pair_id?: string;
  annotator_id: string;
  kb_decisions: [string, boolean][];
  highlight_set: [number, number][];
  timestamp?: number;
}

export interface PairDetail {
  id: string;
  table: {
    caption: string;
    n_rows: number;
    n_cols: number;
    cells: CellPayload[];
  };
  highlights: [number, number][];
  kb: KbSentencePayload[];
  description: string;
  split: string;
  verdicts: Record<string, VerdictPayload>;
}

export interface AgreementPayload {
  n_samples: number;
  cell_agreement: number;
  kb_agreement: number;
}

export type SentenceDecision = "auto" | "accepted" | "rejected";

/** Client-side review state for one pair. */
export interface PairView {
  pairId: string;
  caption: string;
  nRows: number;
  nCols: number;
  cells: CellPayload[];
  description: string;
  /** cell keys "row,col" currently toggled on */
  highlighted: Set<string>;
  /** sentence id -> tri-state decision */
  decisions: Map<string, SentenceDecision>;
  sentences: KbSentencePayload[];
  /** true iff local edits differ from the loaded server state */
  dirty: boolean;
}

export const cellKey = (row: number, col: number): string => `${row},${col}`;
