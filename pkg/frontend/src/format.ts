import { AgreementPayload } from "./types.js";

/** "66.7% / 70.6% on 100 pairs" style rendering of served fractions. */
export function formatAgreement(report: AgreementPayload): string {
  const pct = (fraction: number) => `${(fraction * 100).toFixed(1)}%`;
  const unit = report.n_samples === 1 ? "pair" : "pairs";
  return `cells ${pct(report.cell_agreement)} / knowledge ${pct(report.kb_agreement)} on ${report.n_samples} ${unit}`;
}

export function formatProgress(done: number, total: number): string {
  return `${done}/${total} pairs verified`;
}
