import type { AssistantTurn, Turn } from "./state";
import type { SourceRef } from "./types";

export function escapeHtml(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

const MARKER_RE = /\[(\d+)\]/g;

/**
 * Answer text with inline [n] markers turned into links that scroll to the
 * matching source card. Closure rule: a marker becomes a link only when a
 * source with that marker exists, so no rendered anchor can dangle; stray
 * bracketed numbers stay plain text.
 */
export function renderAnswerHtml(text: string, sources: SourceRef[], idPrefix: string): string {
  const known = new Set(sources.map((s) => s.marker));
  return escapeHtml(text).replace(MARKER_RE, (whole, digits: string) => {
    const marker = Number(digits);
    if (!known.has(marker)) return whole;
    return `<a class="cite" href="#${idPrefix}-src-${marker}">[${marker}]</a>`;
  });
}

export function renderSourceCardsHtml(
  sources: SourceRef[],
  idPrefix: string,
  summaryFor: (reportId: string) => string = () => "",
): string {
  if (sources.length === 0) return "";
  const cards = sources.map((s) => {
    const meta = [s.company, s.date, s.report_type].filter(Boolean).map(escapeHtml).join(" · ");
    const summary = summaryFor(s.report_id);
    return (
      `<div class="source-card" id="${idPrefix}-src-${s.marker}">` +
      `<span class="source-marker">[${s.marker}]</span> ` +
      `<span class="source-title">${escapeHtml(s.title || s.report_id)}</span>` +
      (meta ? `<div class="source-meta">${meta}</div>` : "") +
      (summary ? `<div class="source-summary">${escapeHtml(summary)}</div>` : "") +
      `</div>`
    );
  });
  return `<div class="source-panel">${cards.join("")}</div>`;
}

export function renderNoAnswerHtml(text: string): string {
  return `<div class="no-answer-banner">${escapeHtml(text)}</div>`;
}

function renderAssistantHtml(
  turn: AssistantTurn,
  idPrefix: string,
  summaryFor: (reportId: string) => string,
): string {
  if (turn.status === "failed") {
    return (
      `<div class="bubble assistant failed">` +
      `<div class="bubble-text">${escapeHtml(turn.text)}</div>` +
      `<div class="turn-error">Connection lost before the answer finished.` +
      ` <button class="retry" data-retry="1">Retry</button></div>` +
      `</div>`
    );
  }
  if (turn.status === "done" && turn.noAnswer) {
    // informational state: no source panel, distinct styling
    return `<div class="bubble assistant">${renderNoAnswerHtml(turn.text)}</div>`;
  }
  const streaming = turn.status === "streaming" ? `<span class="cursor">▋</span>` : "";
  return (
    `<div class="bubble assistant">` +
    `<div class="bubble-text">${renderAnswerHtml(turn.text, turn.sources, idPrefix)}${streaming}</div>` +
    renderSourceCardsHtml(turn.sources, idPrefix, summaryFor) +
    `</div>`
  );
}

export function renderTurnHtml(
  turn: Turn,
  index: number,
  summaryFor: (reportId: string) => string = () => "",
): string {
  if (turn.role === "user") {
    return `<div class="bubble user"><div class="bubble-text">${escapeHtml(turn.text)}</div></div>`;
  }
  return renderAssistantHtml(turn, `t${index}`, summaryFor);
}
