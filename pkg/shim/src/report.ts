/**
 * Wire-format report. One of these is printed as a single JSON line between
 * the sentinel lines on stdout; everything outside the frame is noise the
 * consumer ignores.
 */

export const SENTINEL_BEGIN = "===CEXREPAIR_BEGIN===";
export const SENTINEL_END = "===CEXREPAIR_END===";

export type ShimStatus = "sat" | "unsat" | "unknown" | "runtime_error" | "timeout";

export const VALID_STATUSES: ReadonlySet<string> = new Set([
  "sat",
  "unsat",
  "unknown",
]);

/** Scalar values a model may carry. Integers with |v| >= 2^53 arrive as
 * decimal strings from the harvest step, so JSON parsing never loses
 * precision on the Node side. */
export type ModelValue = number | boolean | string;

export interface ShimReport {
  status: ShimStatus;
  results?: Record<string, ModelValue>[];
  stderr: string;
  elapsed_ms: number;
}

export function serializeReport(report: ShimReport): string {
  const payload: Record<string, unknown> = {
    status: report.status,
    stderr: report.stderr,
    elapsed_ms: Math.round(report.elapsed_ms),
  };
  if (report.status === "sat" && report.results && report.results.length > 0) {
    payload.results = report.results;
  }
  return JSON.stringify(payload);
}

export function frameReport(report: ShimReport): string {
  return `${SENTINEL_BEGIN}\n${serializeReport(report)}\n${SENTINEL_END}\n`;
}

/** Parse a framed report back out of captured stdout (round-trip helper,
 * mirrors what the consumer does). */
export function parseFramed(stdout: string): ShimReport {
  const lines = stdout.split(/\r?\n/);
  const begin = lines.indexOf(SENTINEL_BEGIN);
  if (begin < 0) {
    throw new Error("missing begin sentinel");
  }
  const end = lines.indexOf(SENTINEL_END, begin + 1);
  if (end < 0) {
    throw new Error("missing end sentinel");
  }
  const body = lines.slice(begin + 1, end).join("\n").trim();
  const parsed = JSON.parse(body) as ShimReport;
  if (parsed.results === undefined && parsed.status === "sat") {
    parsed.results = [];
  }
  return parsed;
}
