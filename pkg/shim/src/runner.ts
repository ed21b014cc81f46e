/**
 * Executes one solver script in a fresh child interpreter and turns the
 * protocol globals into a wire report.
 *
 * The globals are harvested by appending a serialization epilogue to the
 * script rather than introspecting a shared interpreter: if the script
 * completes, the epilogue writes `__z3_cex_status__` and `__z3_cex_results__`
 * to a result file; if it raises, the epilogue never runs, the result file
 * is absent, and the traceback on stderr becomes a runtime_error report.
 * Scripts that print noise cannot corrupt the report because the report
 * never travels through the child's stdout.
 */

import { spawn } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { ShimReport, ModelValue, VALID_STATUSES } from "./report";

const STDERR_CAP = 64 * 1024;
export const GRACE_SECONDS = 2;

/** Python code appended after the script body. Values outside the float-safe
 * integer range are stringified to survive JSON parsing on the Node side. */
const EPILOGUE = `

# --- appended by cexrepair-shim: harvest protocol globals ---
def __cexrepair_emit__():
    import json, os
    def coerce(value):
        if isinstance(value, bool):
            return value
        if isinstance(value, int):
            return value if -(2**53) < value < 2**53 else str(value)
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            return value
        return str(value)
    payload = {"status": globals().get("__z3_cex_status__")}
    results = globals().get("__z3_cex_results__")
    if isinstance(results, list):
        clean = []
        for item in results:
            if isinstance(item, dict):
                clean.append({str(k): coerce(v) for k, v in item.items()})
        payload["results"] = clean
    with open(os.environ["CEXREPAIR_RESULT_PATH"], "w") as fh:
        json.dump(payload, fh)
__cexrepair_emit__()
`;

const CREDENTIAL_PATTERN = /(API_KEY|SECRET|TOKEN|PASSWORD|CREDENTIAL)/i;

export function scrubbedEnv(resultPath: string): NodeJS.ProcessEnv {
  const env: NodeJS.ProcessEnv = {};
  for (const [key, value] of Object.entries(process.env)) {
    if (CREDENTIAL_PATTERN.test(key)) continue;
    if (key.startsWith("CEXREPAIR_LLM")) continue;
    env[key] = value;
  }
  env.CEXREPAIR_RESULT_PATH = resultPath;
  return env;
}

export interface ExecuteOptions {
  /** Interpreter to run the script with; defaults to $CEXREPAIR_SHIM_PYTHON or python3. */
  python?: string;
}

interface ChildOutcome {
  timedOut: boolean;
  stderr: string;
  exitCode: number | null;
}

function runChild(
  python: string,
  harnessPath: string,
  cwd: string,
  env: NodeJS.ProcessEnv,
  timeoutSeconds: number,
): Promise<ChildOutcome> {
  return new Promise((resolve, reject) => {
    const child = spawn(python, [harnessPath], {
      cwd,
      env,
      stdio: ["ignore", "ignore", "pipe"],
    });
    let stderr = "";
    let timedOut = false;
    let settled = false;

    const termTimer = setTimeout(() => {
      timedOut = true;
      child.kill("SIGTERM");
    }, timeoutSeconds * 1000);
    const killTimer = setTimeout(() => {
      timedOut = true;
      child.kill("SIGKILL");
    }, (timeoutSeconds + GRACE_SECONDS) * 1000);

    child.stderr?.on("data", (chunk: Buffer) => {
      if (stderr.length < STDERR_CAP) {
        stderr += chunk.toString("utf-8");
      }
    });
    child.on("error", (err) => {
      if (settled) return;
      settled = true;
      clearTimeout(termTimer);
      clearTimeout(killTimer);
      reject(err);
    });
    child.on("close", (code) => {
      if (settled) return;
      settled = true;
      clearTimeout(termTimer);
      clearTimeout(killTimer);
      resolve({ timedOut, stderr: stderr.slice(0, STDERR_CAP), exitCode: code });
    });
  });
}

export async function executeScript(
  scriptText: string,
  timeoutSeconds: number,
  options: ExecuteOptions = {},
): Promise<ShimReport> {
  const python =
    options.python ?? process.env.CEXREPAIR_SHIM_PYTHON ?? "python3";
  const started = Date.now();
  const scratch = fs.mkdtempSync(path.join(os.tmpdir(), "cexrepair-shim-"));
  try {
    const harnessPath = path.join(scratch, "harness.py");
    const resultPath = path.join(scratch, "result.json");
    fs.writeFileSync(harnessPath, scriptText + EPILOGUE, "utf-8");

    const outcome = await runChild(
      python,
      harnessPath,
      scratch,
      scrubbedEnv(resultPath),
      timeoutSeconds,
    );
    const elapsed = Date.now() - started;

    if (outcome.timedOut) {
      return {
        status: "timeout",
        stderr: outcome.stderr,
        elapsed_ms: elapsed,
      };
    }

    if (!fs.existsSync(resultPath)) {
      return {
        status: "runtime_error",
        stderr:
          outcome.stderr ||
          `script exited with code ${outcome.exitCode} without reporting`,
        elapsed_ms: elapsed,
      };
    }

    let payload: { status?: unknown; results?: unknown };
    try {
      payload = JSON.parse(fs.readFileSync(resultPath, "utf-8"));
    } catch (err) {
      return {
        status: "runtime_error",
        stderr: `harvested result is not valid JSON: ${String(err)}`,
        elapsed_ms: elapsed,
      };
    }

    const status = payload.status;
    if (typeof status !== "string" || !VALID_STATUSES.has(status)) {
      return {
        status: "runtime_error",
        stderr: `script set __z3_cex_status__ to ${JSON.stringify(
          status ?? null,
        )}, expected "sat", "unsat", or "unknown"`,
        elapsed_ms: elapsed,
      };
    }

    const report: ShimReport = {
      status: status as ShimReport["status"],
      stderr: outcome.stderr,
      elapsed_ms: elapsed,
    };
    if (status === "sat" && Array.isArray(payload.results)) {
      report.results = payload.results as Record<string, ModelValue>[];
    }
    return report;
  } finally {
    fs.rmSync(scratch, { recursive: true, force: true });
  }
}
