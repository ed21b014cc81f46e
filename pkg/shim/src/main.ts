/**
 * CLI entry point: cexrepair-shim --script <path> --timeout <sec>
 *
 * The report always goes to stdout between the sentinel lines and the
 * process exits 0 once a report was printed; a nonzero exit means the shim
 * itself failed (bad arguments, unreadable script, missing interpreter) and
 * the caller should treat the runner as unavailable.
 */

import * as fs from "node:fs";

import { frameReport } from "./report";
import { executeScript } from "./runner";

interface CliArgs {
  script: string;
  timeout: number;
}

export function parseArgs(argv: string[]): CliArgs {
  let script: string | undefined;
  let timeout = 60;
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--script") {
      script = argv[++i];
    } else if (arg === "--timeout") {
      const parsed = Number(argv[++i]);
      if (!Number.isFinite(parsed) || parsed <= 0) {
        throw new Error(`invalid --timeout value: ${argv[i]}`);
      }
      timeout = parsed;
    } else if (arg === "--help" || arg === "-h") {
      throw new Error(
        "usage: cexrepair-shim --script <path> [--timeout <seconds>]",
      );
    } else {
      throw new Error(`unknown argument: ${arg}`);
    }
  }
  if (!script) {
    throw new Error("missing required --script <path>");
  }
  return { script, timeout };
}

export async function main(argv: string[]): Promise<number> {
  let args: CliArgs;
  try {
    args = parseArgs(argv);
  } catch (err) {
    process.stderr.write(`${String(err instanceof Error ? err.message : err)}\n`);
    return 2;
  }

  let scriptText: string;
  try {
    scriptText = fs.readFileSync(args.script, "utf-8");
  } catch (err) {
    process.stderr.write(`cannot read script: ${String(err)}\n`);
    return 2;
  }

  try {
    const report = await executeScript(scriptText, args.timeout);
    process.stdout.write(frameReport(report));
    return 0;
  } catch (err) {
    process.stderr.write(`shim failure: ${String(err)}\n`);
    return 3;
  }
}
