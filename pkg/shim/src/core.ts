/**
 * Subprocess bridge to the core CLI. All numeric work happens in the core;
 * this module only builds argv, runs the process, and parses JSON output.
 */

import { spawnSync } from "node:child_process";

/** Core invocation, e.g. ["genview"] or ["python3", "-m", "genview.cli"]. */
export function coreCommand(): string[] {
  const override = process.env.GENVIEW_CLI;
  if (override && override.trim().length > 0) {
    return override.trim().split(/\s+/);
  }
  return ["genview"];
}

export class CoreError extends Error {
  constructor(
    message: string,
    public readonly exitCode: number,
  ) {
    super(message);
    this.name = "CoreError";
  }
}

export function runCore(args: string[]): string {
  const [cmd, ...prefix] = coreCommand();
  const result = spawnSync(cmd, [...prefix, ...args], {
    encoding: "utf-8",
    maxBuffer: 64 * 1024 * 1024,
  });
  if (result.error) {
    throw new CoreError(`failed to launch core CLI: ${result.error.message}`, -1);
  }
  if (result.status !== 0) {
    const stderr = (result.stderr ?? "").trim();
    throw new CoreError(
      `core CLI exited ${result.status}: ${stderr || "(no stderr)"}`,
      result.status ?? -1,
    );
  }
  return result.stdout;
}

export function runCoreJson<T>(args: string[]): T {
  return JSON.parse(runCore(["--json", ...args])) as T;
}
