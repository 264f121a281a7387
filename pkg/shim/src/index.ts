/**
 * Host-language bridge to the genview core: adaptive generation policy and
 * pair-quality scoring for external pretraining pipelines.
 *
 * Every function marshals plain numeric arrays to the core CLI and returns
 * its output untouched, so results are identical to driving the CLI by
 * hand. Values crossing the binary container are f32 on the wire; values
 * crossing JSON keep full f64 precision.
 */

import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import {
  FeatureMap,
  decodeContainer,
  encodeContainer,
  vectorMap,
} from "./container.js";
import { CoreError, runCore, runCoreJson } from "./core.js";

export { CoreError } from "./core.js";
export type { FeatureMap } from "./container.js";
export { encodeContainer, decodeContainer, vectorMap } from "./container.js";

export interface DirectionSpec {
  /** Unit foreground direction of length k. */
  direction: ArrayLike<number>;
  /** Token-mean center; zeros when omitted. */
  center?: ArrayLike<number>;
  sampleCount?: number;
}

export interface PairScore {
  pairId: string;
  sPrimary: number;
  sBackground: number;
  q: number;
  weight: number;
}

export interface CaptionComplexity {
  score: number;
  guidanceScale: number;
}

function withTempDir<T>(fn: (dir: string) => T): T {
  const dir = mkdtempSync(join(tmpdir(), "genview-shim-"));
  try {
    return fn(dir);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}

function checkMap(map: FeatureMap, k: number, what: string): void {
  if (map.k !== k) {
    throw new RangeError(`${what} has k=${map.k}, expected ${k}`);
  }
  if (map.data.length !== map.h * map.w * map.k) {
    throw new RangeError(`${what} data length does not match h*w*k`);
  }
}

function writeDirection(dir: string, spec: DirectionSpec): string {
  const direction = Array.from(spec.direction);
  const center = spec.center
    ? Array.from(spec.center)
    : new Array<number>(direction.length).fill(0);
  if (center.length !== direction.length) {
    throw new RangeError("direction and center must share length");
  }
  const path = join(dir, "direction.json");
  writeFileSync(
    path,
    JSON.stringify({
      version: 1,
      k: direction.length,
      center,
      direction,
      sample_count: spec.sampleCount ?? 2,
    }),
  );
  return path;
}

/** Noise level for a foreground proportion p in [0, 1]. */
export function noiseLevel(p: number): number {
  return runCoreJson<{ noise_level: number }>(["plan", "--p", String(p)])
    .noise_level;
}

/** Guidance scale for a complexity score in {1, 2, 3, 4}. */
export function guidanceScale(score: number): number {
  return runCoreJson<{ guidance_scale: number }>([
    "plan",
    "--score",
    String(score),
  ]).guidance_scale;
}

/** Heuristic caption complexity plus the derived guidance scale. */
export function captionComplexity(caption: string): CaptionComplexity {
  const out = runCoreJson<{ score: number; guidance_scale: number }>([
    "plan",
    "--caption",
    caption,
  ]);
  return { score: out.score, guidanceScale: out.guidance_scale };
}

/**
 * Forward-diffuse an embedding by `level` steps with the core's schedule.
 * The embedding crosses the binary container, so inputs are quantized to
 * f32; the call is deterministic for a fixed seed.
 */
export function perturbEmbedding(
  embedding: ArrayLike<number>,
  level: number,
  seed = 0,
): Float64Array {
  return withTempDir((dir) => {
    const src = join(dir, "embedding.gvfm");
    const dst = join(dir, "perturbed.gvfm");
    writeFileSync(src, encodeContainer(vectorMap(embedding)));
    runCore([
      "--seed",
      String(seed),
      "plan",
      "--embedding",
      src,
      "--noise-level",
      String(level),
      "--out",
      dst,
    ]);
    const out = decodeContainer(readFileSync(dst));
    return out.data as Float64Array;
  });
}

/** Softmax weights for a batch of raw quality scores. */
export function normalizeWeights(scores: ArrayLike<number>): number[] {
  const csv = Array.from(scores, (s) => Number(s).toString()).join(",");
  return runCoreJson<{ weights: number[] }>(["score", "--raw-scores", csv])
    .weights;
}

interface WeightRecord {
  pair_id: string;
  s_primary: number;
  s_background: number;
  q: number;
  weight: number;
}

function runScore(
  dir: string,
  records: object[],
  perMapPca: boolean,
): PairScore[] {
  const pairsPath = join(dir, "pairs.jsonl");
  const outPath = join(dir, "weights.jsonl");
  writeFileSync(
    pairsPath,
    records.map((r) => JSON.stringify(r)).join("\n") + "\n",
  );
  const args = [
    "score",
    "--pairs",
    pairsPath,
    "--features-dir",
    dir,
    "--direction",
    join(dir, "direction.json"),
    "--out",
    outPath,
  ];
  if (perMapPca) {
    args.push("--per-map-pca");
  }
  runCore(args);
  return readFileSync(outPath, "utf-8")
    .split("\n")
    .filter((line) => line.trim().length > 0)
    .map((line) => {
      const rec = JSON.parse(line) as WeightRecord;
      return {
        pairId: rec.pair_id,
        sPrimary: rec.s_primary,
        sBackground: rec.s_background,
        q: rec.q,
        weight: rec.weight,
      };
    });
}

/**
 * Score image-image pairs (foreground consistency vs background redundancy)
 * and return batch-normalized weights. Output is identical to the core
 * CLI's weights.jsonl on the same inputs.
 */
export function scoreImagePairs(
  pairs: ReadonlyArray<{ a: FeatureMap; b: FeatureMap }>,
  direction: DirectionSpec | ArrayLike<number>,
  perMapPca = false,
): PairScore[] {
  const spec: DirectionSpec =
    "direction" in (direction as DirectionSpec)
      ? (direction as DirectionSpec)
      : { direction: direction as ArrayLike<number> };
  const k = spec.direction.length;
  return withTempDir((dir) => {
    writeDirection(dir, spec);
    const records = pairs.map((pair, i) => {
      checkMap(pair.a, k, `pair ${i} map a`);
      checkMap(pair.b, k, `pair ${i} map b`);
      const a = `p${i}_a.gvfm`;
      const b = `p${i}_b.gvfm`;
      writeFileSync(join(dir, a), encodeContainer(pair.a));
      writeFileSync(join(dir, b), encodeContainer(pair.b));
      return { pair_id: `p${i}`, a, b };
    });
    return runScore(dir, records, perMapPca);
  });
}

/**
 * Score image-text pairs (cross-modal alignment vs background redundancy)
 * with weights normalized over the batch.
 */
export function scoreImageTextPairs(
  pairs: ReadonlyArray<{
    raw: FeatureMap;
    view: FeatureMap;
    text: ArrayLike<number>;
  }>,
  direction: DirectionSpec | ArrayLike<number>,
  perMapPca = false,
): PairScore[] {
  const spec: DirectionSpec =
    "direction" in (direction as DirectionSpec)
      ? (direction as DirectionSpec)
      : { direction: direction as ArrayLike<number> };
  const k = spec.direction.length;
  return withTempDir((dir) => {
    writeDirection(dir, spec);
    const records = pairs.map((pair, i) => {
      checkMap(pair.raw, k, `pair ${i} raw map`);
      checkMap(pair.view, k, `pair ${i} view map`);
      if (pair.text.length !== k) {
        throw new RangeError(`pair ${i} text embedding has wrong length`);
      }
      const raw = `p${i}_raw.gvfm`;
      const view = `p${i}_view.gvfm`;
      const text = `p${i}_text.gvfm`;
      writeFileSync(join(dir, raw), encodeContainer(pair.raw));
      writeFileSync(join(dir, view), encodeContainer(pair.view));
      writeFileSync(join(dir, text), encodeContainer(vectorMap(pair.text)));
      return { pair_id: `p${i}`, raw, view, text };
    });
    return runScore(dir, records, perMapPca);
  });
}
