/**
 * Deterministic synthetic exporters, used when no model weights are
 * available (--stub). Outputs depend only on (seed, image id), so repeated
 * exports are byte-identical and tests need no network or GPU.
 */

import { ImageFeatures, PairMatches } from './format.js';
import { gaussian, rngFor } from './rng.js';

export interface StubExtractorOptions {
  numKeypoints: number;
  descriptorDim: number;
  globalDim: number;
  width: number;
  height: number;
  seed: number;
}

export const STUB_DEFAULTS: StubExtractorOptions = {
  numKeypoints: 64,
  descriptorDim: 128,
  globalDim: 256,
  width: 640,
  height: 480,
  seed: 0,
};

export function stubFeatures(
  imageId: string,
  opts: StubExtractorOptions,
): ImageFeatures {
  const rng = rngFor(opts.seed, `features:${imageId}`);
  const n = opts.numKeypoints;
  const keypoints = new Float64Array(n * 2);
  const descriptors = new Float64Array(n * opts.descriptorDim);
  const scores = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    keypoints[2 * i] = rng() * opts.width;
    keypoints[2 * i + 1] = rng() * opts.height;
    scores[i] = rng();
    for (let d = 0; d < opts.descriptorDim; d++) {
      descriptors[i * opts.descriptorDim + d] = gaussian(rng);
    }
  }
  const global = new Float64Array(opts.globalDim);
  let norm = 0;
  for (let d = 0; d < opts.globalDim; d++) {
    global[d] = gaussian(rng);
    norm += global[d] * global[d];
  }
  norm = Math.sqrt(norm);
  for (let d = 0; d < opts.globalDim; d++) global[d] /= norm;
  return { imageId, keypoints, descriptors, scores, global };
}

export interface StubMatcherOptions {
  source: string;
  dropout: number; // probability of dropping each tentative match
  seed: number;
}

export function stubMatches(
  imageA: string,
  numKeypointsA: number,
  imageB: string,
  numKeypointsB: number,
  opts: StubMatcherOptions,
): PairMatches {
  const rng = rngFor(opts.seed, `matches:${opts.source}:${imageA}:${imageB}`);
  const m = Math.min(numKeypointsA, numKeypointsB);
  const idx: number[] = [];
  const conf: number[] = [];
  for (let i = 0; i < m; i++) {
    if (rng() < opts.dropout) continue;
    idx.push(i, i);
    conf.push(0.5 + 0.5 * rng());
  }
  return {
    imageA,
    imageB,
    source: opts.source,
    indices: Int32Array.from(idx),
    confidences: Float64Array.from(conf),
  };
}
