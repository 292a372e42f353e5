/**
 * Interchange file writers shared by the exporters.
 *
 * Byte layouts (all little-endian):
 *   *.f32  — IEEE-754 float32, row-major
 *   *.i32  — signed 32-bit integers, row-major
 *
 * Feature directory:
 *   features.json             manifest: format_version, descriptor_dim,
 *                             global_dim, images[{image_id, num_keypoints}]
 *   arrays/<id>.kpts.f32      N x 2 pixel coordinates (u, v)
 *   arrays/<id>.desc.f32      N x descriptor_dim local descriptors
 *   arrays/<id>.scores.f32    N detection scores
 *   arrays/<id>.global.f32    unit-norm global descriptor
 *
 * Match directory:
 *   matches.json              manifest: format_version,
 *                             pairs[{image_a, image_b, source, num_matches}]
 *   arrays/<a>__<b>.<src>.idx.i32   M x 2 keypoint index pairs
 *   arrays/<a>__<b>.<src>.conf.f32  M confidences in [0, 1]
 */

import { mkdirSync, writeFileSync } from 'node:fs';
import { join } from 'node:path';

export const INTERCHANGE_VERSION = 1;

export interface ImageFeatures {
  imageId: string;
  keypoints: Float64Array; // N*2
  descriptors: Float64Array; // N*dim
  scores: Float64Array; // N
  global: Float64Array; // globalDim, unit norm
}

export function f32Bytes(values: ArrayLike<number>): Buffer {
  const buf = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) {
    buf.writeFloatLE(Math.fround(values[i]), i * 4);
  }
  return buf;
}

export function i32Bytes(values: ArrayLike<number>): Buffer {
  const buf = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) {
    buf.writeInt32LE(values[i] | 0, i * 4);
  }
  return buf;
}

/** JSON.stringify with keys in sorted order at every level, for stable bytes. */
export function stableJson(value: unknown): string {
  return JSON.stringify(sortKeys(value));
}

function sortKeys(value: unknown): unknown {
  if (Array.isArray(value)) return value.map(sortKeys);
  if (value !== null && typeof value === 'object') {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(value as object).sort()) {
      out[key] = sortKeys((value as Record<string, unknown>)[key]);
    }
    return out;
  }
  return value;
}

export function writeFeatureDir(
  outDir: string,
  images: ImageFeatures[],
  descriptorDim: number,
  globalDim: number,
): void {
  mkdirSync(join(outDir, 'arrays'), { recursive: true });
  const manifest = {
    format_version: INTERCHANGE_VERSION,
    descriptor_dim: descriptorDim,
    global_dim: globalDim,
    images: images.map((im) => ({
      image_id: im.imageId,
      num_keypoints: im.keypoints.length / 2,
    })),
  };
  for (const im of images) {
    const base = join(outDir, 'arrays', im.imageId);
    writeFileSync(`${base}.kpts.f32`, f32Bytes(im.keypoints));
    writeFileSync(`${base}.desc.f32`, f32Bytes(im.descriptors));
    writeFileSync(`${base}.scores.f32`, f32Bytes(im.scores));
    writeFileSync(`${base}.global.f32`, f32Bytes(im.global));
  }
  writeFileSync(join(outDir, 'features.json'), stableJson(manifest) + '\n');
}

export interface PairMatches {
  imageA: string;
  imageB: string;
  source: string;
  indices: Int32Array; // M*2
  confidences: Float64Array; // M
}

export function writeMatchDir(outDir: string, pairs: PairMatches[]): void {
  mkdirSync(join(outDir, 'arrays'), { recursive: true });
  const manifest = {
    format_version: INTERCHANGE_VERSION,
    pairs: pairs.map((p) => ({
      image_a: p.imageA,
      image_b: p.imageB,
      source: p.source,
      num_matches: p.confidences.length,
    })),
  };
  for (const p of pairs) {
    const stem = join(outDir, 'arrays', `${p.imageA}__${p.imageB}.${p.source}`);
    writeFileSync(`${stem}.idx.i32`, i32Bytes(p.indices));
    writeFileSync(`${stem}.conf.f32`, f32Bytes(p.confidences));
  }
  writeFileSync(join(outDir, 'matches.json'), stableJson(manifest) + '\n');
}
