import { createHash } from 'node:crypto';

/**
 * Small deterministic PRNG (mulberry32). Streams are derived from a
 * (seed, label) pair by hashing, so the same label always replays the
 * same sequence regardless of call order elsewhere.
 */
export type Rng = () => number;

export function rngFor(seed: number, label: string): Rng {
  const digest = createHash('sha256').update(`${seed}:${label}`).digest();
  let state = digest.readUInt32LE(0);
  return function next(): number {
    state = (state + 0x6d2b79f5) | 0;
    let t = Math.imul(state ^ (state >>> 15), 1 | state);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/** Standard-normal draw via Box-Muller on two uniform deviates. */
export function gaussian(rng: Rng): number {
  let u = 0;
  while (u === 0) u = rng();
  const v = rng();
  return Math.sqrt(-2.0 * Math.log(u)) * Math.cos(2.0 * Math.PI * v);
}
