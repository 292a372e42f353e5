/**
 * Neural localization server — JSON lines over stdin/stdout.
 *
 * One request per line; one response per line carrying the request id.
 * Responses are written in request order. A malformed line yields an error
 * response (id null when the id itself cannot be recovered) and the loop
 * keeps serving.
 *
 * The stub model answers with the first candidate's pose: good enough to
 * exercise the full pipeline protocol without any weights.
 */

import { createInterface } from 'node:readline';
import { z } from 'zod';

const intrinsicsSchema = z.object({
  fx: z.number().positive(),
  fy: z.number().positive(),
  cx: z.number(),
  cy: z.number(),
  width: z.number().int().positive(),
  height: z.number().int().positive(),
});

const poseSchema = z.object({
  q: z.array(z.number()).length(4),
  t: z.array(z.number()).length(3),
});

const candidateSchema = z.object({
  frame_id: z.string(),
  pose: poseSchema,
  intrinsics: intrinsicsSchema,
  depth_ref: z.string().nullable().optional(),
  depth_shape: z.array(z.number().int()).length(2).optional(),
});

export const requestSchema = z.object({
  id: z.string(),
  method: z.literal('localize'),
  protocol_version: z.number().int().optional(),
  query_id: z.string(),
  intrinsics: intrinsicsSchema,
  candidates: z.array(candidateSchema).min(1),
  query_depth_ref: z.string().nullable().optional(),
  query_depth_shape: z.array(z.number().int()).length(2).optional(),
});

export type LocalizeRequest = z.infer<typeof requestSchema>;

export interface LocalizeResponse {
  id: string | null;
  quaternion?: number[];
  translation?: number[];
  confidence?: number;
  valid?: boolean;
  error?: string;
}

export type Model = (request: LocalizeRequest) => LocalizeResponse;

/** Stub model: echoes the first candidate's pose with fixed confidence. */
export function stubModel(request: LocalizeRequest): LocalizeResponse {
  const first = request.candidates[0];
  return {
    id: request.id,
    quaternion: first.pose.q,
    translation: first.pose.t,
    confidence: 0.9,
    valid: true,
  };
}

/** Process one input line into one response object. */
export function handleLine(line: string, model: Model = stubModel): LocalizeResponse {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    return { id: null, error: 'unparseable JSON line' };
  }
  const id =
    raw !== null && typeof raw === 'object' && typeof (raw as { id?: unknown }).id === 'string'
      ? ((raw as { id: string }).id)
      : null;
  const parsed = requestSchema.safeParse(raw);
  if (!parsed.success) {
    return { id, error: `invalid request: ${parsed.error.issues[0]?.message ?? 'schema'}` };
  }
  try {
    return model(parsed.data);
  } catch (err) {
    return { id, error: `model failure: ${String(err)}` };
  }
}

export async function serve(model: Model = stubModel): Promise<void> {
  const rl = createInterface({ input: process.stdin });
  for await (const line of rl) {
    if (!line.trim()) continue;
    const response = handleLine(line, model);
    process.stdout.write(JSON.stringify(response) + '\n');
  }
}
