#!/usr/bin/env node
/**
 * crossloc-adapter CLI: export-features, export-matches, serve.
 *
 * Real model backends plug in behind the same flags; the shipped --stub
 * mode produces deterministic synthetic outputs so the downstream pipeline
 * and its tests run without any weights.
 */

import { readdirSync, readFileSync } from 'node:fs';
import { basename, extname, join } from 'node:path';
import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';

import { writeFeatureDir, writeMatchDir } from './format.js';
import { serve } from './server.js';
import { STUB_DEFAULTS, stubFeatures, stubMatches } from './stub.js';

function listImageIds(imageDir: string): string[] {
  return readdirSync(imageDir)
    .filter((name) => !name.startsWith('.'))
    .map((name) => basename(name, extname(name)))
    .sort();
}

await yargs(hideBin(process.argv))
  .command(
    'export-features',
    'extract local + global features for every image in a directory',
    (y) =>
      y
        .option('image-dir', { type: 'string', demandOption: true })
        .option('out', { type: 'string', demandOption: true })
        .option('stub', { type: 'boolean', default: false,
                          describe: 'deterministic synthetic features, no model' })
        .option('num-keypoints', { type: 'number', default: STUB_DEFAULTS.numKeypoints })
        .option('descriptor-dim', { type: 'number', default: STUB_DEFAULTS.descriptorDim })
        .option('global-dim', { type: 'number', default: STUB_DEFAULTS.globalDim })
        .option('seed', { type: 'number', default: 0 }),
    (argv) => {
      if (!argv.stub) {
        throw new Error('no model backend configured; run with --stub');
      }
      const opts = {
        ...STUB_DEFAULTS,
        numKeypoints: argv.numKeypoints,
        descriptorDim: argv.descriptorDim,
        globalDim: argv.globalDim,
        seed: argv.seed,
      };
      const ids = listImageIds(argv.imageDir);
      const images = ids.map((id) => stubFeatures(id, opts));
      writeFeatureDir(argv.out, images, opts.descriptorDim, opts.globalDim);
      console.error(`wrote features for ${ids.length} images to ${argv.out}`);
    },
  )
  .command(
    'export-matches',
    'match image pairs listed in a pair file',
    (y) =>
      y
        .option('features', { type: 'string', demandOption: true,
                              describe: 'feature directory produced by export-features' })
        .option('pairs', { type: 'string', demandOption: true,
                           describe: 'JSON file: {"pairs": [["a", "b"], ...]}' })
        .option('out', { type: 'string', demandOption: true })
        .option('matcher', { type: 'string', default: 'stub' })
        .option('stub', { type: 'boolean', default: false })
        .option('dropout', { type: 'number', default: 0.2 })
        .option('seed', { type: 'number', default: 0 }),
    (argv) => {
      if (!argv.stub) {
        throw new Error('no matcher backend configured; run with --stub');
      }
      const manifest = JSON.parse(
        readFileSync(join(argv.features, 'features.json'), 'utf8'),
      ) as { images: { image_id: string; num_keypoints: number }[] };
      const counts = new Map(
        manifest.images.map((im) => [im.image_id, im.num_keypoints]),
      );
      const pairList = JSON.parse(readFileSync(argv.pairs, 'utf8')) as {
        pairs: [string, string][];
      };
      const pairs = pairList.pairs.map(([a, b]) => {
        const na = counts.get(a);
        const nb = counts.get(b);
        if (na === undefined || nb === undefined) {
          throw new Error(`pair (${a}, ${b}) references unknown image`);
        }
        return stubMatches(a, na, b, nb, {
          source: argv.matcher,
          dropout: argv.dropout,
          seed: argv.seed,
        });
      });
      writeMatchDir(argv.out, pairs);
      console.error(`wrote ${pairs.length} match pairs to ${argv.out}`);
    },
  )
  .command(
    'serve',
    'answer localization requests as JSON lines on stdin/stdout',
    (y) => y,
    async () => {
      await serve();
    },
  )
  .demandCommand(1)
  .strict()
  .parseAsync();
