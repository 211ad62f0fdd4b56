#!/usr/bin/env node
/**
 * Command line: teacher-export --dataset <path> --model <id> --classes a,b,c --out <path>
 *               [--format csv|binary] [--prompt <template>]
 *
 * Models: `linear-probe`, `prototype`, or `checkpoint:<path>` (a frozen
 * simulator checkpoint). The prompt template is recorded in the output's
 * source description alongside the model identifier.
 */
import * as path from 'node:path'
import * as process from 'node:process'
import { fileURLToPath } from 'node:url'

import { ExportManifest, exportLogits } from './export.js'

const USAGE =
  'usage: teacher-export --dataset <path> --model <id> --classes <a,b,...> --out <path> ' +
  '[--format csv|binary] [--prompt <template>]'

export function parseArgs(argv: string[]): ExportManifest {
  const opts = new Map<string, string>()
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i]
    if (!flag.startsWith('--') || i + 1 >= argv.length) {
      throw new Error(USAGE)
    }
    opts.set(flag.slice(2), argv[i + 1])
  }
  for (const required of ['dataset', 'model', 'classes', 'out']) {
    if (!opts.has(required)) throw new Error(`missing --${required}\n${USAGE}`)
  }
  const format = opts.get('format') ?? 'binary'
  if (format !== 'csv' && format !== 'binary') {
    throw new Error(`--format must be csv or binary, got ${format}`)
  }
  const known = new Set(['dataset', 'model', 'classes', 'out', 'format', 'prompt'])
  for (const key of opts.keys()) {
    if (!known.has(key)) throw new Error(`unknown flag --${key}\n${USAGE}`)
  }
  return {
    datasetPath: opts.get('dataset')!,
    datasetFormat: format,
    model: opts.get('model')!,
    classNames: opts
      .get('classes')!
      .split(',')
      .map(s => s.trim())
      .filter(s => s.length > 0),
    promptTemplate: opts.get('prompt') ?? 'a photo of a {}',
    outPath: opts.get('out')!,
  }
}

export function main(argv: string[]): number {
  let manifest: ExportManifest
  try {
    manifest = parseArgs(argv)
  } catch (err) {
    console.error(String(err instanceof Error ? err.message : err))
    return 2
  }
  try {
    const stats = exportLogits(manifest)
    console.log(
      `wrote ${stats.examples} logit rows (${stats.numClasses} classes) to ${manifest.outPath}`,
    )
    console.log(`label agreement of exported argmax: ${stats.labelAgreement.toFixed(4)}`)
    if (stats.examples > 0 && stats.labelAgreement <= 1 / stats.numClasses) {
      console.warn('warning: exported logits do not beat chance on the dataset labels')
    }
    return 0
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`)
    return 1
  }
}

const invokedDirectly =
  process.argv[1] !== undefined &&
  fileURLToPath(import.meta.url) === path.resolve(process.argv[1])

if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)))
}
