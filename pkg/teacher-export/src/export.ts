/**
 * The export pipeline: read a dataset, run the chosen model over every
 * example, and write one logits row per example id as a logits-table file.
 *
 * All validation happens before any bytes hit the output path, and the
 * write itself goes through a temp file plus rename so consumers never see
 * a partial table.
 */
import * as fs from 'node:fs'
import * as path from 'node:path'
import * as process from 'node:process'

import { Dataset, LogitsTable, encodeLogitsTable, readDataset } from './format.js'
import { TeacherModel, resolveModel } from './models.js'

export interface ExportManifest {
  datasetPath: string
  datasetFormat: 'csv' | 'binary'
  model: string
  classNames: string[]
  promptTemplate: string
  outPath: string
}

export interface ExportStats {
  examples: number
  numClasses: number
  /** Fraction of examples whose argmax logit matches the dataset label. */
  labelAgreement: number
  source: string
}

function argmax(row: Float64Array): number {
  let best = 0
  for (let c = 1; c < row.length; c++) {
    if (row[c] > row[best]) best = c
  }
  return best
}

export function buildTable(dataset: Dataset, model: TeacherModel, source: string): LogitsTable {
  const logits = model.predictLogits(dataset)
  const entries: LogitsTable['entries'] = []
  for (let row = 0; row < dataset.n; row++) {
    const slice = logits.subarray(row * model.numClasses, (row + 1) * model.numClasses)
    for (const v of slice) {
      if (!Number.isFinite(v)) {
        throw new Error(`model produced a non-finite logit for example ${dataset.exampleIds[row]}`)
      }
    }
    entries.push({ exampleId: dataset.exampleIds[row], logits: Float32Array.from(slice) })
  }
  return { numClasses: model.numClasses, entries, source }
}

export function exportLogits(manifest: ExportManifest): ExportStats {
  const dataset = readDataset(manifest.datasetPath, manifest.datasetFormat)
  if (manifest.classNames.length !== dataset.numClasses) {
    throw new Error(
      `got ${manifest.classNames.length} class names but the dataset has ` +
        `${dataset.numClasses} classes`,
    )
  }
  const model = resolveModel(manifest.model, dataset)
  if (model.numClasses !== dataset.numClasses) {
    throw new Error(
      `model produces ${model.numClasses} classes but the dataset has ${dataset.numClasses}`,
    )
  }
  const source =
    `model=${manifest.model} (${model.describe()}) ` +
    `classes=[${manifest.classNames.join(',')}] ` +
    `prompt=${JSON.stringify(manifest.promptTemplate)} tool=teacher-export/0.1.0`
  const table = buildTable(dataset, model, source)

  const logits = table.entries
  let agree = 0
  for (let row = 0; row < dataset.n; row++) {
    const asF64 = Float64Array.from(logits[row].logits)
    if (argmax(asF64) === dataset.labels[row]) agree += 1
  }

  const tmp = path.join(
    path.dirname(path.resolve(manifest.outPath)),
    `.${path.basename(manifest.outPath)}.tmp-${process.pid}`,
  )
  fs.writeFileSync(tmp, encodeLogitsTable(table))
  fs.renameSync(tmp, manifest.outPath)

  return {
    examples: dataset.n,
    numClasses: dataset.numClasses,
    labelAgreement: dataset.n > 0 ? agree / dataset.n : 0,
    source,
  }
}
