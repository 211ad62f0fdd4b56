import assert from 'node:assert/strict'
import * as fs from 'node:fs'
import * as os from 'node:os'
import * as path from 'node:path'
import { test } from 'node:test'

import { exportLogits } from '../src/export.js'
import { Dataset, readLogitsTable, writeBinaryDataset } from '../src/format.js'
import { main } from '../src/cli.js'

function writeBlobs(dir: string, perClass = 25): string {
  const n = perClass * 2
  const features = new Float64Array(n * 2)
  const labels = new Int32Array(n)
  const exampleIds: number[] = []
  for (let i = 0; i < n; i++) {
    const label = i < perClass ? 0 : 1
    features[i * 2] = (label === 0 ? -2 : 2) + Math.sin(i * 2.399) * 0.4
    features[i * 2 + 1] = (label === 0 ? 1 : -1) + Math.cos(i * 1.618) * 0.4
    labels[i] = label
    exampleIds.push(i * 7) // deliberately non-contiguous ids
  }
  const ds: Dataset = { features, labels, numClasses: 2, exampleIds, n, dim: 2 }
  const file = path.join(dir, 'blobs.ffds')
  writeBinaryDataset(ds, file)
  return file
}

function tmpDir(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), 'texp-'))
}

test('exportLogits writes a readable table keyed by the dataset ids', () => {
  const dir = tmpDir()
  const dataset = writeBlobs(dir)
  const out = path.join(dir, 'table.fflt')
  const stats = exportLogits({
    datasetPath: dataset,
    datasetFormat: 'binary',
    model: 'prototype',
    classNames: ['left', 'right'],
    promptTemplate: 'a photo of a {}',
    outPath: out,
  })
  assert.equal(stats.examples, 50)
  assert.ok(stats.labelAgreement > 0.5, `agreement ${stats.labelAgreement}`)
  const table = readLogitsTable(out)
  assert.equal(table.numClasses, 2)
  assert.equal(table.entries.length, 50)
  assert.deepEqual(
    table.entries.map(e => e.exampleId),
    Array.from({ length: 50 }, (_, i) => i * 7),
  )
  assert.match(table.source, /model=prototype/)
  assert.match(table.source, /prompt="a photo of a \{\}"/)
})

test('class-name count mismatch fails before any write', () => {
  const dir = tmpDir()
  const dataset = writeBlobs(dir)
  const out = path.join(dir, 'table.fflt')
  assert.throws(
    () =>
      exportLogits({
        datasetPath: dataset,
        datasetFormat: 'binary',
        model: 'prototype',
        classNames: ['only-one'],
        promptTemplate: '{}',
        outPath: out,
      }),
    /class names/,
  )
  assert.ok(!fs.existsSync(out))
  assert.deepEqual(fs.readdirSync(dir).filter(f => f.includes('tmp')), [])
})

test('repeated exports are byte-identical', () => {
  const dir = tmpDir()
  const dataset = writeBlobs(dir)
  const a = path.join(dir, 'a.fflt')
  const b = path.join(dir, 'b.fflt')
  for (const out of [a, b]) {
    exportLogits({
      datasetPath: dataset,
      datasetFormat: 'binary',
      model: 'linear-probe',
      classNames: ['left', 'right'],
      promptTemplate: '{}',
      outPath: out,
    })
  }
  assert.deepEqual(fs.readFileSync(a), fs.readFileSync(b))
})

test('cli happy path and exit codes', () => {
  const dir = tmpDir()
  const dataset = writeBlobs(dir)
  const out = path.join(dir, 'cli.fflt')
  assert.equal(
    main(['--dataset', dataset, '--model', 'prototype', '--classes', 'a,b', '--out', out]),
    0,
  )
  assert.ok(fs.existsSync(out))
  assert.equal(
    main(['--dataset', dataset, '--model', 'prototype', '--classes', 'a', '--out', out]),
    1,
  )
  assert.equal(main(['--dataset', dataset]), 2)
  assert.equal(
    main(['--dataset', dataset, '--model', 'prototype', '--classes', 'a,b', '--out', out, '--bogus', 'x']),
    2,
  )
})
