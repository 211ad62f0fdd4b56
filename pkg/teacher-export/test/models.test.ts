import assert from 'node:assert/strict'
import * as fs from 'node:fs'
import * as os from 'node:os'
import * as path from 'node:path'
import { test } from 'node:test'

import { Dataset } from '../src/format.js'
import { CheckpointModel, LinearProbeModel, PrototypeModel, resolveModel } from '../src/models.js'

function blobDataset(perClass = 30, spread = 0.5): Dataset {
  // two well-separated 2-d blobs, deterministic pseudo-noise
  const n = perClass * 2
  const features = new Float64Array(n * 2)
  const labels = new Int32Array(n)
  const exampleIds: number[] = []
  let state = 1234567
  const next = () => {
    // xorshift32, scaled to [-1, 1)
    state ^= state << 13
    state ^= state >>> 17
    state ^= state << 5
    state >>>= 0
    return (state / 0xffffffff) * 2 - 1
  }
  for (let i = 0; i < n; i++) {
    const label = i < perClass ? 0 : 1
    const cx = label === 0 ? -3 : 3
    features[i * 2] = cx + next() * spread
    features[i * 2 + 1] = -cx + next() * spread
    labels[i] = label
    exampleIds.push(100 + i)
  }
  return { features, labels, numClasses: 2, exampleIds, n, dim: 2 }
}

function accuracy(logits: Float64Array, ds: Dataset): number {
  let hits = 0
  for (let row = 0; row < ds.n; row++) {
    const a = logits[row * ds.numClasses]
    const b = logits[row * ds.numClasses + 1]
    if ((b > a ? 1 : 0) === ds.labels[row]) hits += 1
  }
  return hits / ds.n
}

test('linear probe beats chance on separable blobs', () => {
  const ds = blobDataset()
  const model = new LinearProbeModel(ds.numClasses)
  const acc = accuracy(model.predictLogits(ds), ds)
  assert.ok(acc > 0.5, `accuracy ${acc}`)
  assert.ok(acc > 0.95, `expected near-perfect separation, got ${acc}`)
})

test('prototype model beats chance on separable blobs', () => {
  const ds = blobDataset()
  const model = new PrototypeModel(ds.numClasses)
  const acc = accuracy(model.predictLogits(ds), ds)
  assert.ok(acc > 0.95, `accuracy ${acc}`)
})

test('model outputs are deterministic', () => {
  const ds = blobDataset()
  for (const model of [new LinearProbeModel(2), new PrototypeModel(2)]) {
    const a = model.predictLogits(ds)
    const b = model.predictLogits(ds)
    assert.deepEqual(Array.from(a), Array.from(b), model.id)
  }
})

test('checkpoint model runs a hand-built flat network', () => {
  // single linear layer, weights [[1,0],[0,1]] row-major, bias [0.5, -0.5]
  const buf = Buffer.alloc(4 + 2 + 4 + 4 + 4 + 4 + 8 + 8 * 6)
  let off = 0
  buf.write('FFCK', off, 'latin1')
  off += 4
  buf.writeUInt16LE(1, off)
  off += 2
  buf.writeUInt32LE(2, off) // input dim
  off += 4
  buf.writeUInt32LE(0, off) // no hidden layers
  off += 4
  buf.writeUInt32LE(2, off) // classes
  off += 4
  buf.writeUInt32LE(0, off) // no norm
  off += 4
  buf.writeBigUInt64LE(6n, off)
  off += 8
  for (const v of [1, 0, 0, 1, 0.5, -0.5]) {
    buf.writeDoubleLE(v, off)
    off += 8
  }
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), 'texp-'))
  const file = path.join(dir, 'm.ffck')
  fs.writeFileSync(file, buf)

  const model = new CheckpointModel(file)
  assert.equal(model.numClasses, 2)
  const ds: Dataset = {
    features: Float64Array.from([2, 3]),
    labels: Int32Array.from([0]),
    numClasses: 2,
    exampleIds: [0],
    n: 1,
    dim: 2,
  }
  const logits = model.predictLogits(ds)
  assert.deepEqual(Array.from(logits), [2.5, 2.5])
})

test('checkpoint model rejects wrong parameter count', () => {
  const buf = Buffer.alloc(4 + 2 + 4 + 4 + 4 + 4 + 8 + 8 * 5)
  let off = 0
  buf.write('FFCK', off, 'latin1')
  off += 4
  buf.writeUInt16LE(1, off)
  off += 2
  buf.writeUInt32LE(2, off)
  off += 4
  buf.writeUInt32LE(0, off)
  off += 4
  buf.writeUInt32LE(2, off)
  off += 4
  buf.writeUInt32LE(0, off)
  off += 4
  buf.writeBigUInt64LE(5n, off)
  off += 8
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), 'texp-'))
  const file = path.join(dir, 'bad.ffck')
  fs.writeFileSync(file, buf)
  assert.throws(() => new CheckpointModel(file), /architecture implies/)
})

test('resolveModel rejects unknown ids', () => {
  const ds = blobDataset(2)
  assert.throws(() => resolveModel('quantum', ds), /unknown model/)
})
