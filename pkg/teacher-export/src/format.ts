/**
 * Binary and CSV file formats shared with the federated simulator.
 *
 * Everything is little-endian. Three layouts matter here:
 *  - datasets  ("FFDS"): u16 version, u64 n, u32 dim, u32 classes,
 *                        ids u64[n], labels u32[n], features f64[n*dim]
 *  - checkpoints ("FFCK"): u16 version, u32 inputDim, u32 nHidden,
 *                        u32[nHidden] hidden, u32 classes, u32 normTag
 *                        (0 = none, g = group norm with g groups),
 *                        u64 count, f64[count] values
 *  - logits tables ("FFLT"): u16 version, u32 classes, u64 entries,
 *                        each entry u64 id + f32[classes], then a
 *                        u32-length-prefixed UTF-8 source description
 */
import * as fs from 'node:fs'

export const FORMAT_VERSION = 1

export interface Dataset {
  features: Float64Array // row-major n x dim
  labels: Int32Array
  numClasses: number
  exampleIds: number[]
  n: number
  dim: number
}

export interface ModelCheckpoint {
  inputDim: number
  hiddenDims: number[]
  numClasses: number
  normGroups: number // 0 = no normalization
  values: Float64Array
}

export interface LogitsTable {
  numClasses: number
  entries: { exampleId: number; logits: Float32Array }[]
  source: string
}

class Cursor {
  private offset = 0
  private view: DataView
  constructor(private buf: Buffer, private file: string) {
    this.view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength)
  }

  private need(bytes: number, what: string) {
    if (this.offset + bytes > this.buf.length) {
      throw new Error(`${this.file}: file ends inside ${what}`)
    }
  }

  u16(what: string): number {
    this.need(2, what)
    const v = this.view.getUint16(this.offset, true)
    this.offset += 2
    return v
  }

  u32(what: string): number {
    this.need(4, what)
    const v = this.view.getUint32(this.offset, true)
    this.offset += 4
    return v
  }

  u64(what: string): number {
    this.need(8, what)
    const v = this.view.getBigUint64(this.offset, true)
    this.offset += 8
    if (v > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new Error(`${this.file}: ${what} ${v} is too large`)
    }
    return Number(v)
  }

  f32(what: string): number {
    this.need(4, what)
    const v = this.view.getFloat32(this.offset, true)
    this.offset += 4
    return v
  }

  f64Array(count: number, what: string): Float64Array {
    this.need(8 * count, what)
    const out = new Float64Array(count)
    for (let i = 0; i < count; i++) {
      out[i] = this.view.getFloat64(this.offset + 8 * i, true)
    }
    this.offset += 8 * count
    return out
  }

  f32Array(count: number, what: string): Float32Array {
    this.need(4 * count, what)
    const out = new Float32Array(count)
    for (let i = 0; i < count; i++) {
      out[i] = this.view.getFloat32(this.offset + 4 * i, true)
    }
    this.offset += 4 * count
    return out
  }

  bytes(count: number, what: string): Buffer {
    this.need(count, what)
    const out = this.buf.subarray(this.offset, this.offset + count)
    this.offset += count
    return out
  }

  magic(expected: string): void {
    const got = this.bytes(4, 'magic bytes').toString('latin1')
    if (got !== expected) {
      throw new Error(`${this.file}: bad magic ${JSON.stringify(got)}, expected ${expected}`)
    }
  }

  version(kind: string): void {
    const v = this.u16('format version')
    if (v !== FORMAT_VERSION) {
      throw new Error(`${this.file}: unsupported ${kind} version ${v}`)
    }
  }

  expectEnd(): void {
    if (this.offset !== this.buf.length) {
      throw new Error(`${this.file}: trailing bytes beyond the declared payload`)
    }
  }
}

export function readBinaryDataset(path: string): Dataset {
  const cur = new Cursor(fs.readFileSync(path), path)
  cur.magic('FFDS')
  cur.version('dataset')
  const n = cur.u64('example count')
  const dim = cur.u32('input dim')
  const numClasses = cur.u32('class count')
  const exampleIds: number[] = []
  for (let i = 0; i < n; i++) exampleIds.push(cur.u64('example ids'))
  const labels = new Int32Array(n)
  for (let i = 0; i < n; i++) labels[i] = cur.u32('labels')
  const features = cur.f64Array(n * dim, 'features')
  cur.expectEnd()
  return { features, labels, numClasses, exampleIds, n, dim }
}

export function readCsvDataset(path: string): Dataset {
  const lines = fs
    .readFileSync(path, 'utf-8')
    .split('\n')
    .map(line => line.trim())
    .filter(line => line.length > 0)
  if (lines.length === 0) throw new Error(`${path}: empty dataset file`)
  const header = lines[0].split(',')
  if (!header[0].startsWith('label:')) {
    throw new Error(`${path}: header must start with 'label:<num_classes>'`)
  }
  const numClasses = Number(header[0].slice('label:'.length))
  if (!Number.isInteger(numClasses) || numClasses < 1) {
    throw new Error(`${path}: malformed class count in header`)
  }
  const dim = header.length - 1
  const n = lines.length - 1
  const features = new Float64Array(n * dim)
  const labels = new Int32Array(n)
  const exampleIds: number[] = []
  for (let row = 0; row < n; row++) {
    const parts = lines[row + 1].split(',')
    if (parts.length !== dim + 1) {
      throw new Error(`${path}:${row + 2}: expected ${dim + 1} fields, got ${parts.length}`)
    }
    const label = Number(parts[0])
    if (!Number.isInteger(label) || label < 0 || label >= numClasses) {
      throw new Error(`${path}:${row + 2}: label ${parts[0]} out of range [0, ${numClasses})`)
    }
    labels[row] = label
    for (let c = 0; c < dim; c++) {
      const v = Number(parts[c + 1])
      if (Number.isNaN(v)) {
        throw new Error(`${path}:${row + 2}: column ${c + 2}: malformed number ${parts[c + 1]}`)
      }
      features[row * dim + c] = v
    }
    exampleIds.push(row)
  }
  return { features, labels, numClasses, exampleIds, n, dim }
}

export function readDataset(path: string, format: 'csv' | 'binary'): Dataset {
  return format === 'csv' ? readCsvDataset(path) : readBinaryDataset(path)
}

/** Test fixture helper; the simulator is the usual producer of these files. */
export function writeBinaryDataset(dataset: Dataset, path: string): void {
  const headBytes = 4 + 2 + 8 + 4 + 4
  const body = Buffer.alloc(headBytes + 8 * dataset.n + 4 * dataset.n + 8 * dataset.n * dataset.dim)
  let off = 0
  body.write('FFDS', off, 'latin1')
  off += 4
  body.writeUInt16LE(FORMAT_VERSION, off)
  off += 2
  body.writeBigUInt64LE(BigInt(dataset.n), off)
  off += 8
  body.writeUInt32LE(dataset.dim, off)
  off += 4
  body.writeUInt32LE(dataset.numClasses, off)
  off += 4
  for (const id of dataset.exampleIds) {
    body.writeBigUInt64LE(BigInt(id), off)
    off += 8
  }
  for (const label of dataset.labels) {
    body.writeUInt32LE(label, off)
    off += 4
  }
  for (const v of dataset.features) {
    body.writeDoubleLE(v, off)
    off += 8
  }
  fs.writeFileSync(path, body)
}

export function readCheckpoint(path: string): ModelCheckpoint {
  const cur = new Cursor(fs.readFileSync(path), path)
  cur.magic('FFCK')
  cur.version('checkpoint')
  const inputDim = cur.u32('input dim')
  const nHidden = cur.u32('hidden layer count')
  const hiddenDims: number[] = []
  for (let i = 0; i < nHidden; i++) hiddenDims.push(cur.u32('hidden dims'))
  const numClasses = cur.u32('class count')
  const normGroups = cur.u32('norm tag')
  const count = cur.u64('parameter count')
  const values = cur.f64Array(count, 'parameter payload')
  cur.expectEnd()
  let expected = 0
  const dims = [inputDim, ...hiddenDims, numClasses]
  for (let i = 0; i + 1 < dims.length; i++) {
    expected += dims[i] * dims[i + 1] + dims[i + 1]
    if (normGroups > 0 && i + 2 < dims.length) expected += 2 * dims[i + 1]
  }
  if (count !== expected) {
    throw new Error(`${path}: checkpoint declares ${count} parameters, architecture implies ${expected}`)
  }
  return { inputDim, hiddenDims, numClasses, normGroups, values }
}

export function encodeLogitsTable(table: LogitsTable): Buffer {
  const source = Buffer.from(table.source, 'utf-8')
  const entryBytes = 8 + 4 * table.numClasses
  const buf = Buffer.alloc(4 + 2 + 4 + 8 + entryBytes * table.entries.length + 4 + source.length)
  let off = 0
  buf.write('FFLT', off, 'latin1')
  off += 4
  buf.writeUInt16LE(FORMAT_VERSION, off)
  off += 2
  buf.writeUInt32LE(table.numClasses, off)
  off += 4
  buf.writeBigUInt64LE(BigInt(table.entries.length), off)
  off += 8
  for (const entry of table.entries) {
    if (entry.logits.length !== table.numClasses) {
      throw new Error(
        `logits for example ${entry.exampleId} have length ${entry.logits.length}, ` +
          `expected ${table.numClasses}`,
      )
    }
    buf.writeBigUInt64LE(BigInt(entry.exampleId), off)
    off += 8
    for (const v of entry.logits) {
      buf.writeFloatLE(v, off)
      off += 4
    }
  }
  buf.writeUInt32LE(source.length, off)
  off += 4
  source.copy(buf, off)
  return buf
}

export function readLogitsTable(path: string): LogitsTable {
  const cur = new Cursor(fs.readFileSync(path), path)
  cur.magic('FFLT')
  cur.version('logits table')
  const numClasses = cur.u32('class count')
  const count = cur.u64('entry count')
  const entries: LogitsTable['entries'] = []
  const seen = new Set<number>()
  for (let i = 0; i < count; i++) {
    const exampleId = cur.u64('example id')
    const logits = cur.f32Array(numClasses, `logits of example ${exampleId}`)
    if (seen.has(exampleId)) {
      throw new Error(`${path}: duplicate example id ${exampleId}`)
    }
    seen.add(exampleId)
    entries.push({ exampleId, logits })
  }
  const srcLen = cur.u32('source description length')
  const source = cur.bytes(srcLen, 'source description').toString('utf-8')
  cur.expectEnd()
  return { numClasses, entries, source }
}
