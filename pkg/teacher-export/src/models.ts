/**
 * Model backends that turn dataset rows into class logits.
 *
 * Three are built in:
 *  - `checkpoint:<path>` runs a frozen simulator checkpoint (dense layers,
 *    optional group norm, ReLU) in inference mode;
 *  - `linear-probe` fits a multinomial logistic regression head on the
 *    dataset features, the probing analog for frozen embeddings;
 *  - `prototype` scores by negative squared distance to per-class feature
 *    means, a zero-shot-style nearest-prototype matcher.
 *
 * All backends are deterministic: same model spec + same dataset bytes give
 * the same logits, so repeated exports produce identical files.
 */
import { Dataset, ModelCheckpoint, readCheckpoint } from './format.js'

const GROUP_NORM_EPS = 1e-5

export interface TeacherModel {
  id: string
  numClasses: number
  /** One logits row per dataset row, row-major n x numClasses. */
  predictLogits(dataset: Dataset): Float64Array
  describe(): string
}

export class CheckpointModel implements TeacherModel {
  id: string
  numClasses: number
  private ckpt: ModelCheckpoint

  constructor(path: string) {
    this.ckpt = readCheckpoint(path)
    this.id = `checkpoint:${path}`
    this.numClasses = this.ckpt.numClasses
  }

  describe(): string {
    const { inputDim, hiddenDims, numClasses, normGroups } = this.ckpt
    const norm = normGroups > 0 ? `group_norm(${normGroups})` : 'none'
    return `frozen checkpoint ${inputDim}->[${hiddenDims.join(',')}]->${numClasses} norm=${norm}`
  }

  predictLogits(dataset: Dataset): Float64Array {
    const { inputDim, hiddenDims, numClasses, normGroups, values } = this.ckpt
    if (dataset.dim !== inputDim) {
      throw new Error(`dataset has ${dataset.dim} features, model expects ${inputDim}`)
    }
    const dims = [inputDim, ...hiddenDims, numClasses]
    const out = new Float64Array(dataset.n * numClasses)
    for (let row = 0; row < dataset.n; row++) {
      let x = Array.from(dataset.features.subarray(row * dataset.dim, (row + 1) * dataset.dim))
      let off = 0
      for (let layer = 0; layer + 1 < dims.length; layer++) {
        const fanIn = dims[layer]
        const fanOut = dims[layer + 1]
        const z = new Array<number>(fanOut)
        for (let j = 0; j < fanOut; j++) {
          let acc = values[off + fanIn * fanOut + j] // bias
          for (let i = 0; i < fanIn; i++) {
            acc += x[i] * values[off + i * fanOut + j]
          }
          z[j] = acc
        }
        off += fanIn * fanOut + fanOut
        const isHidden = layer + 2 < dims.length
        if (isHidden && normGroups > 0) {
          const groupSize = fanOut / normGroups
          for (let g = 0; g < normGroups; g++) {
            let mean = 0
            for (let k = 0; k < groupSize; k++) mean += z[g * groupSize + k]
            mean /= groupSize
            let variance = 0
            for (let k = 0; k < groupSize; k++) {
              const d = z[g * groupSize + k] - mean
              variance += d * d
            }
            variance /= groupSize
            const invStd = 1 / Math.sqrt(variance + GROUP_NORM_EPS)
            for (let k = 0; k < groupSize; k++) {
              const j = g * groupSize + k
              const xHat = (z[j] - mean) * invStd
              z[j] = xHat * values[off + j] + values[off + fanOut + j]
            }
          }
          off += 2 * fanOut
        }
        if (isHidden) {
          for (let j = 0; j < fanOut; j++) z[j] = Math.max(z[j], 0)
        }
        x = z
      }
      out.set(x, row * numClasses)
    }
    return out
  }
}

export class LinearProbeModel implements TeacherModel {
  id = 'linear-probe'
  numClasses: number
  private epochs: number
  private lr: number

  constructor(numClasses: number, epochs = 300, lr = 0.1) {
    this.numClasses = numClasses
    this.epochs = epochs
    this.lr = lr
  }

  describe(): string {
    return `linear probe on dataset features (full-batch softmax regression, ${this.epochs} steps, lr ${this.lr})`
  }

  predictLogits(dataset: Dataset): Float64Array {
    const { n, dim, numClasses } = { ...dataset, numClasses: this.numClasses }
    // zero init keeps the convex fit fully deterministic
    const w = new Float64Array(dim * numClasses)
    const b = new Float64Array(numClasses)
    const probs = new Float64Array(numClasses)
    for (let step = 0; step < this.epochs; step++) {
      const gw = new Float64Array(dim * numClasses)
      const gb = new Float64Array(numClasses)
      for (let row = 0; row < n; row++) {
        let maxZ = -Infinity
        for (let c = 0; c < numClasses; c++) {
          let z = b[c]
          for (let i = 0; i < dim; i++) z += dataset.features[row * dim + i] * w[i * numClasses + c]
          probs[c] = z
          if (z > maxZ) maxZ = z
        }
        let sum = 0
        for (let c = 0; c < numClasses; c++) {
          probs[c] = Math.exp(probs[c] - maxZ)
          sum += probs[c]
        }
        for (let c = 0; c < numClasses; c++) {
          const g = probs[c] / sum - (dataset.labels[row] === c ? 1 : 0)
          gb[c] += g / n
          for (let i = 0; i < dim; i++) {
            gw[i * numClasses + c] += (dataset.features[row * dim + i] * g) / n
          }
        }
      }
      for (let k = 0; k < gw.length; k++) w[k] -= this.lr * gw[k]
      for (let c = 0; c < numClasses; c++) b[c] -= this.lr * gb[c]
    }
    const out = new Float64Array(n * numClasses)
    for (let row = 0; row < n; row++) {
      for (let c = 0; c < numClasses; c++) {
        let z = b[c]
        for (let i = 0; i < dim; i++) z += dataset.features[row * dim + i] * w[i * numClasses + c]
        out[row * numClasses + c] = z
      }
    }
    return out
  }
}

export class PrototypeModel implements TeacherModel {
  id = 'prototype'
  numClasses: number

  constructor(numClasses: number) {
    this.numClasses = numClasses
  }

  describe(): string {
    return 'nearest class prototype (negative squared distance to class feature means)'
  }

  predictLogits(dataset: Dataset): Float64Array {
    const { n, dim } = dataset
    const means = new Float64Array(this.numClasses * dim)
    const counts = new Float64Array(this.numClasses)
    for (let row = 0; row < n; row++) {
      const label = dataset.labels[row]
      counts[label] += 1
      for (let i = 0; i < dim; i++) means[label * dim + i] += dataset.features[row * dim + i]
    }
    for (let c = 0; c < this.numClasses; c++) {
      if (counts[c] === 0) {
        throw new Error(`class ${c} has no examples; prototype model needs every class present`)
      }
      for (let i = 0; i < dim; i++) means[c * dim + i] /= counts[c]
    }
    const out = new Float64Array(n * this.numClasses)
    for (let row = 0; row < n; row++) {
      for (let c = 0; c < this.numClasses; c++) {
        let dist2 = 0
        for (let i = 0; i < dim; i++) {
          const d = dataset.features[row * dim + i] - means[c * dim + i]
          dist2 += d * d
        }
        out[row * this.numClasses + c] = -0.5 * dist2
      }
    }
    return out
  }
}

export function resolveModel(spec: string, dataset: Dataset): TeacherModel {
  if (spec.startsWith('checkpoint:')) {
    return new CheckpointModel(spec.slice('checkpoint:'.length))
  }
  if (spec === 'linear-probe') {
    return new LinearProbeModel(dataset.numClasses)
  }
  if (spec === 'prototype') {
    return new PrototypeModel(dataset.numClasses)
  }
  throw new Error(
    `unknown model ${JSON.stringify(spec)}; expected 'linear-probe', 'prototype', or 'checkpoint:<path>'`,
  )
}
