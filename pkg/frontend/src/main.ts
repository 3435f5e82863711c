import { ApiClient, Latents } from './api.js'
import { latestWins } from './debounce.js'
import { Viewport } from './math.js'
import { drawScene, pickJoint } from './render.js'
import { cloneLatents, dragJoint, initialState, overlayJoints } from './state.js'

const DECODE_DEBOUNCE_MS = 80

const canvas = document.getElementById('viewport') as HTMLCanvasElement
const banner = document.getElementById('banner') as HTMLDivElement
const seedInput = document.getElementById('seed') as HTMLInputElement
const sampleBtn = document.getElementById('sample') as HTMLButtonElement
const resampleBtn = document.getElementById('resample') as HTMLButtonElement
const saveABtn = document.getElementById('save-a') as HTMLButtonElement
const saveBBtn = document.getElementById('save-b') as HTMLButtonElement
const slider = document.getElementById('alpha') as HTMLInputElement
const whichSelect = document.getElementById('which') as HTMLSelectElement
const statusLine = document.getElementById('status') as HTMLDivElement

const api = new ApiClient('')
const state = initialState()
let parents: number[] = []
let overlay: number[][] | null = null   // skeleton drawn during slider preview
let dragging: { joint: number; lastX: number; lastY: number } | null = null

function viewport(): Viewport {
  return { width: canvas.width, height: canvas.height }
}

function showError(err: unknown) {
  banner.textContent = err instanceof Error ? err.message : String(err)
  banner.classList.add('visible')
}

function clearError() {
  banner.classList.remove('visible')
}

function redraw() {
  const ctx = canvas.getContext('2d')!
  drawScene(ctx, {
    vertices: state.vertices,
    joints: overlay ?? state.latents?.e ?? null,
    parents,
    selectedJoint: state.selectedJoint,
  }, state.camera, viewport())
}

function updateControls() {
  const loaded = state.latents !== null
  resampleBtn.disabled = !loaded
  saveABtn.disabled = !loaded
  saveBBtn.disabled = !loaded
  slider.disabled = !(state.slotA && state.slotB)
  whichSelect.disabled = slider.disabled
}

// one decode in flight, newest request wins
const decoder = latestWins<number[][]>(
  (vertices) => {
    state.vertices = vertices
    clearError()
    redraw()
  },
  DECODE_DEBOUNCE_MS,
  showError,
)

function requestDecode() {
  const latents = cloneLatents(state.latents!)
  decoder.request(() => api.decode(latents))
}

function setLatents(latents: Latents) {
  state.latents = latents
  overlay = null
  updateControls()
  redraw()
  requestDecode()
}

// --- pointer interaction ---

canvas.addEventListener('pointerdown', (ev) => {
  if (!state.latents) return
  const rect = canvas.getBoundingClientRect()
  const x = ev.clientX - rect.left
  const y = ev.clientY - rect.top
  const joint = pickJoint(state.camera, state.latents.e, x, y, viewport())
  state.selectedJoint = joint
  if (joint !== null) {
    dragging = { joint, lastX: x, lastY: y }
    canvas.setPointerCapture(ev.pointerId)
  }
  redraw()
})

canvas.addEventListener('pointermove', (ev) => {
  if (!dragging || !state.latents) return
  const rect = canvas.getBoundingClientRect()
  const x = ev.clientX - rect.left
  const y = ev.clientY - rect.top
  const dx = x - dragging.lastX
  const dy = y - dragging.lastY
  dragging.lastX = x
  dragging.lastY = y
  const moved = dragJoint(state, dragging.joint, dx, dy, viewport())
  if (moved === state.latents.e) return
  state.latents.e = moved
  redraw()
  requestDecode()
})

canvas.addEventListener('pointerup', () => {
  dragging = null
})

// --- generation controls ---

function currentSeed(): number {
  const v = parseInt(seedInput.value, 10)
  return Number.isFinite(v) ? v : 0
}

sampleBtn.addEventListener('click', async () => {
  try {
    const [latents] = await api.sample(1, currentSeed())
    decoder.invalidate()
    setLatents(latents)
    statusLine.textContent = `sampled with seed ${currentSeed()}`
  } catch (err) {
    showError(err)
  }
})

resampleBtn.addEventListener('click', async () => {
  if (!state.latents) return
  try {
    const latents = await api.sampleIntrinsics(state.latents.e, currentSeed())
    decoder.invalidate()
    setLatents(latents)
    statusLine.textContent = `intrinsics resampled with seed ${currentSeed()}`
  } catch (err) {
    showError(err)
  }
})

saveABtn.addEventListener('click', () => {
  if (!state.latents) return
  state.slotA = cloneLatents(state.latents)
  updateControls()
  statusLine.textContent = 'saved slot A'
})

saveBBtn.addEventListener('click', () => {
  if (!state.latents) return
  state.slotB = cloneLatents(state.latents)
  updateControls()
  statusLine.textContent = 'saved slot B'
})

slider.addEventListener('input', () => {
  if (!state.slotA || !state.slotB) return
  const alpha = Number(slider.value)
  const which = whichSelect.value
  const a = state.slotA
  const b = state.slotB
  decoder.request(async () => {
    const mixed = await api.interpolate(a, b, alpha, which)
    overlay = overlayJoints(a, mixed, which)
    return api.decode(mixed)
  })
})

// --- camera orbit on right drag / wheel zoom ---

let orbiting: { lastX: number; lastY: number } | null = null
canvas.addEventListener('contextmenu', (ev) => ev.preventDefault())
canvas.addEventListener('pointerdown', (ev) => {
  if (ev.button === 2) orbiting = { lastX: ev.clientX, lastY: ev.clientY }
})
canvas.addEventListener('pointermove', (ev) => {
  if (!orbiting) return
  state.camera.azimuth += (ev.clientX - orbiting.lastX) * 0.01
  state.camera.elevation = Math.min(1.4, Math.max(-1.4,
    state.camera.elevation + (ev.clientY - orbiting.lastY) * 0.01))
  orbiting = { lastX: ev.clientX, lastY: ev.clientY }
  redraw()
})
canvas.addEventListener('pointerup', () => {
  orbiting = null
})
canvas.addEventListener('wheel', (ev) => {
  ev.preventDefault()
  state.camera.distance = Math.min(12, Math.max(1, state.camera.distance * (ev.deltaY > 0 ? 1.1 : 0.9)))
  redraw()
})

// --- boot ---

async function boot() {
  redraw()
  updateControls()
  try {
    const info = await api.modelInfo()
    parents = info.parents
    statusLine.textContent = `model ready: ${info.j} joints, ${info.n} points`
  } catch (err) {
    showError(err)
  }
}

void boot()
