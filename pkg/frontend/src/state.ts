import type { Latents } from './api.js'
import { Camera, Vec3, Viewport, add, defaultCamera, unprojectDelta } from './math.js'

// Pure editor state and transitions. Rendering and network wiring live in
// main.ts; everything here is plain data in, plain data out.

export interface EditorState {
  latents: Latents | null
  vertices: number[][] | null
  slotA: Latents | null
  slotB: Latents | null
  camera: Camera
  selectedJoint: number | null
  seed: number
}

export function initialState(): EditorState {
  return {
    latents: null,
    vertices: null,
    slotA: null,
    slotB: null,
    camera: defaultCamera(),
    selectedJoint: null,
    seed: 0,
  }
}

export function cloneLatents(l: Latents): Latents {
  return { e: l.e.map((r) => r.slice()), h: l.h.map((r) => r.slice()) }
}

/**
 * Move one joint by a screen-space delta, unprojected onto the camera
 * parallel plane through the joint. Returns the same e reference when the
 * delta is zero so callers can skip the decode round trip.
 */
export function dragJoint(
  state: EditorState,
  joint: number,
  dx: number,
  dy: number,
  view: Viewport,
): number[][] {
  if (!state.latents) throw new Error('no latents to edit')
  const e = state.latents.e
  if (joint < 0 || joint >= e.length) throw new Error(`joint ${joint} out of range`)
  if (dx === 0 && dy === 0) return e
  const p = e[joint] as Vec3
  const delta = unprojectDelta(state.camera, p, dx, dy, view)
  const moved = e.map((r) => r.slice())
  moved[joint] = add(p, delta)
  return moved
}

/** Joints the skeleton overlay should show for an interpolation preview. */
export function overlayJoints(slotA: Latents, mixed: Latents, which: string): number[][] {
  // intrinsics-only blends keep the skeleton pinned at slot A
  return which === 'intrinsics' ? slotA.e : mixed.e
}

export function bonePairs(parents: number[]): [number, number][] {
  const out: [number, number][] = []
  for (let i = 0; i < parents.length; i++) {
    if (parents[i] >= 0) out.push([parents[i], i])
  }
  return out
}
