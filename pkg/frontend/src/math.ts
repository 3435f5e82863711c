// Minimal 3D math for the viewport: orbit camera, perspective projection,
// and the inverse mapping used when dragging joints. Row vectors, y up.

export type Vec3 = [number, number, number]

export interface Camera {
  azimuth: number    // radians around y, 0 looks down -z
  elevation: number  // radians above the horizon
  distance: number
  target: Vec3
  fov: number        // vertical, radians
}

export interface Viewport {
  width: number
  height: number
}

export interface Projected {
  x: number
  y: number
  depth: number  // distance along the view axis, for sorting and culling
}

export function defaultCamera(): Camera {
  return { azimuth: 0, elevation: 0, distance: 4, target: [0, 0, 0], fov: Math.PI / 4 }
}

export function add(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

export function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

export function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s]
}

/** Camera position and orthonormal view basis (right, up, forward). */
export function cameraBasis(cam: Camera) {
  const ce = Math.cos(cam.elevation)
  const se = Math.sin(cam.elevation)
  const ca = Math.cos(cam.azimuth)
  const sa = Math.sin(cam.azimuth)
  // orbit position: azimuth 0, elevation 0 puts the eye at target + [0, 0, d]
  const eye: Vec3 = add(cam.target, [cam.distance * ce * sa, cam.distance * se, cam.distance * ce * ca])
  const forward: Vec3 = [-ce * sa, -se, -ce * ca]           // unit, eye -> target
  const right: Vec3 = [ca, 0, -sa]                          // horizontal by construction
  const up: Vec3 = [-se * sa, ce, -se * ca]                 // forward x right
  return { eye, right, up, forward }
}

/**
 * Perspective-project a world point onto the viewport. Screen x grows right,
 * screen y grows down, matching canvas coordinates. Points at or behind the
 * eye plane get a non-positive depth and should be skipped by callers.
 */
export function project(cam: Camera, p: Vec3, view: Viewport): Projected {
  const { eye, right, up, forward } = cameraBasis(cam)
  const d = sub(p, eye)
  const depth = d[0] * forward[0] + d[1] * forward[1] + d[2] * forward[2]
  const x = d[0] * right[0] + d[1] * right[1] + d[2] * right[2]
  const y = d[0] * up[0] + d[1] * up[1] + d[2] * up[2]
  const f = (view.height / 2) / Math.tan(cam.fov / 2)
  return {
    x: view.width / 2 + (f * x) / depth,
    y: view.height / 2 - (f * y) / depth,
    depth,
  }
}

/**
 * Map a screen-pixel delta to a world delta on the camera-parallel plane
 * through `p`. Inverse of `project` restricted to that plane: dragging a
 * joint keeps it under the cursor at its own depth.
 */
export function unprojectDelta(cam: Camera, p: Vec3, dx: number, dy: number, view: Viewport): Vec3 {
  const { eye, right, up, forward } = cameraBasis(cam)
  const d = sub(p, eye)
  const depth = d[0] * forward[0] + d[1] * forward[1] + d[2] * forward[2]
  const f = (view.height / 2) / Math.tan(cam.fov / 2)
  const wx = (dx * depth) / f
  const wy = (-dy * depth) / f
  return add(scale(right, wx), scale(up, wy))
}
