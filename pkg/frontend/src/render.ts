import { Camera, Projected, Viewport, project } from './math.js'
import { bonePairs } from './state.js'

// Canvas renderer: depth-shaded point cloud for the surface, spheres and
// bones for the skeleton, a ground grid when there is nothing to show.

export interface SceneInput {
  vertices: number[][] | null
  joints: number[][] | null
  parents: number[]
  selectedJoint: number | null
}

const POINT_NEAR = 2.0   // depth range mapped onto the shading ramp
const POINT_FAR = 6.0

export function projectPoints(cam: Camera, points: number[][], view: Viewport): Projected[] {
  return points.map((p) => project(cam, [p[0], p[1], p[2]], view))
}

function shade(depth: number): string {
  const t = Math.min(1, Math.max(0, (depth - POINT_NEAR) / (POINT_FAR - POINT_NEAR)))
  const v = Math.round(230 - t * 150)
  return `rgb(${v},${v},${v + 20})`
}

export function drawGrid(ctx: CanvasRenderingContext2D, cam: Camera, view: Viewport): void {
  ctx.strokeStyle = '#2a2f3a'
  ctx.lineWidth = 1
  const half = 2
  for (let i = -half; i <= half; i++) {
    for (const line of [
      [[i, 0, -half], [i, 0, half]],
      [[-half, 0, i], [half, 0, i]],
    ]) {
      const a = project(cam, line[0] as [number, number, number], view)
      const b = project(cam, line[1] as [number, number, number], view)
      if (a.depth <= 0 || b.depth <= 0) continue
      ctx.beginPath()
      ctx.moveTo(a.x, a.y)
      ctx.lineTo(b.x, b.y)
      ctx.stroke()
    }
  }
}

export function drawScene(ctx: CanvasRenderingContext2D, scene: SceneInput, cam: Camera, view: Viewport): void {
  ctx.clearRect(0, 0, view.width, view.height)
  ctx.fillStyle = '#14161c'
  ctx.fillRect(0, 0, view.width, view.height)

  if (!scene.vertices && !scene.joints) {
    drawGrid(ctx, cam, view)
    return
  }

  if (scene.vertices) {
    const pts = projectPoints(cam, scene.vertices, view)
    // far to near so close points paint over distant ones
    const order = pts.map((_, i) => i).sort((a, b) => pts[b].depth - pts[a].depth)
    for (const i of order) {
      const p = pts[i]
      if (p.depth <= 0) continue
      ctx.fillStyle = shade(p.depth)
      ctx.beginPath()
      ctx.arc(p.x, p.y, Math.max(1.2, 6 / p.depth), 0, Math.PI * 2)
      ctx.fill()
    }
  }

  if (scene.joints) {
    const js = projectPoints(cam, scene.joints, view)
    ctx.strokeStyle = '#e0a33c'
    ctx.lineWidth = 2
    for (const [a, b] of bonePairs(scene.parents)) {
      if (js[a].depth <= 0 || js[b].depth <= 0) continue
      ctx.beginPath()
      ctx.moveTo(js[a].x, js[a].y)
      ctx.lineTo(js[b].x, js[b].y)
      ctx.stroke()
    }
    js.forEach((p, i) => {
      if (p.depth <= 0) return
      ctx.fillStyle = i === scene.selectedJoint ? '#ff5d5d' : '#f4c860'
      ctx.beginPath()
      ctx.arc(p.x, p.y, i === scene.selectedJoint ? 7 : 5, 0, Math.PI * 2)
      ctx.fill()
    })
  }
}

/** Index of the joint whose projection is within `radius` px, nearest first. */
export function pickJoint(cam: Camera, joints: number[][], x: number, y: number, view: Viewport, radius = 10): number | null {
  const js = projectPoints(cam, joints, view)
  let best: number | null = null
  let bestDist = radius
  js.forEach((p, i) => {
    if (p.depth <= 0) return
    const d = Math.hypot(p.x - x, p.y - y)
    if (d <= bestDist) {
      best = i
      bestDist = d
    }
  })
  return best
}
