import { describe, expect, it } from 'vitest'

import { defaultCamera, project, unprojectDelta, Vec3 } from '../src/math.js'

const VIEW = { width: 400, height: 400 }

describe('project', () => {
  it('matches the hand-computed cube projection at the default camera', () => {
    // eye (0,0,4) looking down -z, vertical fov 45deg, 400x400 viewport.
    // focal length f = 200 / tan(22.5deg) = 482.842712474619
    // front face (z=+0.5): depth 3.5, offset f*0.5/3.5 = 68.977530353517
    // back face  (z=-0.5): depth 4.5, offset f*0.5/4.5 = 53.64919027495767
    const cam = defaultCamera()
    const fo = 68.977530353517
    const bo = 53.64919027495767
    const cube: [Vec3, number, number, number][] = [
      [[-0.5, -0.5, 0.5], 200 - fo, 200 + fo, 3.5],
      [[0.5, -0.5, 0.5], 200 + fo, 200 + fo, 3.5],
      [[-0.5, 0.5, 0.5], 200 - fo, 200 - fo, 3.5],
      [[0.5, 0.5, 0.5], 200 + fo, 200 - fo, 3.5],
      [[-0.5, -0.5, -0.5], 200 - bo, 200 + bo, 4.5],
      [[0.5, -0.5, -0.5], 200 + bo, 200 + bo, 4.5],
      [[-0.5, 0.5, -0.5], 200 - bo, 200 - bo, 4.5],
      [[0.5, 0.5, -0.5], 200 + bo, 200 - bo, 4.5],
    ]
    for (const [p, sx, sy, depth] of cube) {
      const got = project(cam, p, VIEW)
      expect(got.x).toBeCloseTo(sx, 9)
      expect(got.y).toBeCloseTo(sy, 9)
      expect(got.depth).toBeCloseTo(depth, 9)
    }
  })

  it('keeps the target at the viewport center from any orbit angle', () => {
    for (const [az, el] of [[0, 0], [1.1, 0.4], [-2.5, -0.9], [Math.PI, 1.2]]) {
      const cam = { ...defaultCamera(), azimuth: az, elevation: el }
      const got = project(cam, cam.target, VIEW)
      expect(got.x).toBeCloseTo(200, 8)
      expect(got.y).toBeCloseTo(200, 8)
      expect(got.depth).toBeCloseTo(cam.distance, 8)
    }
  })

  it('moves screen y up when world y grows', () => {
    const cam = defaultCamera()
    const lo = project(cam, [0, 0, 0], VIEW)
    const hi = project(cam, [0, 1, 0], VIEW)
    expect(hi.y).toBeLessThan(lo.y)
    expect(hi.x).toBeCloseTo(lo.x, 9)
  })
})

describe('unprojectDelta', () => {
  it('maps screen x to world x only at the identity camera', () => {
    const cam = defaultCamera()
    const delta = unprojectDelta(cam, [0, 0, 0], 25, 0, VIEW)
    expect(delta[0]).toBeGreaterThan(0)
    expect(delta[1]).toBeCloseTo(0, 12)
    expect(delta[2]).toBeCloseTo(0, 12)
  })

  it('inverts project on the camera-parallel plane', () => {
    const cam = { ...defaultCamera(), azimuth: 0.8, elevation: -0.3, distance: 5 }
    const p: Vec3 = [0.4, -0.2, 0.7]
    const before = project(cam, p, VIEW)
    const delta = unprojectDelta(cam, p, 17, -9, VIEW)
    const moved: Vec3 = [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]]
    const after = project(cam, moved, VIEW)
    expect(after.x - before.x).toBeCloseTo(17, 6)
    expect(after.y - before.y).toBeCloseTo(-9, 6)
    expect(after.depth).toBeCloseTo(before.depth, 9)
  })

  it('returns zero for a zero delta', () => {
    const delta = unprojectDelta(defaultCamera(), [1, 2, 3], 0, 0, VIEW)
    expect(delta).toEqual([0, 0, 0])
  })
})
