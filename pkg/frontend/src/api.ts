// Typed client for the inference service. All model math happens server
// side; this module only moves JSON and reports failures.

export interface Latents {
  e: number[][]
  h: number[][]
}

export interface ModelInfo {
  j: number
  d_h: number
  n: number
  parents: number[]
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>

export class ServiceError extends Error {
  constructor(readonly code: string, readonly status: number) {
    super(`service error ${status}: ${code}`)
  }
}

export class ApiClient {
  constructor(private baseUrl: string, private fetchFn: FetchLike = fetch.bind(globalThis)) {}

  private async post(path: string, body: unknown): Promise<any> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    })
    const data = await resp.json()
    if (!resp.ok) throw new ServiceError(data.error ?? 'unknown', resp.status)
    return data
  }

  async modelInfo(): Promise<ModelInfo> {
    const resp = await this.fetchFn(this.baseUrl + '/model-info')
    if (!resp.ok) throw new ServiceError('model_info', resp.status)
    return resp.json()
  }

  async decode(latents: Latents): Promise<number[][]> {
    const data = await this.post('/decode', { latents })
    return data.mesh.vertices
  }

  async sampleIntrinsics(e: number[][], seed: number): Promise<Latents> {
    const data = await this.post('/sample_intrinsics', { e, seed })
    return data.latents
  }

  async sample(count: number, seed: number): Promise<Latents[]> {
    const data = await this.post('/sample', { count, seed })
    return data.latents
  }

  async interpolate(from: Latents, to: Latents, alpha: number, which: string): Promise<Latents> {
    const data = await this.post('/interpolate', { from, to, alpha, which })
    return data.latents
  }
}
