// Latest-wins request scheduling: trailing-edge debounce in front of an
// async task, with a monotonic id so responses that lose the race are
// dropped instead of clobbering newer state.

export interface LatestWins<T> {
  /** Schedule a run; earlier pending runs are superseded. */
  request(task: () => Promise<T>): void
  /** Drop whatever is pending or in flight. */
  invalidate(): void
  readonly inFlight: boolean
}

export function latestWins<T>(
  apply: (value: T) => void,
  delayMs: number,
  onError?: (err: unknown) => void,
): LatestWins<T> {
  let lastId = 0
  let timer: ReturnType<typeof setTimeout> | null = null
  let pendingCount = 0

  return {
    request(task) {
      lastId++
      const thisId = lastId
      if (timer !== null) clearTimeout(timer)
      timer = setTimeout(async () => {
        timer = null
        pendingCount++
        try {
          const value = await task()
          // only the newest request may land
          if (thisId === lastId) apply(value)
        } catch (err) {
          if (thisId === lastId && onError) onError(err)
        } finally {
          pendingCount--
        }
      }, delayMs)
    },
    invalidate() {
      lastId++
      if (timer !== null) {
        clearTimeout(timer)
        timer = null
      }
    },
    get inFlight() {
      return pendingCount > 0
    },
  }
}
