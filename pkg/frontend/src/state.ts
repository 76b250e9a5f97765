/** View state shown in the controls, and the URL-fragment codec that
 * makes a view shareable. Encoding goes through JSON so every float
 * restores bit-identically. */

export interface OrbitState {
  azimuth: number;
  elevation: number;
  radius: number;
}

export interface ViewState {
  /** Per joint, XYZ rotations in radians, each in (-pi, pi]. */
  angles: number[][];
  orbit: OrbitState;
  scale: number;
  lambdaTh: number;
}

export const TWO_PI = 2 * Math.PI;

/** Wrap an angle to (-pi, pi]; +pi is kept (never mapped to -pi) so
 * every angle has one canonical representation. */
export function clampAngle(value: number): number {
  if (!Number.isFinite(value)) {
    return 0;
  }
  let a = value % TWO_PI;
  if (a <= -Math.PI) {
    a += TWO_PI;
  } else if (a > Math.PI) {
    a -= TWO_PI;
  }
  return a;
}

/** The canonical pose under the server's default camera and options. */
export function defaultView(jointCount: number): ViewState {
  return {
    angles: Array.from({ length: jointCount }, () => [0, 0, 0]),
    orbit: { azimuth: 0.6, elevation: 0.35, radius: 3.2 },
    scale: 1.0,
    lambdaTh: 0.01,
  };
}

function isFiniteNumber(value: unknown): value is number {
  return typeof value === "number" && Number.isFinite(value);
}

export function encodeFragment(state: ViewState): string {
  const doc = [
    state.angles,
    [state.orbit.azimuth, state.orbit.elevation, state.orbit.radius],
    state.scale,
    state.lambdaTh,
  ];
  return "v=" + encodeURIComponent(JSON.stringify(doc));
}

/** Inverse of encodeFragment; returns null on anything unparseable so a
 * stale or foreign fragment degrades to the default view. */
export function decodeFragment(fragment: string): ViewState | null {
  const text = fragment.startsWith("#") ? fragment.slice(1) : fragment;
  if (!text.startsWith("v=")) {
    return null;
  }
  let doc: unknown;
  try {
    doc = JSON.parse(decodeURIComponent(text.slice(2)));
  } catch {
    return null;
  }
  if (!Array.isArray(doc) || doc.length !== 4) {
    return null;
  }
  const [angles, orbit, scale, lambdaTh] = doc as unknown[];
  if (
    !Array.isArray(angles) ||
    !angles.every(
      (row) => Array.isArray(row) && row.length === 3 && row.every(isFiniteNumber)
    )
  ) {
    return null;
  }
  if (!Array.isArray(orbit) || orbit.length !== 3 || !orbit.every(isFiniteNumber)) {
    return null;
  }
  if (!isFiniteNumber(scale) || scale <= 0 || !isFiniteNumber(lambdaTh)) {
    return null;
  }
  return {
    angles: (angles as number[][]).map((row) => row.map(clampAngle)),
    orbit: { azimuth: orbit[0], elevation: orbit[1], radius: orbit[2] },
    scale,
    lambdaTh,
  };
}
