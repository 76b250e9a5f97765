/** Orbit-camera interaction math: drag to rotate, wheel to dolly. */

import { OrbitState, clampAngle } from "./state.js";

// stop just short of the poles so the view-up vector never degenerates
const ELEVATION_LIMIT = Math.PI / 2 - 1e-3;
export const MIN_RADIUS = 0.4;
export const MAX_RADIUS = 25.0;

/** Apply one pointer drag: a full-width sweep turns a full revolution in
 * azimuth, a full-height sweep pitches half a revolution. */
export function dragOrbit(
  orbit: OrbitState,
  dxPixels: number,
  dyPixels: number,
  width: number,
  height: number
): OrbitState {
  const azimuth = clampAngle(
    orbit.azimuth - (dxPixels / Math.max(width, 1)) * 2 * Math.PI
  );
  const elevation = Math.min(
    Math.max(orbit.elevation + (dyPixels / Math.max(height, 1)) * Math.PI, -ELEVATION_LIMIT),
    ELEVATION_LIMIT
  );
  return { azimuth, elevation, radius: orbit.radius };
}

/** Exponential dolly: scrolling down backs the camera away. */
export function zoomOrbit(orbit: OrbitState, wheelDeltaY: number): OrbitState {
  const radius = Math.min(
    Math.max(orbit.radius * Math.exp(wheelDeltaY * 5e-4), MIN_RADIUS),
    MAX_RADIUS
  );
  return { azimuth: orbit.azimuth, elevation: orbit.elevation, radius };
}
