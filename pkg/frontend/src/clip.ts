/** Pose-clip parsing and scrub-position sampling.
 *
 * Scrubbing interpolates joint Euler angles and the root translation
 * linearly between the two neighboring frames. The root quaternion is
 * sign-aligned, lerped, and renormalized; preview clips are dense
 * enough that this is indistinguishable from slerp at display size.
 */

export interface ClipFrame {
  rotations: number[][];
  root_rotation: number[];
  root_translation: number[];
}

export interface Clip {
  fps: number;
  frames: ClipFrame[];
}

const IDENTITY_ROTATION = [1, 0, 0, 0];
const ZERO_TRANSLATION = [0, 0, 0];

function isFiniteNumber(value: unknown): value is number {
  return typeof value === "number" && Number.isFinite(value);
}

function isVector(value: unknown, length: number): value is number[] {
  return Array.isArray(value) && value.length === length && value.every(isFiniteNumber);
}

function parseFrame(doc: unknown, index: number, jointCount: number): ClipFrame {
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new Error(`clip frame ${index} is not an object`);
  }
  const frame = doc as Record<string, unknown>;
  const rotations = frame.rotations;
  if (
    !Array.isArray(rotations) ||
    rotations.length !== jointCount ||
    !rotations.every((row) => isVector(row, 3))
  ) {
    throw new Error(`clip frame ${index} needs ${jointCount} [x, y, z] rotations`);
  }
  const rootRotation = frame.root_rotation ?? IDENTITY_ROTATION;
  if (!isVector(rootRotation, 4)) {
    throw new Error(`clip frame ${index} root_rotation must be [w, x, y, z]`);
  }
  const rootTranslation = frame.root_translation ?? ZERO_TRANSLATION;
  if (!isVector(rootTranslation, 3)) {
    throw new Error(`clip frame ${index} root_translation must be [x, y, z]`);
  }
  return {
    rotations: (rotations as number[][]).map((row) => [...row]),
    root_rotation: [...rootRotation],
    root_translation: [...rootTranslation],
  };
}

export function parseClip(text: string): Clip {
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch {
    throw new Error("clip file is not valid JSON");
  }
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new Error("clip file must hold an object");
  }
  const clip = doc as Record<string, unknown>;
  if (!isFiniteNumber(clip.fps) || clip.fps <= 0) {
    throw new Error("clip fps must be a positive number");
  }
  if (!Array.isArray(clip.frames) || clip.frames.length === 0) {
    throw new Error("clip needs at least one frame");
  }
  const head: unknown = clip.frames[0];
  const headRotations =
    typeof head === "object" && head !== null
      ? (head as Record<string, unknown>).rotations
      : undefined;
  const jointCount = Array.isArray(headRotations) ? headRotations.length : -1;
  const frames = clip.frames.map((f, i) => parseFrame(f, i, jointCount));
  return { fps: clip.fps, frames };
}

function lerp(a: number, b: number, t: number): number {
  return a + (b - a) * t;
}

function copyFrame(frame: ClipFrame): ClipFrame {
  return {
    rotations: frame.rotations.map((row) => [...row]),
    root_rotation: [...frame.root_rotation],
    root_translation: [...frame.root_translation],
  };
}

/** Sample the clip at a fractional frame position, clamped to the clip's
 * range; integer positions return that frame exactly. */
export function samplePose(clip: Clip, position: number): ClipFrame {
  const last = clip.frames.length - 1;
  const p = Math.min(Math.max(position, 0), last);
  const lower = Math.min(Math.floor(p), last);
  const t = p - lower;
  const a = clip.frames[lower];
  if (t === 0) {
    return copyFrame(a);
  }
  const b = clip.frames[lower + 1];
  // antipodal quaternions encode the same rotation; align signs before
  // the lerp or interpolation would pass through zero
  const dot = a.root_rotation.reduce((s, w, i) => s + w * b.root_rotation[i], 0);
  const sign = dot < 0 ? -1 : 1;
  const q = a.root_rotation.map((w, i) => lerp(w, sign * b.root_rotation[i], t));
  const norm = Math.hypot(...q);
  return {
    rotations: a.rotations.map((row, j) =>
      row.map((value, axis) => lerp(value, b.rotations[j][axis], t))
    ),
    root_rotation: norm > 0 ? q.map((w) => w / norm) : [...IDENTITY_ROTATION],
    root_translation: a.root_translation.map((value, i) =>
      lerp(value, b.root_translation[i], t)
    ),
  };
}
