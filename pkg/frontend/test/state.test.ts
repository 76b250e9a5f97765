import { describe, expect, it } from "vitest";

import {
  ViewState,
  clampAngle,
  decodeFragment,
  defaultView,
  encodeFragment,
} from "../src/state.js";

describe("clampAngle", () => {
  it("keeps values already inside (-pi, pi]", () => {
    expect(clampAngle(0)).toBe(0);
    expect(clampAngle(1.2)).toBe(1.2);
    expect(clampAngle(-3)).toBe(-3);
    expect(clampAngle(Math.PI)).toBe(Math.PI);
  });

  it("maps -pi to +pi so the boundary has one representation", () => {
    expect(clampAngle(-Math.PI)).toBe(Math.PI);
  });

  it("wraps by whole turns", () => {
    expect(clampAngle(2 * Math.PI)).toBeCloseTo(0, 12);
    expect(clampAngle(Math.PI + 0.25)).toBeCloseTo(-Math.PI + 0.25, 12);
    expect(clampAngle(-1.5 * Math.PI)).toBeCloseTo(0.5 * Math.PI, 12);
    expect(clampAngle(4 * Math.PI + 1)).toBeCloseTo(1, 12);
  });

  it("maps non-finite input to zero", () => {
    expect(clampAngle(Number.NaN)).toBe(0);
    expect(clampAngle(Number.POSITIVE_INFINITY)).toBe(0);
  });
});

describe("fragment codec", () => {
  const state: ViewState = {
    angles: [
      [0.1, -1.25, 3.0004],
      [Math.PI, 0, -0.7853981633974483],
    ],
    orbit: { azimuth: 0.6123456789012345, elevation: -0.35, radius: 3.2 },
    scale: 0.5,
    lambdaTh: 0.001,
  };

  it("round-trips a view bit-identically", () => {
    const decoded = decodeFragment(encodeFragment(state));
    expect(decoded).toEqual(state);
  });

  it("round-trips the default view with and without the # prefix", () => {
    const fragment = encodeFragment(defaultView(3));
    expect(decodeFragment(fragment)).toEqual(defaultView(3));
    expect(decodeFragment("#" + fragment)).toEqual(defaultView(3));
  });

  it("clamps out-of-range angles on restore", () => {
    const wild: ViewState = {
      ...defaultView(1),
      angles: [[10, -10, 0]],
    };
    const decoded = decodeFragment(encodeFragment(wild));
    expect(decoded?.angles[0][0]).toBeCloseTo(clampAngle(10), 12);
    expect(decoded?.angles[0][1]).toBeCloseTo(clampAngle(-10), 12);
  });

  it("returns null for foreign or damaged fragments", () => {
    expect(decodeFragment("")).toBeNull();
    expect(decodeFragment("#section-3")).toBeNull();
    expect(decodeFragment("v=%7Bnope")).toBeNull();
    expect(decodeFragment("v=" + encodeURIComponent("[1,2,3]"))).toBeNull();
    expect(
      decodeFragment("v=" + encodeURIComponent('[[["a",0,0]],[0,0,3],1,0.01]'))
    ).toBeNull();
    expect(
      decodeFragment("v=" + encodeURIComponent("[[[0,0,0]],[0,0,3],-1,0.01]"))
    ).toBeNull();
    expect(
      decodeFragment("v=" + encodeURIComponent("[[[0,0,null]],[0,0,3],1,0.01]"))
    ).toBeNull();
  });
});
