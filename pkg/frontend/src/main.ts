/** DOM wiring: builds the control panel from the greeting metadata and
 * routes slider, scrub, drag, and option input through the session. */

import { Clip, parseClip, samplePose } from "./clip.js";
import { dragOrbit, zoomOrbit } from "./orbit.js";
import { Metadata } from "./protocol.js";
import { DisplayFrame, Session } from "./session.js";
import {
  ViewState,
  clampAngle,
  decodeFragment,
  defaultView,
  encodeFragment,
} from "./state.js";

const AXES = ["x", "y", "z"] as const;
// slider ends sit just inside (-pi, pi] so the track never wraps
const SLIDER_LIMIT = 3.1415;

function byId<T extends HTMLElement>(id: string): T {
  const element = document.getElementById(id);
  if (element === null) {
    throw new Error(`missing element #${id}`);
  }
  return element as T;
}

const banner = byId<HTMLDivElement>("banner");
const bannerText = byId<HTMLSpanElement>("banner-text");
const retryButton = byId<HTMLButtonElement>("retry");
const assetInfo = byId<HTMLDivElement>("asset-info");
const slidersBox = byId<HTMLDivElement>("sliders");
const clipInput = byId<HTMLInputElement>("clip-file");
const scrub = byId<HTMLInputElement>("scrub");
const scrubLabel = byId<HTMLSpanElement>("scrub-label");
const scaleSelect = byId<HTMLSelectElement>("scale");
const quality = byId<HTMLInputElement>("quality");
const resetButton = byId<HTMLButtonElement>("reset");
const canvas = byId<HTMLCanvasElement>("view");
const statusLine = byId<HTMLDivElement>("status-line");
const errorLine = byId<HTMLDivElement>("error-line");
const context = canvas.getContext("2d");

const restored = decodeFragment(location.hash);
let view: ViewState = restored ?? defaultView(0);
let metadata: Metadata | null = null;
let clip: Clip | null = null;
const root = { rotation: [1, 0, 0, 0], translation: [0, 0, 0] };
let shownSeq = 0;
let errorTimer: number | undefined;

function syncFragment(): void {
  history.replaceState(null, "", "#" + encodeFragment(view));
}

function pushPose(): void {
  session.setPose({
    rotations: view.angles.map((row) => [...row]),
    root_rotation: [...root.rotation],
    root_translation: [...root.translation],
  });
}

function showError(message: string): void {
  errorLine.textContent = message;
  window.clearTimeout(errorTimer);
  errorTimer = window.setTimeout(() => {
    errorLine.textContent = "";
  }, 4000);
}

function refreshSliders(): void {
  slidersBox
    .querySelectorAll<HTMLInputElement>("input[type=range]")
    .forEach((input) => {
      const joint = Number(input.dataset.joint);
      const axis = Number(input.dataset.axis);
      input.value = String(view.angles[joint][axis]);
    });
}

function buildSliders(): void {
  slidersBox.textContent = "";
  if (metadata === null || metadata.joints.length === 0) {
    slidersBox.textContent = "This asset has no rig; showing the canonical pose.";
    return;
  }
  metadata.joints.forEach((name, joint) => {
    const row = document.createElement("div");
    row.className = "joint";
    const label = document.createElement("span");
    label.className = "joint-name";
    label.textContent = name;
    row.appendChild(label);
    AXES.forEach((axisName, axis) => {
      const wrap = document.createElement("label");
      wrap.className = "axis";
      wrap.textContent = axisName;
      const input = document.createElement("input");
      input.type = "range";
      input.min = String(-SLIDER_LIMIT);
      input.max = String(SLIDER_LIMIT);
      input.step = "0.0001";
      input.value = String(view.angles[joint][axis]);
      input.dataset.joint = String(joint);
      input.dataset.axis = String(axis);
      input.addEventListener("input", () => {
        view.angles[joint][axis] = clampAngle(Number(input.value));
        pushPose();
        syncFragment();
      });
      wrap.appendChild(input);
      row.appendChild(wrap);
    });
    slidersBox.appendChild(row);
  });
}

async function showFrame(frame: DisplayFrame): Promise<void> {
  statusLine.textContent = `frame ${frame.seq} · render ${frame.renderMs.toFixed(1)} ms`;
  if (context === null) {
    return;
  }
  const blob = new Blob([frame.png], { type: "image/png" });
  if (typeof createImageBitmap === "function") {
    const bitmap = await createImageBitmap(blob); // decodes off the main thread
    if (frame.seq < shownSeq) {
      bitmap.close(); // a newer frame finished decoding first
      return;
    }
    shownSeq = frame.seq;
    canvas.width = bitmap.width;
    canvas.height = bitmap.height;
    context.drawImage(bitmap, 0, 0);
    bitmap.close();
    return;
  }
  const url = URL.createObjectURL(blob);
  const image = new Image();
  image.onload = () => {
    if (frame.seq >= shownSeq) {
      shownSeq = frame.seq;
      canvas.width = image.naturalWidth;
      canvas.height = image.naturalHeight;
      context.drawImage(image, 0, 0);
    }
    URL.revokeObjectURL(url);
  };
  image.src = url;
}

function handleMetadata(meta: Metadata): void {
  metadata = meta;
  if (view.angles.length !== meta.joints.length) {
    const base = defaultView(meta.joints.length);
    for (let j = 0; j < Math.min(view.angles.length, meta.joints.length); j++) {
      base.angles[j] = view.angles[j];
    }
    base.orbit = view.orbit;
    base.scale = view.scale;
    base.lambdaTh = view.lambdaTh;
    view = base;
  }
  assetInfo.textContent =
    `${meta.asset_id} · ${meta.voxel_count.toLocaleString()} voxels · ` +
    `${meta.resolution}³ · ${meta.base_image_size}px base`;
  buildSliders();
  scaleSelect.value = String(view.scale);
  quality.checked = view.lambdaTh < 0.005;
  if (restored !== null) {
    // make the first frame match the shared fragment, not the defaults
    pushPose();
    session.setOrbit({ ...view.orbit });
    session.setOptions({ scale: view.scale, lambda_th: view.lambdaTh });
  }
}

function handleStatus(status: "connecting" | "connected" | "disconnected"): void {
  if (status === "connected") {
    banner.classList.add("hidden");
    return;
  }
  banner.classList.remove("hidden");
  bannerText.textContent =
    status === "connecting" ? "Connecting…" : "Connection lost — retrying…";
  retryButton.classList.toggle("hidden", status === "connecting");
}

const wsUrl =
  (location.protocol === "https:" ? "wss://" : "ws://") + location.host + "/session";
const session = new Session({
  url: wsUrl,
  callbacks: {
    onMetadata: handleMetadata,
    onStatus: handleStatus,
    onFrame: (frame) => void showFrame(frame),
    onError: showError,
  },
});

retryButton.addEventListener("click", () => session.retryNow());

resetButton.addEventListener("click", () => {
  view.angles = view.angles.map(() => [0, 0, 0]);
  root.rotation = [1, 0, 0, 0];
  root.translation = [0, 0, 0];
  refreshSliders();
  pushPose();
  syncFragment();
});

function applyScrub(position: number): void {
  if (clip === null) {
    return;
  }
  const frame = samplePose(clip, position);
  view.angles = frame.rotations.map((row) => row.map(clampAngle));
  root.rotation = frame.root_rotation;
  root.translation = frame.root_translation;
  refreshSliders();
  pushPose();
  syncFragment();
  scrubLabel.textContent = `${position.toFixed(2)} / ${clip.frames.length - 1}`;
}

clipInput.addEventListener("change", async () => {
  const file = clipInput.files?.[0];
  if (file === undefined) {
    return;
  }
  let parsed: Clip;
  try {
    parsed = parseClip(await file.text());
  } catch (error) {
    showError(error instanceof Error ? error.message : String(error));
    return;
  }
  const clipJoints = parsed.frames[0].rotations.length;
  if (metadata !== null && clipJoints !== metadata.joints.length) {
    showError(`clip has ${clipJoints} joints, the rig has ${metadata.joints.length}`);
    return;
  }
  clip = parsed;
  scrub.min = "0";
  scrub.max = String(clip.frames.length - 1);
  scrub.step = "0.01";
  scrub.value = "0";
  scrub.disabled = false;
  applyScrub(0);
});

scrub.addEventListener("input", () => applyScrub(Number(scrub.value)));

scaleSelect.addEventListener("change", () => {
  view.scale = Number(scaleSelect.value);
  session.setOptions({ scale: view.scale });
  syncFragment();
});

quality.addEventListener("change", () => {
  view.lambdaTh = quality.checked ? 0.001 : 0.01;
  session.setOptions({ lambda_th: view.lambdaTh });
  syncFragment();
});

let dragging = false;
let lastX = 0;
let lastY = 0;

canvas.addEventListener("pointerdown", (event) => {
  dragging = true;
  lastX = event.clientX;
  lastY = event.clientY;
  canvas.setPointerCapture(event.pointerId);
});

canvas.addEventListener("pointermove", (event) => {
  if (!dragging) {
    return;
  }
  view.orbit = dragOrbit(
    view.orbit,
    event.clientX - lastX,
    event.clientY - lastY,
    canvas.clientWidth || canvas.width,
    canvas.clientHeight || canvas.height
  );
  lastX = event.clientX;
  lastY = event.clientY;
  session.setOrbit({ ...view.orbit });
  syncFragment();
});

canvas.addEventListener("pointerup", () => {
  dragging = false;
});
canvas.addEventListener("pointercancel", () => {
  dragging = false;
});

canvas.addEventListener(
  "wheel",
  (event) => {
    event.preventDefault();
    view.orbit = zoomOrbit(view.orbit, event.deltaY);
    session.setOrbit({ ...view.orbit });
    syncFragment();
  },
  { passive: false }
);

session.connect();
