import init, { Studio } from "./pkg/deform_web.js";

const canvas = document.getElementById("view");
const ctx = canvas.getContext("2d");
const status = document.getElementById("status");
const controls = ["sample", "subdiv", "alpha", "commit"].map((id) => document.getElementById(id));
const [sampleBtn, subdivInput, alphaInput, commitBtn] = controls;

let studio;
let positions, indices;
let yaw = 0.6, pitch = 0.3;
let drag = null;
let sampleSeed = 1;

const SCALE = 200;

function rotate([x, y, z]) {
  const cy = Math.cos(yaw), sy = Math.sin(yaw), cp = Math.cos(pitch), sp = Math.sin(pitch);
  const x1 = cy * x + sy * z, z1 = -sy * x + cy * z;
  return [x1, cp * y - sp * z1, sp * y + cp * z1];
}

// inverse of rotate, for turning a screen-space drag into a world delta
function unrotate([x, y, z]) {
  const cy = Math.cos(yaw), sy = Math.sin(yaw), cp = Math.cos(pitch), sp = Math.sin(pitch);
  const y1 = cp * y + sp * z, z1 = -sp * y + cp * z;
  return [cy * x - sy * z1, y1, sy * x + cy * z1];
}

function screen(p) {
  return [canvas.width / 2 + SCALE * p[0], canvas.height / 2 - SCALE * p[1]];
}

function vertex(i) {
  return [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
}

function refresh() {
  positions = studio.positions();
  indices = studio.indices();
  document.getElementById("latent").textContent =
    "[" + Array.from(studio.latent(), (v) => v.toFixed(3)).join(", ") + "]";
  draw();
}

function draw() {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const n = positions.length / 3;
  const view = new Array(n);
  for (let i = 0; i < n; i++) view[i] = rotate(vertex(i));
  const tris = [];
  for (let f = 0; f < indices.length; f += 3) {
    const a = view[indices[f]], b = view[indices[f + 1]], c = view[indices[f + 2]];
    const u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    const v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    const nz = u[0] * v[1] - u[1] * v[0];
    if (nz <= 0) continue;
    const len = Math.hypot(u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], nz);
    tris.push({ pts: [a, b, c], depth: a[2] + b[2] + c[2], shade: nz / len });
  }
  tris.sort((s, t) => t.depth - s.depth);
  for (const t of tris) {
    const g = Math.round(70 + 160 * t.shade);
    ctx.fillStyle = `rgb(${g}, ${g}, ${Math.min(255, g + 25)})`;
    ctx.strokeStyle = "rgba(0,0,0,0.15)";
    ctx.beginPath();
    t.pts.forEach((p, k) => {
      const [sx, sy] = screen(p);
      k === 0 ? ctx.moveTo(sx, sy) : ctx.lineTo(sx, sy);
    });
    ctx.closePath();
    ctx.fill();
    ctx.stroke();
  }
  const base = studio.baseVertexCount();
  for (let i = 0; i < base; i++) {
    if (view[i][2] < 0) continue;
    const [sx, sy] = screen(view[i]);
    ctx.fillStyle = drag && drag.vertex === i ? "#d33" : "#246";
    ctx.beginPath();
    ctx.arc(sx, sy, 4, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function pick(mx, my) {
  let best = -1, bestD = 64;
  for (let i = 0; i < studio.baseVertexCount(); i++) {
    const p = rotate(vertex(i));
    if (p[2] < 0) continue;
    const [sx, sy] = screen(p);
    const d = (sx - mx) ** 2 + (sy - my) ** 2;
    if (d < bestD) { bestD = d; best = i; }
  }
  return best;
}

function guarded(fn) {
  try {
    fn();
  } catch (e) {
    status.textContent = "Error: " + e;
  }
}

canvas.addEventListener("pointerdown", (ev) => {
  if (!studio) return;
  const v = pick(ev.offsetX, ev.offsetY);
  drag = { vertex: v, x: ev.offsetX, y: ev.offsetY, yaw, pitch };
  canvas.setPointerCapture(ev.pointerId);
});

canvas.addEventListener("pointermove", (ev) => {
  if (!drag) return;
  const dx = ev.offsetX - drag.x, dy = ev.offsetY - drag.y;
  if (drag.vertex < 0) {
    yaw = drag.yaw + dx * 0.01;
    pitch = Math.max(-1.5, Math.min(1.5, drag.pitch + dy * 0.01));
    draw();
  }
});

canvas.addEventListener("pointerup", (ev) => {
  if (!drag) return;
  const d = drag;
  drag = null;
  if (d.vertex < 0) return;
  const delta = unrotate([(ev.offsetX - d.x) / SCALE, -(ev.offsetY - d.y) / SCALE, 0]);
  guarded(() => {
    const residual = studio.drag(d.vertex, delta[0], delta[1], delta[2]);
    alphaInput.value = 0;
    status.textContent = `Vertex ${d.vertex}: handle error ${residual.toExponential(2)}`;
    refresh();
  });
});

sampleBtn.addEventListener("click", () => guarded(() => {
  studio.sample(sampleSeed++);
  alphaInput.value = 0;
  status.textContent = "Sampled a new latent";
  refresh();
}));

subdivInput.addEventListener("input", () => guarded(() => {
  studio.setSubdiv(Number(subdivInput.value));
  refresh();
}));

alphaInput.addEventListener("input", () => guarded(() => {
  studio.semantic(Number(alphaInput.value));
  refresh();
}));

commitBtn.addEventListener("click", () => guarded(() => {
  studio.commit();
  alphaInput.value = 0;
  status.textContent = "Edit kept; new edits start here";
}));

await init();
// let the status text paint before the blocking training run
setTimeout(() => guarded(() => {
  const t = performance.now();
  studio = new Studio(7);
  status.textContent = `Model trained in ${((performance.now() - t) / 1000).toFixed(1)} s`;
  controls.forEach((c) => (c.disabled = false));
  refresh();
}), 30);
