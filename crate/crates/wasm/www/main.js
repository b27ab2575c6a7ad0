import init, { storage, encode, decode, sweep } from "./pkg/mars_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function show(id, f) {
  const el = $(id);
  try {
    el.textContent = f();
    el.className = "";
  } catch (e) {
    el.textContent = String(e);
    el.className = "err";
  }
}

function updateStorage() {
  $("st-ratio-v").textContent = num("st-ratio").toFixed(3);
  show("st-out-text", () => {
    const r = JSON.parse(storage(num("st-k"), num("st-in"), num("st-out"), num("st-bits"), num("st-ratio")));
    return `original ${r.original_mb.toFixed(2)} Mb\n` +
      `weights  ${r.weight_kb.toFixed(2)} Kb\n` +
      `index    ${r.index_kb.toFixed(2)} Kb\n` +
      `rate     ${r.compression_rate.toFixed(2)}x`;
  });
}

function plot(points) {
  const c = $("sw-plot");
  const g = c.getContext("2d");
  const pad = 40;
  const w = c.width - 2 * pad;
  const h = c.height - 2 * pad;
  const top = Math.max(...points.map((p) => p.speedup)) * 1.1;
  g.clearRect(0, 0, c.width, c.height);
  g.strokeStyle = "#888";
  g.strokeRect(pad, pad, w, h);
  g.fillStyle = "#000";
  g.fillText("zero group-set ratio", pad + w / 2 - 50, c.height - 10);
  g.fillText(`speedup (max ${top.toFixed(1)})`, 4, pad - 10);
  g.strokeStyle = "#2060c0";
  g.beginPath();
  points.forEach((p, i) => {
    const x = pad + p.zero_groupset_ratio * w;
    const y = pad + h - (p.speedup / top) * h;
    if (i === 0) g.moveTo(x, y); else g.lineTo(x, y);
    g.fillRect(x - 2, y - 2, 4, 4);
  });
  g.stroke();
}

function runSweep() {
  show("sw-text", () => {
    const pts = JSON.parse(sweep(num("sw-in"), num("sw-out"), num("sw-size"), 19, 7n));
    plot(pts);
    return pts.map((p) =>
      `${p.zero_groupset_ratio.toFixed(3)}  ${p.speedup.toFixed(2)}x  cycles ${p.core_cycles}/${p.dense_core_cycles}`
    ).join("\n");
  });
}

await init();
for (const id of ["st-k", "st-in", "st-out", "st-bits", "st-ratio"]) {
  $(id).addEventListener("input", updateStorage);
}
$("ix-encode").addEventListener("click", () => show("ix-out", () => {
  const w = encode($("ix-first").checked, num("ix-count"), num("ix-spatial"), num("ix-chunk"));
  $("ix-word").value = "0x" + w.toString(16).padStart(4, "0");
  return `word ${$("ix-word").value} = ${w.toString(2).padStart(16, "0")}`;
}));
$("ix-decode").addEventListener("click", () => show("ix-out", () => {
  const f = JSON.parse(decode(Number($("ix-word").value) & 0xffff));
  return `first ${f.first}  count ${f.count}  spatial ${f.spatial}  chunk ${f.chunk}`;
}));
$("sw-run").addEventListener("click", runSweep);
updateStorage();
runSweep();
