import init, { gate_map, gates_at, expert_color, class_names, synth_slice, focal_curve } from "./pkg/molre_web.js";

const $ = (id) => document.getElementById(id);
const SLICES = 24;
const SIZE = 96;
const GATE_RES = 160;
const EXTENT = 3;

function bindOutput(input) {
  const out = input.parentElement.querySelector("output");
  const show = () => { if (out) out.textContent = input.value; };
  input.addEventListener("input", show);
  show();
}

function blit(canvas, rgba, w, h) {
  const tmp = document.createElement("canvas");
  tmp.width = w;
  tmp.height = h;
  tmp.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function gateParams() {
  return [Number($("g-experts").value), Number($("g-hidden").value), Number($("g-sharp").value), BigInt($("g-seed").value || 0)];
}

function drawGates() {
  const [k, h, s, seed] = gateParams();
  blit($("gate-canvas"), gate_map(k, h, s, seed, GATE_RES, EXTENT), GATE_RES, GATE_RES);
}

function showGates(ev) {
  const c = $("gate-canvas");
  const r = c.getBoundingClientRect();
  const x = ((ev.clientX - r.left) / r.width) * 2 * EXTENT - EXTENT;
  const y = EXTENT - ((ev.clientY - r.top) / r.height) * 2 * EXTENT;
  const g = gates_at(...gateParams(), x, y);
  $("gates").innerHTML = `x = (${x.toFixed(2)}, ${y.toFixed(2)})<br>` +
    Array.from(g, (v, i) => `<span><i class="swatch" style="background:${expert_color(i)}"></i>${v.toFixed(3)}</span>`).join(" ");
}

function classMask() {
  let m = 0;
  document.querySelectorAll("#classes input").forEach((cb, i) => { if (cb.checked) m |= 1 << i; });
  return m;
}

function drawSlice() {
  const rgba = synth_slice(classMask(), Number($("s-slice").value), Number($("s-window").value), BigInt($("s-seed").value || 0), SLICES, SIZE);
  blit($("slice-canvas"), rgba, SIZE, SIZE);
}

function drawFocal() {
  const n = 200;
  const c = focal_curve(Number($("f-gamma").value), Number($("f-alpha").value), n);
  const cv = $("focal-canvas");
  const ctx = cv.getContext("2d");
  const pad = 30;
  const w = cv.width - 2 * pad;
  const h = cv.height - 2 * pad;
  const ymax = Math.max(...c.slice(0, n), ...c.slice(n)) || 1;
  ctx.clearRect(0, 0, cv.width, cv.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#444";
  ctx.fillText("p → 1", pad + w - 30, pad + h + 18);
  ctx.fillText(ymax.toFixed(2), 2, pad + 8);
  ctx.fillText("0", pad - 12, pad + h);
  for (const [off, dash, color] of [[0, [], "#c33"], [n, [6, 4], "#36c"]]) {
    ctx.beginPath();
    ctx.setLineDash(dash);
    ctx.strokeStyle = color;
    for (let i = 0; i < n; i++) {
      const px = pad + ((i + 0.5) / n) * w;
      const py = pad + h - (c[off + i] / ymax) * h;
      if (i === 0) ctx.moveTo(px, py); else ctx.lineTo(px, py);
    }
    ctx.stroke();
  }
  ctx.setLineDash([]);
}

async function main() {
  await init();
  $("status").textContent = "";
  document.querySelectorAll("input[type=range]").forEach(bindOutput);

  const names = class_names().split("\n");
  $("classes").innerHTML = names.map((n, i) => `<label><input type="checkbox" ${i % 3 === 0 ? "checked" : ""}> ${n}</label>`).join("");
  $("s-slice").max = String(SLICES - 1);

  ["g-experts", "g-hidden", "g-sharp", "g-seed"].forEach((id) => $(id).addEventListener("input", drawGates));
  $("gate-canvas").addEventListener("mousemove", showGates);
  ["s-slice", "s-window", "s-seed"].forEach((id) => $(id).addEventListener("input", drawSlice));
  $("classes").addEventListener("change", drawSlice);
  ["f-gamma", "f-alpha"].forEach((id) => $(id).addEventListener("input", drawFocal));

  drawGates();
  drawSlice();
  drawFocal();
}

main().catch((e) => { $("status").textContent = String(e); });
