import init, { profile_curves, avar_curves, conditioning_curve } from "./pkg/dynpanel_wasm_demo.js";

const COLOURS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const POINTS = 241;

function field(box, name) {
  return box.querySelector(`[name=${name}]`).value;
}

function num(box, name) {
  const v = Number(field(box, name));
  if (!Number.isFinite(v)) throw new Error(`${name} is not a number`);
  return v;
}

function int(box, name) {
  const v = num(box, name);
  if (!Number.isInteger(v) || v < 0) throw new Error(`${name} must be a non-negative integer`);
  return v;
}

// Draws each series against x, skipping nulls. Markers are vertical lines.
function plot(box, x, series, markers = []) {
  const canvas = box.querySelector("canvas");
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 48;
  ctx.clearRect(0, 0, w, h);

  const ys = series.flatMap(s => s.y.filter(v => v !== null));
  if (ys.length === 0) return;
  let lo = Math.min(...ys), hi = Math.max(...ys);
  if (hi === lo) { hi += 1; lo -= 1; }
  const x0 = x[0], x1 = x[x.length - 1];
  const px = v => pad + (v - x0) / (x1 - x0) * (w - 2 * pad);
  const py = v => h - pad - (v - lo) / (hi - lo) * (h - 2 * pad);

  ctx.strokeStyle = "#999";
  ctx.fillStyle = "#444";
  ctx.font = "12px system-ui";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  for (let k = 0; k <= 4; k++) {
    const xv = x0 + (x1 - x0) * k / 4, yv = lo + (hi - lo) * k / 4;
    ctx.fillText(xv.toPrecision(3), px(xv) - 12, h - pad + 16);
    ctx.fillText(yv.toPrecision(4), 2, py(yv) + 4);
  }

  for (const m of markers) {
    ctx.strokeStyle = m.colour;
    ctx.setLineDash([4, 4]);
    ctx.beginPath();
    ctx.moveTo(px(m.x), pad);
    ctx.lineTo(px(m.x), h - pad);
    ctx.stroke();
  }
  ctx.setLineDash([]);

  series.forEach((s, i) => {
    ctx.strokeStyle = COLOURS[i % COLOURS.length];
    ctx.lineWidth = 2;
    ctx.beginPath();
    let open = false;
    s.y.forEach((v, k) => {
      if (v === null) { open = false; return; }
      if (open) ctx.lineTo(px(x[k]), py(v)); else ctx.moveTo(px(x[k]), py(v));
      open = true;
    });
    ctx.stroke();
  });
  ctx.lineWidth = 1;

  box.querySelector(".legend").innerHTML = series
    .map((s, i) => `<span style="color:${COLOURS[i % COLOURS.length]}">&#9632; ${s.name}</span>`)
    .join("");
}

// Objectives differ by constants; shift each so its maximum sits at zero.
function centred(y) {
  const top = Math.max(...y.filter(v => v !== null));
  return y.map(v => (v === null ? null : v - top));
}

function run(box, body) {
  const out = box.querySelector(".out");
  out.classList.remove("err");
  try {
    out.textContent = body();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e);
  }
}

const actions = {
  profile(box) {
    const r = JSON.parse(profile_curves(
      num(box, "rho"), num(box, "sigma2"), num(box, "omega2"),
      int(box, "n"), int(box, "t"), int(box, "seed"),
      num(box, "lo"), num(box, "hi"), POINTS, field(box, "rule")));
    plot(box, r.rho,
      [{ name: "MILE profile", y: centred(r.mile) }, { name: "Lancaster objective", y: centred(r.lancaster) }],
      [{ x: r.mile_rho, colour: COLOURS[0] }, { x: r.lancaster_selected, colour: COLOURS[1] }]);
    const lines = [
      `MILE rho_hat       ${r.mile_rho.toFixed(5)}`,
      `Lancaster maxima   ${r.lancaster_roots.map(v => v.toFixed(5)).join(", ") || "none"}`,
      `selected (${r.rule})  ${r.lancaster_selected.toFixed(5)}`,
    ];
    return lines.concat(r.warnings.map(w => `warning: ${w}`)).join("\n");
  },
  avar(box) {
    const r = JSON.parse(avar_curves(
      int(box, "t"), num(box, "sigma2"), num(box, "omega2"), num(box, "lo"), num(box, "hi"), POINTS));
    plot(box, r.rho, [
      { name: "MILE", y: r.mile },
      { name: "Lancaster (closed-form score variance)", y: r.lancaster },
      { name: "Lancaster (exact score variance)", y: r.lancaster_exact },
    ]);
    return "Asymptotic variance of sqrt(N) (rho_hat - rho*).";
  },
  conditioning(box) {
    const r = JSON.parse(conditioning_curve(
      num(box, "rho"), num(box, "sigma2"), num(box, "omega2"), num(box, "y1"),
      int(box, "t"), num(box, "lo"), num(box, "hi"), POINTS));
    plot(box, r.delta,
      [{ name: "MILE on differences", y: r.differenced }, { name: "conditional on y1", y: r.conditional }],
      [{ x: r.knife_edge_delta, colour: "#888" }]);
    return `The curves touch at delta = 1 - rho = ${r.knife_edge_delta.toFixed(4)}.`;
  },
};

await init();
for (const [id, action] of Object.entries(actions)) {
  const box = document.getElementById(id);
  const go = () => run(box, () => action(box));
  box.querySelector("button").addEventListener("click", go);
  go();
}
