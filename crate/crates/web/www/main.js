import init, { shape_rgba, shape_heatmap_png, shape_complexity, fusion_weights, kruskal_wallis_test } from "./pkg/xforge_web.js";

const $ = (id) => document.getElementById(id);

function show(id, fn) {
  const el = $(id);
  try {
    el.classList.remove("err");
    el.textContent = fn();
  } catch (e) {
    el.classList.add("err");
    el.textContent = String(e);
  }
}

function rows(text) {
  return text.trim().split("\n").map((l) => l.trim().split(/\s+/).map(Number));
}

let heatUrl = null;

function drawShape() {
  show("shape-out", () => {
    const cls = Number($("cls").value);
    const seed = BigInt($("seed").value);
    const q = Number($("q").value);
    const grid = Number($("grid").value);
    const size = 32;
    const rgba = shape_rgba(cls, size, seed);
    const ctx = $("img").getContext("2d");
    ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
    const png = shape_heatmap_png(cls, size, seed, q, grid);
    if (heatUrl) URL.revokeObjectURL(heatUrl);
    heatUrl = URL.createObjectURL(new Blob([png], { type: "image/png" }));
    $("heat").src = heatUrl;
    const c = shape_complexity(cls, size, seed, grid);
    return `complexity ${c.toFixed(4)} (max ln ${grid * grid} = ${Math.log(grid * grid).toFixed(4)})`;
  });
}

function fuse() {
  show("fuse-out", () => {
    const r = rows($("metrics").value);
    const w = fusion_weights(
      Float64Array.from(r.map((x) => x[0])),
      Float64Array.from(r.map((x) => x[1])),
      Number($("l1").value),
      Number($("l2").value),
    );
    return Array.from(w, (v, i) => `method ${i}: ${v.toFixed(4)}`).join("\n");
  });
}

function kw() {
  show("kw-out", () => {
    const g = rows($("groups").value);
    const [h, df, p] = kruskal_wallis_test(Float64Array.from(g.flat()), Uint32Array.from(g.map((x) => x.length)));
    return `H = ${h.toFixed(4)}, df = ${df}, p = ${p.toExponential(3)}`;
  });
}

await init();
$("draw").onclick = drawShape;
$("fuse").onclick = fuse;
$("kw").onclick = kw;
drawShape();
fuse();
kw();
