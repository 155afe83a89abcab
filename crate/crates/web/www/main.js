import init, { Demo } from "./pkg/shelf_search_web.js";

const $ = (id) => document.getElementById(id);
const canvas = $("view");
const ctx = canvas.getContext("2d");
let demo;

function draw() {
  const size = demo.size();
  const pixels = new ImageData(new Uint8ClampedArray(demo.rgba($("heat").checked)), size, size);
  ctx.putImageData(pixels, 0, 0);
  ctx.strokeStyle = "yellow";
  for (const [row, col, weight] of JSON.parse(demo.roots())) {
    ctx.strokeRect(col - 1, row - 1, 3, 3);
    ctx.fillStyle = "yellow";
    ctx.fillText(weight.toFixed(2), col + 2, row);
  }
}

function show(text) {
  $("log").textContent = `${text}\nsteps ${demo.steps()}, status ${demo.status()}`;
  draw();
}

function reset() {
  const n = Number($("obstacles").value);
  demo = new Demo(n, n, BigInt($("seed").value));
  show("new shelf");
}

function act(f) {
  if (demo.done()) return show("episode over");
  try {
    show(f());
  } catch (e) {
    show(String(e));
  }
}

const plan = () => act(() => demo.plan_step(Number($("m").value), Number($("h").value)));

await init();
reset();
$("reset").onclick = reset;
$("heat").onchange = draw;
$("plan").onclick = plan;
$("run").onclick = () => {
  const tick = () => {
    plan();
    if (!demo.done()) setTimeout(tick, 0);
  };
  tick();
};
for (const b of document.querySelectorAll("[data-move]")) {
  const [dx, dy, dt, dg] = b.dataset.move.split(",").map(Number);
  b.onclick = () => act(() => demo.manual_step(dx, dy, dt, dg));
}
