import init, { Demo, Noise, imageSize, modes } from "./pkg/stegattn_demo_web.js";

const SCALE = 6;
const NOISE_SIZE = 48;
const $ = (id) => document.getElementById(id);

function draw(canvas, rgba, width, scale) {
  const height = rgba.length / 4 / width;
  const tmp = new OffscreenCanvas(width, height);
  tmp.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), width, height), 0, 0);
  canvas.width = width * scale;
  canvas.height = height * scale;
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

// Values in (0, 1) to a dark-blue .. yellow ramp.
function heat(v) {
  const t = Math.min(1, Math.max(0, v));
  return [Math.round(255 * t), Math.round(200 * t + 30), Math.round(140 * (1 - t) + 40), 255];
}

function drawLoss(losses) {
  const c = $("loss");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  if (losses.length === 0) return;
  const max = Math.max(...losses);
  const pad = 24;
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, 4, c.width - pad - 4, c.height - pad - 4);
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText(max.toFixed(3), 2, 14);
  ctx.fillText("0", 12, c.height - pad);
  ctx.fillText(`${losses.length} steps`, c.width - 60, c.height - 6);
  ctx.strokeStyle = "#1565c0";
  ctx.beginPath();
  losses.forEach((l, i) => {
    const x = pad + ((c.width - pad - 4) * i) / Math.max(1, losses.length - 1);
    const y = c.height - pad - ((c.height - pad - 8) * l) / max;
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.stroke();
}

function drawChannels(values) {
  const c = $("channel");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  if (values.length === 0) {
    ctx.fillStyle = "#888";
    ctx.fillText("this mode has no channel attention", 10, 20);
    return;
  }
  const w = c.width / values.length;
  values.forEach((v, i) => {
    ctx.fillStyle = i < 50 ? "#1565c0" : i < 60 ? "#2e7d32" : "#c62828";
    ctx.fillRect(i * w + 1, c.height * (1 - v), w - 2, c.height * v);
  });
}

function drawSpatial(values, size) {
  const canvas = $("spatial");
  if (values.length === 0) {
    canvas.width = size * SCALE;
    canvas.height = size * SCALE;
    const ctx = canvas.getContext("2d");
    ctx.fillStyle = "#eee";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    ctx.fillStyle = "#888";
    ctx.fillText("no spatial attention", 8, 20);
    return;
  }
  draw(canvas, values.flatMap(heat), size, SCALE);
}

function main() {
  const size = imageSize();
  const modeSelect = $("mode");
  for (const m of modes()) modeSelect.add(new Option(m, m, false, m === "channel-spatial-parallel"));

  let demo = null;
  let running = false;

  const refresh = () => {
    draw($("panels"), demo.panels(), size * 4, SCALE);
    const [pc, sc, ps, ss] = demo.quality();
    $("quality").textContent =
      `cover  vs stego:    PSNR ${pc.toFixed(2)} dB  SSIM ${sc.toFixed(3)}\n` +
      `secret vs revealed: PSNR ${ps.toFixed(2)} dB  SSIM ${ss.toFixed(3)}`;
    const losses = demo.losses();
    drawLoss(Array.from(losses));
    $("status").textContent = losses.length ? `step ${losses.length}, loss ${losses[losses.length - 1].toFixed(4)}` : "untrained";
    drawSpatial(Array.from(demo.spatialMap()), size);
    drawChannels(Array.from(demo.channelMap()));
  };

  const reset = () => {
    running = false;
    $("run").textContent = "Run";
    demo?.free();
    demo = new Demo(modeSelect.value, Number($("seed").value) >>> 0);
    refresh();
  };

  const loop = () => {
    if (!running) return;
    demo.step(1);
    refresh();
    setTimeout(loop, 0);
  };

  $("reset").onclick = reset;
  modeSelect.onchange = reset;
  $("step").onclick = () => {
    demo.step(1);
    refresh();
  };
  $("run").onclick = () => {
    running = !running;
    $("run").textContent = running ? "Pause" : "Run";
    loop();
  };

  const noise = () => {
    const sigma = Number($("sigma").value);
    $("sigma-value").textContent = sigma.toFixed(3);
    const probe = new Noise(Number($("noise-seed").value) >>> 0, sigma, NOISE_SIZE);
    draw($("noise"), probe.rgba(), NOISE_SIZE * 2, 4);
    const psnr = Number.isFinite(probe.psnr) ? `${probe.psnr.toFixed(2)} dB` : "inf (identical)";
    $("noise-metrics").textContent = `PSNR ${psnr}\nSSIM ${probe.ssim.toFixed(4)}`;
    probe.free();
  };
  $("sigma").oninput = noise;
  $("noise-seed").onchange = noise;

  reset();
  noise();
}

init()
  .then(main)
  .catch((e) => {
    $("error").textContent = `failed to start: ${e}`;
  });
