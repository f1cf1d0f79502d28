import init, { synth_mixture, spectrogram, compare_matchings } from "./pkg/specsep_web.js";

const $ = (id) => document.getElementById(id);
let current = null;

function drawWave(samples, label) {
  const c = document.createElement("canvas");
  c.width = 900;
  c.height = 60;
  const g = c.getContext("2d");
  const step = samples.length / c.width;
  g.strokeStyle = "#246";
  g.beginPath();
  for (let x = 0; x < c.width; x++) {
    let lo = 1, hi = -1;
    for (let i = Math.floor(x * step); i < Math.floor((x + 1) * step); i++) {
      lo = Math.min(lo, samples[i]);
      hi = Math.max(hi, samples[i]);
    }
    g.moveTo(x, (1 - hi) * 30);
    g.lineTo(x, (1 - lo) * 30);
  }
  g.stroke();
  const div = document.createElement("div");
  div.textContent = label;
  div.appendChild(c);
  return div;
}

function synth() {
  current = synth_mixture($("partition").value, Number($("sources").value), Number($("mix-seed").value));
  $("mix-summary").textContent = current.summary;
  const waves = $("waves");
  waves.replaceChildren(drawWave(current.samples(), "mixture"));
  for (let k = 0; k < current.count; k++) waves.appendChild(drawWave(current.source(k), `source ${k}`));
  showSpectrogram();
}

function showSpectrogram() {
  if (!current) synth();
  const view = spectrogram(current.samples(), current.sample_rate, Number($("nfft").value), Number($("hop").value));
  const db = view.db();
  const c = $("spec");
  const scale = Math.max(1, Math.floor(900 / view.frames));
  c.width = view.frames * scale;
  c.height = view.bins * 2;
  const g = c.getContext("2d");
  for (let t = 0; t < view.frames; t++) {
    for (let k = 0; k < view.bins; k++) {
      const v = Math.round(255 * (1 + db[t * view.bins + k] / 80));
      g.fillStyle = `rgb(${v},${v},${Math.min(255, v + 40)})`;
      g.fillRect(t * scale, (view.bins - 1 - k) * 2, scale, 2);
    }
  }
  $("spec-info").textContent = `${view.frames} frames × ${view.bins} bins`;
}

function match() {
  const s = Number($("s").value);
  const m = compare_matchings(s, Number($("match-seed").value));
  const values = m.matrix(), greedy = m.greedy(), optimal = m.optimal();
  const table = document.createElement("table");
  for (let i = 0; i < s; i++) {
    const row = table.insertRow();
    for (let j = 0; j < s; j++) {
      const cell = row.insertCell();
      cell.textContent = values[i * s + j].toFixed(3);
      if (greedy[i] === j) cell.classList.add("greedy");
      if (optimal[i] === j) cell.classList.add("optimal");
    }
  }
  const info = document.createElement("p");
  info.textContent = `greedy ${m.greedy_loss.toFixed(4)} (shaded), optimal ${m.optimal_loss.toFixed(4)} (outlined)`;
  $("match").replaceChildren(table, info);
}

await init();
$("mix-go").onclick = synth;
$("spec-go").onclick = showSpectrogram;
$("match-go").onclick = match;
synth();
match();
