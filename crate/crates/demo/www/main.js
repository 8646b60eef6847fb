import init, { render_prompt, parse_completion, score_answer } from "./pkg/crag_demo.js";

const $ = (id) => document.getElementById(id);

function escape(s) {
  return String(s).replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" })[c]);
}

function showError(target, out) {
  target.innerHTML = `<p class="err">${escape(out.error)}</p>`;
}

function onRender() {
  const out = JSON.parse(render_prompt($("family").value, $("question").value, $("docs").value, Number($("topk").value) || 1));
  if (out.error) {
    $("prompt").textContent = "";
    return showError($("ranking"), out);
  }
  const rows = out.ranking.map((r, i) => `<tr><td>[${i + 1}]</td><td>${escape(r.title || r.id)}</td><td>${r.score.toFixed(3)}</td></tr>`);
  $("ranking").innerHTML = rows.length ? `<table><tr><th>Slot</th><th>Document</th><th>BM25</th></tr>${rows.join("")}</table>` : "";
  $("prompt").textContent = out.text;
}

function onParse() {
  const out = JSON.parse(parse_completion($("completion").value, Number($("k").value) || 0));
  if (out.error) {
    const e = out.parse_error;
    const text = $("completion").value;
    const chars = Array.from(text);
    const before = chars.slice(Math.max(0, e.span[0] - 40), e.span[0]).join("");
    const at = chars.slice(e.span[0], e.span[1]).join("");
    $("trace").innerHTML = `<p class="err">${escape(out.error)}</p><pre>…${escape(before)}<mark>${escape(at || " ")}</mark></pre>`;
    return;
  }
  const t = out.trace;
  const analyses = t.analyses
    .map((a) => `<tr class="${a.verdict === "relevant" ? "rel" : "irr"}"><td>[${a.doc_index}]</td><td>${a.verdict}</td><td>${escape(a.rationale)}</td></tr>`)
    .join("");
  $("trace").innerHTML = `
    <p><b>Answer:</b> ${escape(t.answer)}</p>
    <p><b>Explanation:</b> ${escape(t.explanation)}</p>
    <p><b>Evidence cited:</b> ${t.reference_evidence.map((e) => `[${e.doc_index}]`).join(" ") || "none"}</p>
    <table><tr><th>Doc</th><th>Verdict</th><th>Rationale</th></tr>${analyses}</table>
    <p>Relevant: ${out.partition.relevant.join(", ") || "none"}; irrelevant: ${out.partition.irrelevant.join(", ") || "none"}</p>
    <p class="${out.full_coverage ? "ok" : "err"}">${out.full_coverage ? "Every document is cited." : "Not cited: " + out.missing.join(", ")}</p>`;
}

function onScore() {
  const out = JSON.parse(score_answer($("prediction").value, $("gold").value, $("task").value));
  if (out.error) return showError($("scores"), out);
  const mark = (b) => (b ? '<span class="ok">yes</span>' : '<span class="err">no</span>');
  $("scores").innerHTML = `<table>
    <tr><td>Strict match</td><td>${mark(out.strict)}</td></tr>
    <tr><td>Flexible exact match</td><td>${mark(out.flexible)}</td></tr>
    <tr><td>FEVER label</td><td>${out.fever_label ?? "none"}</td></tr>
    <tr><td>Correct for ${escape($("task").value)}</td><td>${mark(out.correct)}</td></tr></table>`;
}

await init();
$("status").textContent = "";
$("render").addEventListener("click", onRender);
$("parse").addEventListener("click", onParse);
$("score").addEventListener("click", onScore);
onRender();
onParse();
onScore();
